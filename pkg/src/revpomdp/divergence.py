"""Exact divergences over enumerated trajectory laws and checks of the
likelihood-ratio identities used by the hard-instance families.

Steps in event definitions are 1-based, matching ``Theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import EnumerationTooLarge, PreconditionError, ShapeError, UnsupportedStructure
from .instances import REGRET, SINGLE, HardInstanceSpec, build
from .pomdp import DEFAULT_CAP, Policy, TabularPOMDP, Trajectory, iter_trajectories, trajectory_probability

PROB_TOL = 1e-10
INF = math.inf

# A schedule is a list of per-episode policies or a callable ``(t, past) -> Policy``.
Schedule = Sequence[Policy] | Callable[[int, tuple], Policy]


@dataclass(frozen=True, eq=False)
class FiniteDistribution:
    """Probability vector over a finite support under counting measure."""

    support: tuple
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.shape[0] != len(self.support):
            raise ShapeError("probs must be a vector aligned with support")
        if np.any(p < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(math.fsum(p) - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {math.fsum(p)!r}, not 1")
        if len(set(self.support)) != len(self.support):
            raise ValueError("support has duplicates")
        p.setflags(write=False)
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_mapping(cls, d: Mapping[Hashable, float]) -> "FiniteDistribution":
        keys = tuple(d)
        return cls(keys, np.array([d[k] for k in keys], dtype=float))

    @classmethod
    def from_array(cls, p) -> "FiniteDistribution":
        p = np.asarray(p, dtype=float).ravel()
        return cls(tuple(range(p.shape[0])), p)

    def as_dict(self) -> dict:
        return dict(zip(self.support, self.probs.tolist()))

    def __len__(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class Divergences:
    tv: float
    hellinger_sq: float
    kl: float
    chi_sq: float

    def to_dict(self) -> dict:
        return {"tv": self.tv, "hellinger_sq": self.hellinger_sq, "kl": self.kl, "chi_sq": self.chi_sq}


def _align(P, Q) -> tuple[np.ndarray, np.ndarray]:
    if not isinstance(P, FiniteDistribution):
        P = FiniteDistribution.from_array(P)
    if not isinstance(Q, FiniteDistribution):
        Q = FiniteDistribution.from_array(Q)
    if P.support == Q.support:
        return np.asarray(P.probs), np.asarray(Q.probs)
    dp, dq = P.as_dict(), Q.as_dict()
    keys = list(dp)
    keys += [k for k in dq if k not in dp]
    return (
        np.array([dp.get(k, 0.0) for k in keys]),
        np.array([dq.get(k, 0.0) for k in keys]),
    )


def divergences(P, Q) -> Divergences:
    """TV, squared Hellinger (no 1/2), KL and chi-square; KL and chi-square are
    ``inf`` when ``P`` charges a point where ``Q`` vanishes."""
    p, q = _align(P, Q)
    tv = 0.5 * math.fsum(np.abs(p - q))
    hel = math.fsum((np.sqrt(p) - np.sqrt(q)) ** 2)
    if np.any((p > 0) & (q == 0)):
        return Divergences(tv, hel, INF, INF)
    pos = p > 0
    kl = math.fsum(p[pos] * np.log(p[pos] / q[pos]))
    chi = math.fsum(p[pos] ** 2 / q[pos]) - 1.0
    return Divergences(tv, hel, kl, max(chi, 0.0))


def tv_distance(P, Q) -> float:
    return divergences(P, Q).tv


def hellinger_sq(P, Q) -> float:
    return divergences(P, Q).hellinger_sq


def kl_divergence(P, Q) -> float:
    return divergences(P, Q).kl


def chi_sq_divergence(P, Q) -> float:
    return divergences(P, Q).chi_sq


def inequality_violations(P, Q, tol: float = 1e-12) -> list[str]:
    """Which of ``2 tv^2 <= kl <= log(1 + chi_sq)`` fail (empty when both hold)."""
    d = divergences(P, Q)
    out = []
    if 2 * d.tv**2 > d.kl + tol:
        out.append("2tv^2<=kl")
    if d.kl > math.log1p(d.chi_sq) + tol:
        out.append("kl<=log(1+chi_sq)")
    return out


# Product-space enumeration


def _policy_at(schedule: Schedule, t: int, past: tuple) -> Policy:
    if callable(schedule) and not isinstance(schedule, Sequence):
        return schedule(t, past)
    return schedule[t]


def _schedule_length(schedule: Schedule, T: int | None) -> int:
    if T is not None:
        return T
    if callable(schedule) and not isinstance(schedule, Sequence):
        raise ValueError("an adaptive schedule needs an explicit T")
    return len(schedule)


def iter_product(
    pomdp: TabularPOMDP, schedule: Schedule, T: int | None = None, cap: int = DEFAULT_CAP
) -> Iterable[tuple[tuple[Trajectory, ...], float]]:
    """Tuples of ``T`` episodes with their probability under the schedule."""
    T = _schedule_length(schedule, T)
    # values hold the policy too, so an ``id`` key is never recycled
    cache: dict[int, tuple[Policy, list[tuple[Trajectory, float]]]] = {}
    count = 0

    def episode(policy: Policy) -> list[tuple[Trajectory, float]]:
        key = id(policy)
        if key not in cache:
            cache[key] = (policy, [(tr.without_latent(), p) for tr, p in iter_trajectories(pomdp, policy, cap)])
        return cache[key][1]

    def rec(t: int, past: tuple, logp: float):
        nonlocal count
        if t == T:
            count += 1
            if count > cap:
                raise EnumerationTooLarge(f"product space exceeds cap {cap}")
            yield past, math.exp(logp)
            return
        policy = _policy_at(schedule, t, past)
        for tr, p in episode(policy):
            yield from rec(t + 1, past + (tr,), logp + math.log(p))

    yield from rec(0, (), 0.0)


def product_distribution(
    pomdp: TabularPOMDP, schedule: Schedule, T: int | None = None, cap: int = DEFAULT_CAP
) -> FiniteDistribution:
    d: dict = {}
    for tup, p in iter_product(pomdp, schedule, T, cap):
        d[tup] = d.get(tup, 0.0) + p
    return FiniteDistribution.from_mapping(d)


def _mixture(dists: Sequence[FiniteDistribution], weights: Sequence[float]) -> FiniteDistribution:
    acc: dict = {}
    for dist, w in zip(dists, weights):
        for k, p in zip(dist.support, dist.probs):
            acc.setdefault(k, []).append(w * p)
    return FiniteDistribution.from_mapping({k: math.fsum(v) for k, v in acc.items()})


@dataclass(frozen=True)
class IngsterResult:
    lhs: float
    rhs: float
    gap: float
    n_tuples: int

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "gap": self.gap, "n_tuples": self.n_tuples}


def ingster_check(
    models: Sequence[TabularPOMDP],
    prior: Sequence[float] | None,
    reference: TabularPOMDP,
    schedule: Schedule,
    T: int | None = None,
    cap: int = DEFAULT_CAP,
) -> IngsterResult:
    """Compare ``1 + chi^2(mixture || reference)`` with the paired likelihood-ratio form.

    The left side mixes the per-model laws of the whole interaction; the right
    side averages products of policy-free ratios over reference tuples.
    """
    if not models:
        raise ValueError("need at least one model")
    w = np.full(len(models), 1.0 / len(models)) if prior is None else np.asarray(prior, dtype=float)
    if w.shape != (len(models),) or np.any(w < 0) or abs(w.sum() - 1) > PROB_TOL:
        raise ValueError("prior must be a distribution over the models")
    P0 = product_distribution(reference, schedule, T, cap)
    mix = _mixture([product_distribution(M, schedule, T, cap) for M in models], w)
    lhs = 1.0 + divergences(mix, P0).chi_sq

    memo: dict = {}

    def log_ratio(i: int, tr: Trajectory) -> float:
        key = (i, tr)
        if key not in memo:
            pm = trajectory_probability(models[i], tr.obs, tr.acts)
            p0 = trajectory_probability(reference, tr.obs, tr.acts)
            memo[key] = math.log(pm) - math.log(p0) if pm > 0 else -INF
        return memo[key]

    n = len(models)
    ratios = np.empty((len(P0), n))
    for r, tup in enumerate(P0.support):
        for i in range(n):
            ratios[r, i] = math.exp(math.fsum(log_ratio(i, tr) for tr in tup))
    gram = ratios.T @ (np.asarray(P0.probs)[:, None] * ratios)
    rhs = math.fsum((w[:, None] * w[None, :] * gram).ravel())
    return IngsterResult(lhs, rhs, abs(lhs - rhs), len(P0))


# Events on the lock families


def _entry_ok(spec: HardInstanceSpec, obs: Sequence[int], acts: Sequence[int]) -> bool:
    th = spec.theta
    hs = th.h_star
    return len(acts) >= hs and obs[hs - 1] == spec.layout.leaf_state(th.s_star) and acts[hs - 1] == th.a_star


def _password_ok(spec: HardInstanceSpec, acts: Sequence[int], lo: int, hi: int) -> bool:
    th = spec.theta
    return all(acts[s - 1] == th.password_at(s) for s in range(lo, hi + 1))


def reveal_steps(spec: HardInstanceSpec, obs: Sequence[int], acts: Sequence[int]) -> tuple[int, ...]:
    """Steps ``l`` whose prefix lies in the reveal event, so that the law of
    ``o_{l+1}`` can differ from the null model through the lock emissions.

    Single-step family: ``l`` in ``h*..H-2`` with ``a*`` at ``h*`` and the
    password through ``l``. Regret family: ``l`` in the reveal set above
    ``h*`` with the password through ``l-1`` and the true reveal action at ``l``.
    """
    th = spec.theta
    if th is None or not _entry_ok(spec, obs, acts):
        return ()
    H, hs, n = spec.H, th.h_star, len(acts)
    if spec.family == SINGLE:
        return tuple(
            l for l in range(hs, min(H - 2, n) + 1) if _password_ok(spec, acts, hs + 1, l)
        )
    if spec.family == REGRET:
        return tuple(
            l
            for l in spec.layout.hset
            if hs < l <= n and acts[l - 1] == th.a_rev and _password_ok(spec, acts, hs + 1, l - 1)
        )
    raise UnsupportedStructure(f"no reveal event for family {spec.family!r}")


def in_correct(spec: HardInstanceSpec, obs: Sequence[int], acts: Sequence[int]) -> bool:
    """Entry at ``(h*, s*, a*)`` followed by the full password through ``H-1``."""
    th = spec.theta
    if th is None or len(acts) < spec.H - 1 or not _entry_ok(spec, obs, acts):
        return False
    return _password_ok(spec, acts, th.h_star + 1, spec.H - 1)


def bound_constant(spec: HardInstanceSpec) -> float:
    if spec.family == SINGLE:
        return (1.0 + spec.sigma) ** (2 * spec.H)
    if spec.family == REGRET:
        return 1.0
    raise UnsupportedStructure(f"no chi-square bound for family {spec.family!r}")


@dataclass(frozen=True)
class Chi2Result:
    lhs: float
    bound: float
    ok: bool
    max_reveal: int
    max_correct: int
    constant: float

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "bound": self.bound,
            "ok": self.ok,
            "max_reveal": self.max_reveal,
            "max_correct": self.max_correct,
            "constant": self.constant,
        }


def chi2_inner_product_check(
    spec: HardInstanceSpec,
    mu,
    mu2,
    schedule: Schedule,
    T: int | None = None,
    budgets: tuple[int, int] | None = None,
    cap: int = DEFAULT_CAP,
) -> Chi2Result:
    """Exact ``E_0[prod_t P_mu P_mu' / P_0^2]`` against its exponential bound.

    ``budgets = (N_o, N_r)`` must dominate the reveal and correct-event counts
    on every reference tuple; ``None`` uses the realized maxima.
    """
    if spec.theta is None:
        raise PreconditionError("the check needs a non-null theta")
    C = bound_constant(spec)
    M1 = build(spec.with_mu(mu)).pomdp
    M2 = build(spec.with_mu(mu2)).pomdp
    M0 = build(spec.with_theta(None)).pomdp
    memo: dict = {}

    def lr(tr: Trajectory) -> float:
        if tr not in memo:
            p0 = trajectory_probability(M0, tr.obs, tr.acts)
            p1 = trajectory_probability(M1, tr.obs, tr.acts)
            p2 = trajectory_probability(M2, tr.obs, tr.acts)
            memo[tr] = (p1 * p2) / (p0 * p0)
        return memo[tr]

    terms = []
    max_o = max_r = 0
    for tup, p in iter_product(M0, schedule, T, cap):
        terms.append(p * math.prod(lr(tr) for tr in tup))
        max_o = max(max_o, sum(len(reveal_steps(spec, tr.obs, tr.acts)) for tr in tup))
        max_r = max(max_r, sum(in_correct(spec, tr.obs, tr.acts) for tr in tup))
    n_o, n_r = (max_o, max_r) if budgets is None else budgets
    if max_o > n_o or max_r > n_r:
        raise PreconditionError(
            f"schedule exceeds budgets: reveal {max_o} > {n_o} or correct {max_r} > {n_r}"
        )
    lhs = math.fsum(terms)
    m1 = np.asarray(spec.with_mu(mu).mu_array, dtype=float).ravel()
    m2 = np.asarray(spec.with_mu(mu2).mu_array, dtype=float).ravel()
    inner = abs(float(m1 @ m2))
    eps, sig, K = spec.epsilon, spec.sigma, spec.K
    bound = math.exp(n_o * C * sig**2 * eps**2 * inner / K + (4.0 / 3.0) * C * eps**2 * n_r)
    return Chi2Result(lhs, bound, lhs <= bound + 1e-9, max_o, max_r, C)


# Conditional ratio I(tau_l)


def _predictive(pomdp: TabularPOMDP, obs: Sequence[int], acts: Sequence[int]) -> np.ndarray | None:
    """Unnormalized law of ``o_{l+1}`` given ``l`` observations and ``l`` actions."""
    alpha = np.asarray(pomdp.initial, dtype=float)
    for h, o in enumerate(obs):
        alpha = (alpha * pomdp.emissions[h][:, o]) @ pomdp.transitions[h][:, acts[h], :]
    po = alpha @ pomdp.emissions[len(obs)]
    tot = po.sum()
    return po / tot if tot > 0 else None


def conditional_ratio(
    model: TabularPOMDP,
    model2: TabularPOMDP,
    reference: TabularPOMDP,
    obs: Sequence[int],
    acts: Sequence[int],
) -> float:
    """``E_0[P(o|tau) P'(o|tau) / P_0(o|tau)^2 | tau]`` for a prefix reachable under the reference."""
    if len(obs) != len(acts) or len(obs) >= reference.H:
        raise ShapeError("prefix needs l observations and l actions with l < H")
    p0 = _predictive(reference, obs, acts)
    if p0 is None:
        raise PreconditionError("prefix is unreachable under the reference model")
    p1 = _predictive(model, obs, acts)
    p2 = _predictive(model2, obs, acts)
    if p1 is None or p2 is None:
        raise PreconditionError("prefix is unreachable under a compared model")
    pos = p0 > 0
    return math.fsum(p1[pos] * p2[pos] / p0[pos])


@dataclass(frozen=True)
class RatioRecord:
    obs: tuple[int, ...]
    acts: tuple[int, ...]
    kind: str  # "rev", "correct" or "other"
    value: float
    expected: float | None


def conditional_ratio_table(
    spec: HardInstanceSpec, mu, mu2, cap: int = DEFAULT_CAP
) -> list[RatioRecord]:
    """``I(tau_l)`` for every reference-reachable prefix and every action sequence.

    Outside the reveal and correct events the expected value is exactly 1; on
    the regret family the events have closed forms too.
    """
    if spec.theta is None:
        raise PreconditionError("the table needs a non-null theta")
    s1, s2 = spec.with_mu(mu), spec.with_mu(mu2)
    M1, M2, M0 = build(s1).pomdp, build(s2).pomdp, build(spec.with_theta(None)).pomdp
    eps, sig, K, H = spec.epsilon, spec.sigma, spec.K, spec.H
    inner = float(np.asarray(s1.mu_array, dtype=float).ravel() @ np.asarray(s2.mu_array, dtype=float).ravel())
    exact = spec.family == REGRET
    out: list[RatioRecord] = []

    def rec(alpha: np.ndarray, obs: tuple, acts: tuple):
        l = len(obs)
        if len(out) >= cap:
            raise EnumerationTooLarge(f"prefix count exceeds cap {cap}")
        if l == len(acts):
            if l < H:
                val = conditional_ratio(M1, M2, M0, obs, acts)
                if l > 0 and l in reveal_steps(spec, obs, acts):
                    kind, want = "rev", (1 + eps**2 * sig**2 * inner / K) if exact else None
                elif l == H - 1 and in_correct(spec, obs, acts):
                    kind, want = "correct", (1 + 4 * eps**2 / 3) if exact else None
                else:
                    kind, want = "other", 1.0
                out.append(RatioRecord(obs, acts, kind, val, want))
                po = alpha @ M0.emissions[l]
                for o in np.flatnonzero(po > 0):
                    rec(alpha * M0.emissions[l][:, o], obs + (int(o),), acts)
            return
        h = l - 1
        if h == H - 1:
            return
        for a in range(M0.A):
            rec(alpha @ M0.transitions[h][:, a, :], obs, acts + (a,))

    rec(np.asarray(M0.initial, dtype=float), (), ())
    return out


# Hellinger conditioning


@dataclass(frozen=True)
class HellingerConditioningResult:
    lhs: float
    rhs: float
    ok: bool


def hellinger_conditioning_check(joint_P, joint_Q, slack: float = 1e-10) -> HellingerConditioningResult:
    """``E_{X~P}[H^2(P_{Y|X}, Q_{Y|X})] <= 2 H^2(P_XY, Q_XY)`` on 2-D joint arrays.

    Where ``Q_X`` vanishes the conditional ``Q_{Y|X}`` is taken uniform.
    """
    P = np.asarray(joint_P, dtype=float)
    Q = np.asarray(joint_Q, dtype=float)
    if P.ndim != 2 or P.shape != Q.shape:
        raise ShapeError("joints must be 2-D arrays of equal shape")
    for J in (P, Q):
        if np.any(J < 0) or abs(J.sum() - 1) > PROB_TOL:
            raise ValueError("joints must be probability arrays")
    px, qx = P.sum(axis=1), Q.sum(axis=1)
    ny = P.shape[1]
    terms = []
    for x in np.flatnonzero(px > 0):
        pc = P[x] / px[x]
        qc = Q[x] / qx[x] if qx[x] > 0 else np.full(ny, 1.0 / ny)
        terms.append(px[x] * math.fsum((np.sqrt(pc) - np.sqrt(qc)) ** 2))
    lhs = math.fsum(terms)
    rhs = 2.0 * hellinger_sq(P.ravel(), Q.ravel())
    return HellingerConditioningResult(lhs, rhs, lhs <= rhs + slack)
