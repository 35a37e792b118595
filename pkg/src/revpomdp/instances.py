"""Builders for the three hard-instance families and their closed-form metadata.

Steps in hyperparameters and in ``Theta`` are 1-based (``1..H``); arrays are
0-based (array index ``h - 1``). Tree nodes use heap order: the root is 0 and
node ``i`` has children ``2i+1`` (left) and ``2i+2`` (right).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .errors import EnumerationTooLarge, ParameterError, UnsupportedStructure
from .pomdp import TIE_BREAK, ActionSequencePolicy, TabularPOMDP

SINGLE = "single-step-pac"
REGRET = "multi-step-regret"
PAC = "multi-step-pac"
FAMILIES = (SINGLE, REGRET, PAC)

WAIT = 0
LEFT = 1
RIGHT = 2
REVEAL = 0


@dataclass(frozen=True)
class Theta:
    """Hidden parameter: entry step, leaf, entry action, optional reveal action, password.

    ``s_star`` is a leaf number in ``range(2**(n-1))``; ``password[i]`` is the
    action at step ``h_star + 1 + i``.
    """

    h_star: int
    s_star: int
    a_star: int
    password: tuple[int, ...]
    a_rev: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "password", tuple(int(a) for a in self.password))

    def password_at(self, step: int) -> int:
        return self.password[step - self.h_star - 1]

    def to_dict(self) -> dict:
        return {
            "h_star": self.h_star,
            "s_star": self.s_star,
            "a_star": self.a_star,
            "password": list(self.password),
            "a_rev": self.a_rev,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Theta":
        return cls(d["h_star"], d["s_star"], d["a_star"], tuple(d["password"]), d.get("a_rev"))


@dataclass(frozen=True)
class Layout:
    """State and observation indices of a family; depends on public hyperparameters only."""

    family: str
    n: int
    K: int
    L: int
    H: int
    A: int
    m: int

    @property
    def tree_size(self) -> int:
        return 2**self.n - 1

    @property
    def n_leaves(self) -> int:
        return 2 ** (self.n - 1)

    @property
    def root(self) -> int:
        return 0

    def leaf_state(self, j: int) -> int:
        return self.n_leaves - 1 + j

    def is_leaf(self, i: int) -> bool:
        return i >= self.n_leaves - 1

    def route(self, j: int) -> tuple[int, ...]:
        """Actions for steps ``1..n-1`` that move the root to leaf ``j``."""
        return tuple(1 + ((j >> (self.n - 2 - d)) & 1) for d in range(self.n - 1))

    @cached_property
    def hset(self) -> tuple[int, ...]:
        """Steps ``n + l*m < H`` where reveal actions act (multi-step families)."""
        if self.family == SINGLE:
            return ()
        return tuple(range(self.n, self.H, self.m))

    @cached_property
    def n_rev(self) -> int:
        return 1 + self.A // 6

    @property
    def a_rev_set(self) -> tuple[int, ...]:
        return tuple(range(self.n_rev))

    @property
    def a_tr_set(self) -> tuple[int, ...]:
        return tuple(range(self.n_rev, self.A))

    def is_reveal(self, step: int, a: int) -> bool:
        """True if ``a`` acts as a reveal action at ``step`` (multi-step families)."""
        if step not in self.hset:
            return False
        if self.family == REGRET:
            return a < self.n_rev
        if self.family == PAC:
            return a == REVEAL
        return False

    def allowed_password(self, step: int) -> tuple[int, ...]:
        if self.family == REGRET and step in self.hset:
            return self.a_tr_set
        if self.family == PAC and step in self.hset:
            return tuple(a for a in range(self.A) if a != REVEAL)
        return tuple(range(self.A))

    # state indices
    @property
    def n_blocks(self) -> int:
        return self.L if self.family == PAC else 1

    def s_plus(self, j: int = 0) -> int:
        T = self.tree_size
        return T + 5 * j if self.family == PAC else T

    def s_minus(self, j: int = 0) -> int:
        return self.s_plus(j) + 1

    def e_plus(self, j: int = 0) -> int:
        if self.family == SINGLE:
            raise UnsupportedStructure("single-step family has no reveal states")
        return self.s_plus(j) + 2

    def e_minus(self, j: int = 0) -> int:
        return self.e_plus(j) + 1

    def terminal(self, j: int = 0) -> int:
        return self.e_plus(j) + 2

    @property
    def n_states(self) -> int:
        T = self.tree_size
        return {SINGLE: T + 2, REGRET: T + 5, PAC: T + 5 * self.L}[self.family]

    # observation indices
    def o_pm(self, i: int, sign: int) -> int:
        """Index of ``o_i^+`` (sign=+1) or ``o_i^-`` (sign=-1) for ``i`` in ``range(K)``."""
        return self.tree_size + 2 * i + (0 if sign > 0 else 1)

    @property
    def o_block(self) -> np.ndarray:
        return np.arange(self.tree_size, self.tree_size + 2 * self.K)

    @property
    def lock(self) -> int:
        if self.family == SINGLE:
            raise UnsupportedStructure("single-step family has no lock observation")
        return self.tree_size + 2 * self.K

    @property
    def good(self) -> int:
        base = self.tree_size + 2 * self.K
        return base if self.family == SINGLE else base + 1

    @property
    def bad(self) -> int:
        return self.good + 1

    @property
    def terminal_obs(self) -> int:
        if self.family != REGRET:
            raise UnsupportedStructure("only the regret family has a shared terminal observation")
        return self.bad + 1

    def lock_j(self, j: int) -> int:
        if self.family != PAC:
            raise UnsupportedStructure("only the PAC family has indexed locks")
        return self.bad + 1 + 2 * j

    def terminal_j(self, j: int) -> int:
        return self.lock_j(j) + 1

    @property
    def n_obs(self) -> int:
        base = self.tree_size + 2 * self.K
        return {SINGLE: base + 2, REGRET: base + 4, PAC: base + 3 + 2 * self.L}[self.family]

    def tree_label(self, i: int) -> str:
        bits = []
        while i > 0:
            bits.append("0" if i % 2 == 1 else "1")
            i = (i - 1) // 2
        return "tree:r" + "".join(reversed(bits))

    def state_labels(self) -> tuple[str, ...]:
        labels = [self.tree_label(i) for i in range(self.tree_size)]
        if self.family == SINGLE:
            labels += ["s+", "s-"]
        elif self.family == REGRET:
            labels += ["s+", "s-", "e+", "e-", "terminal"]
        else:
            for j in range(self.L):
                labels += [f"s+:{j + 1}", f"s-:{j + 1}", f"e+:{j + 1}", f"e-:{j + 1}", f"terminal:{j + 1}"]
        return tuple(labels)

    def obs_labels(self) -> tuple[str, ...]:
        labels = [self.tree_label(i) for i in range(self.tree_size)]
        for i in range(self.K):
            labels += [f"o+:{i + 1}", f"o-:{i + 1}"]
        if self.family == SINGLE:
            labels += ["good", "bad"]
        elif self.family == REGRET:
            labels += ["lock", "good", "bad", "terminal"]
        else:
            labels += ["lock", "good", "bad"]
            for j in range(self.L):
                labels += [f"lock:{j + 1}", f"terminal:{j + 1}"]
        return tuple(labels)

    def action_labels(self) -> tuple[str, ...]:
        return tuple(f"a{a}" for a in range(self.A))


@dataclass(frozen=True)
class PublicParams:
    """Hyperparameters of a family member with the hidden parameters removed."""

    family: str
    epsilon: float
    sigma: float
    n: int
    K: int
    H: int
    A: int
    m: int = 1
    L: int = 1
    unchecked: bool = False

    @cached_property
    def layout(self) -> Layout:
        return Layout(self.family, self.n, self.K, self.L, self.H, self.A, self.m)


@dataclass(frozen=True)
class HardInstanceSpec:
    """Hyperparameters plus hidden ``(theta, mu)``; ``theta=None`` names the null model.

    ``mu`` has shape (K,) or, for the PAC family, (L, K). When omitted it is
    drawn uniformly from the sign vectors using ``mu_seed``.
    """

    family: str
    epsilon: float
    sigma: float
    n: int
    K: int
    H: int
    A: int
    m: int = 1
    L: int = 1
    theta: Theta | None = None
    mu: tuple | None = None
    unchecked: bool = False
    mu_seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown family {self.family!r}")
        if self.mu is None:
            rng = np.random.default_rng(self.mu_seed)
            shape = (self.L, self.K) if self.family == PAC else (self.K,)
            mu = rng.choice([-1, 1], size=shape)
        else:
            mu = np.asarray(self.mu)
        object.__setattr__(self, "mu", _as_tuple(mu))
        validate_spec(self)

    def public(self) -> PublicParams:
        return PublicParams(
            self.family, self.epsilon, self.sigma, self.n, self.K, self.H, self.A, self.m, self.L, self.unchecked
        )

    @property
    def layout(self) -> Layout:
        return self.public().layout

    @property
    def mu_array(self) -> np.ndarray:
        arr = np.array(self.mu, dtype=float)
        return arr.reshape(self.L, self.K) if self.family == PAC else arr.reshape(self.K)

    @property
    def is_null(self) -> bool:
        return self.theta is None

    def with_theta(self, theta: Theta | None) -> "HardInstanceSpec":
        return replace(self, theta=theta)

    def with_mu(self, mu) -> "HardInstanceSpec":
        return replace(self, mu=_as_tuple(np.asarray(mu)))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "epsilon": self.epsilon,
            "sigma": self.sigma,
            "n": self.n,
            "K": self.K,
            "H": self.H,
            "A": self.A,
            "m": self.m,
            "L": self.L,
            "theta": None if self.theta is None else self.theta.to_dict(),
            "mu": np.asarray(self.mu).tolist(),
            "unchecked": self.unchecked,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HardInstanceSpec":
        theta = d.get("theta")
        return cls(
            family=d["family"],
            epsilon=float(d["epsilon"]),
            sigma=float(d["sigma"]),
            n=int(d["n"]),
            K=int(d["K"]),
            H=int(d["H"]),
            A=int(d["A"]),
            m=int(d.get("m", 1)),
            L=int(d.get("L", 1)),
            theta=None if theta is None else Theta.from_dict(theta),
            mu=None if d.get("mu") is None else d["mu"],
            unchecked=bool(d.get("unchecked", False)),
            mu_seed=int(d.get("mu_seed", 0)),
        )


def _as_tuple(arr: np.ndarray) -> tuple:
    if arr.ndim == 1:
        return tuple(int(x) for x in arr)
    return tuple(tuple(int(x) for x in row) for row in arr)


def validate_spec(spec: HardInstanceSpec) -> None:
    """Raise :class:`ParameterError` naming the first violated constraint."""
    f = spec.family
    if not 0 < spec.epsilon < 1:
        raise ParameterError("epsilon must lie in (0, 1)")
    if not 0 < spec.sigma <= 1:
        raise ParameterError("sigma must lie in (0, 1]")
    for name in ("n", "K", "m", "L"):
        if getattr(spec, name) < 1:
            raise ParameterError(f"{name} must be >= 1")
    if spec.L != 1 and f != PAC:
        raise ParameterError("L > 1 is only defined for the multi-step-pac family")
    if spec.A < 2:
        raise ParameterError("A must be >= 2")
    if spec.n >= 2 and spec.A < 3:
        raise ParameterError("A must be >= 3 when the tree has internal nodes (n >= 2)")
    if spec.H < spec.n + 1:
        raise ParameterError("H must be >= n + 1")
    mu = np.asarray(spec.mu)
    shape = (spec.L, spec.K) if f == PAC else (spec.K,)
    if mu.shape != shape or not np.all(np.isin(mu, (-1, 1))):
        raise ParameterError(f"mu must be a sign array of shape {shape}")
    if not spec.unchecked:
        if spec.epsilon > 0.1:
            raise ParameterError("epsilon must be <= 0.1 (checked mode)")
        if f == SINGLE:
            if spec.sigma > 1 / (2 * spec.H):
                raise ParameterError("sigma must be <= 1/(2H) for the single-step family (checked mode)")
            if spec.H < 4 * spec.n:
                raise ParameterError("H must be >= 4n for the single-step family (checked mode)")
            if spec.A < 3:
                raise ParameterError("A must be >= 3 for the single-step family (checked mode)")
        else:
            if spec.H < 8 * spec.n + spec.m + 1:
                raise ParameterError("H must be >= 8n + m + 1 for multi-step families (checked mode)")
            if f == REGRET and spec.K < 2:
                raise ParameterError("K must be >= 2 for the multi-step-regret family (checked mode)")
    lay = spec.layout
    if f != SINGLE and not lay.hset:
        raise ParameterError("the reveal step set is empty (need n < H)")
    if spec.theta is not None:
        validate_theta(spec.public(), spec.theta)


def valid_h_stars(pub: PublicParams) -> tuple[int, ...]:
    if pub.family == SINGLE:
        return tuple(range(pub.n + 1, pub.H))
    return pub.layout.hset


def validate_theta(pub: PublicParams, th: Theta) -> None:
    lay = pub.layout
    if th.h_star not in valid_h_stars(pub):
        raise ParameterError(f"h_star={th.h_star} is not an admissible entry step")
    if not 0 <= th.s_star < lay.n_leaves:
        raise ParameterError("s_star must index a leaf")
    if not 1 <= th.a_star < pub.A:
        raise ParameterError("a_star must lie in 1..A-1")
    if pub.family == REGRET:
        if th.a_rev is None or th.a_rev not in lay.a_rev_set:
            raise ParameterError("a_rev must lie in the reveal action set")
    elif th.a_rev is not None:
        raise ParameterError("a_rev is only defined for the multi-step-regret family")
    if len(th.password) != pub.H - th.h_star - 1:
        raise ParameterError("password length must be H - h_star - 1")
    for i, a in enumerate(th.password):
        step = th.h_star + 1 + i
        if a not in lay.allowed_password(step):
            raise ParameterError(f"password action {a} not allowed at step {step}")


# Builders


@dataclass(frozen=True)
class InstanceMetadata:
    family: str
    optimal_value: float
    baseline_value: float
    optimal_policy: ActionSequencePolicy
    n_states: int
    n_obs: int
    n_actions: int
    claimed_n_states: int
    claimed_n_obs: int
    log_cardinality: float
    log_cardinality_bound: float
    tie_break: str = TIE_BREAK

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "optimal_value": self.optimal_value,
            "baseline_value": self.baseline_value,
            "optimal_actions": list(self.optimal_policy.actions),
            "n_states": self.n_states,
            "n_obs": self.n_obs,
            "n_actions": self.n_actions,
            "claimed_n_states": self.claimed_n_states,
            "claimed_n_obs": self.claimed_n_obs,
            "log_cardinality": self.log_cardinality,
            "log_cardinality_bound": self.log_cardinality_bound,
            "tie_break": self.tie_break,
        }


@dataclass(frozen=True, eq=False)
class HardInstance:
    spec: HardInstanceSpec
    pomdp: TabularPOMDP
    metadata: InstanceMetadata

    @property
    def layout(self) -> Layout:
        return self.spec.layout


def _lock_emission(K: int, sigma: float, mu_row: np.ndarray | None) -> np.ndarray:
    row = np.full(2 * K, 1.0 / (2 * K))
    if mu_row is not None:
        row[0::2] = (1 + sigma * mu_row) / (2 * K)
        row[1::2] = (1 - sigma * mu_row) / (2 * K)
    return row


def _build_arrays(spec: HardInstanceSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    lay = spec.layout
    f, H, A, K, L = spec.family, spec.H, spec.A, spec.K, spec.L
    S, O = lay.n_states, lay.n_obs
    th = spec.theta
    mu = spec.mu_array
    eps, sig = spec.epsilon, spec.sigma
    trans = np.zeros((H - 1, S, A, S))
    emis = np.zeros((H, S, O))
    rew = np.zeros((H, O, A))
    init = np.zeros(S)
    init[lay.root] = 1.0
    T = lay.tree_size
    ob = lay.o_block

    for i in range(T):
        emis[:, i, i] = 1.0
    blocks = range(lay.n_blocks)
    for j in blocks:
        mu_row = mu[j] if f == PAC else mu
        plus_em = _lock_emission(K, sig, mu_row)
        minus_em = _lock_emission(K, sig, None)
        sp, sm = lay.s_plus(j), lay.s_minus(j)
        for step in range(1, H + 1):
            h = step - 1
            if step == H:
                emis[h, sp, lay.good], emis[h, sp, lay.bad] = 0.75, 0.25
                emis[h, sm, lay.good], emis[h, sm, lay.bad] = 0.25, 0.75
            elif f == SINGLE:
                emis[h, sp, ob] = plus_em
                emis[h, sm, ob] = minus_em
            else:
                lk = lay.lock_j(j) if (f == PAC and step in lay.hset) else lay.lock
                emis[h, sp, lk] = 1.0
                emis[h, sm, lk] = 1.0
        if f != SINGLE:
            emis[:, lay.e_plus(j), ob] = plus_em
            emis[:, lay.e_minus(j), ob] = minus_em
            t_obs = lay.terminal_j(j) if f == PAC else lay.terminal_obs
            emis[:, lay.terminal(j), t_obs] = 1.0

    for step in range(1, H):
        h = step - 1
        for i in range(T):
            if not lay.is_leaf(i):
                for a in range(A):
                    nxt = {LEFT: 2 * i + 1, RIGHT: 2 * i + 2}.get(a, i)
                    trans[h, i, a, nxt] = 1.0
                continue
            trans[h, i, WAIT, i] = 1.0
            leaf = i - (lay.n_leaves - 1)
            for a in range(1, A):
                hit = th is not None and (step, leaf, a) == (th.h_star, th.s_star, th.a_star)
                p_plus = eps if hit else 0.0
                for j in blocks:
                    trans[h, i, a, lay.s_plus(j)] += p_plus / lay.n_blocks
                    trans[h, i, a, lay.s_minus(j)] += (1.0 - p_plus) / lay.n_blocks
        for j in blocks:
            sp, sm = lay.s_plus(j), lay.s_minus(j)
            for a in range(A):
                rev = lay.is_reveal(step, a)
                trans[h, sm, a, lay.e_minus(j) if rev else sm] = 1.0
                if th is not None and step >= th.h_star + 1:
                    if rev:
                        good_rev = f == PAC or a == th.a_rev
                        trans[h, sp, a, lay.e_plus(j) if good_rev else lay.e_minus(j)] = 1.0
                    else:
                        trans[h, sp, a, sp if a == th.password_at(step) else sm] = 1.0
            if f != SINGLE:
                for s in (lay.e_plus(j), lay.e_minus(j), lay.terminal(j)):
                    trans[h, s, :, lay.terminal(j)] = 1.0

    rew[H - 1, lay.good, :] = 1.0
    rew[H - 1, lay.root, :] = (1.0 + eps) / 4.0
    return trans, emis, rew, init


def _reachability(trans: np.ndarray, init: np.ndarray) -> np.ndarray:
    H = trans.shape[0] + 1
    S = init.shape[0]
    reach = np.zeros((H, S), dtype=bool)
    reach[0] = init > 0
    for h in range(H - 1):
        reach[h + 1] = trans[h][reach[h]].reshape(-1, S).sum(axis=0) > 0
    return reach


def optimal_actions(spec: HardInstanceSpec) -> tuple[int, ...]:
    """Tree path to ``s*``, wait until ``h*``, play ``a*``, then the password; null: all wait."""
    H = spec.H
    th = spec.theta
    if th is None:
        return (WAIT,) * H
    lay = spec.layout
    acts = list(lay.route(th.s_star))
    acts += [WAIT] * (th.h_star - 1 - len(acts))
    acts.append(th.a_star)
    acts += list(th.password)
    acts.append(WAIT)
    assert len(acts) == H
    return tuple(acts)


def optimal_policy(instance: "HardInstance | HardInstanceSpec") -> ActionSequencePolicy:
    spec = instance.spec if isinstance(instance, HardInstance) else instance
    if not isinstance(spec, HardInstanceSpec):
        raise UnsupportedStructure("optimal_policy needs a hard-family instance")
    return ActionSequencePolicy(optimal_actions(spec), spec.A)


def revealing_window(pub: "PublicParams | HardInstanceSpec") -> int:
    """Window at which the family is certified: 1 for single-step, ``m + 1`` otherwise."""
    return 1 if pub.family == SINGLE else pub.m + 1


def theta_count(pub: PublicParams) -> int:
    lay = pub.layout
    total = 0
    for hs in valid_h_stars(pub):
        pw = 1
        for step in range(hs + 1, pub.H):
            pw *= len(lay.allowed_password(step))
        total += pw
    rev = lay.n_rev if pub.family == REGRET else 1
    return lay.n_leaves * (pub.A - 1) * rev * total


def claimed_counts(pub: PublicParams) -> tuple[int, int]:
    """State and observation counts as stated for each family."""
    n, K, L = pub.n, pub.K, pub.L
    if pub.family == SINGLE:
        return 2**n + 1, 2**n + 2 * K + 1
    if pub.family == REGRET:
        return 2**n + 4, 2**n + 2 * K + 3
    return 2**n + 5 * L, 2**n + 2 * K + 2 * L + 3


def construction_counts(pub: PublicParams) -> tuple[int, int]:
    """State and observation counts implied by the construction itself."""
    lay = pub.layout
    return lay.n_states, lay.n_obs


def log_cardinality_bound(pub: PublicParams) -> float:
    S, _ = construction_counts(pub)
    mu_bits = pub.L * pub.K if pub.family == PAC else pub.K
    return mu_bits * math.log(2) + pub.H * math.log(pub.A) + math.log(S * pub.A * pub.H)


def closed_form_values(instance: "HardInstance | HardInstanceSpec") -> tuple[float, float]:
    """(optimal value, baseline value) from the family formulas.

    The baseline is the all-wait value on non-null models and the best value of
    a policy that leaves the tree on the null model.
    """
    spec = instance.spec if isinstance(instance, HardInstance) else instance
    if not isinstance(spec, HardInstanceSpec):
        raise UnsupportedStructure("closed_form_values needs a hard-family instance")
    eps = spec.epsilon
    if spec.is_null:
        return (1 + eps) / 4, 0.25
    return (1 + 2 * eps) / 4, (1 + eps) / 4


def build(spec: HardInstanceSpec) -> HardInstance:
    trans, emis, rew, init = _build_arrays(spec)
    mask = _reachability(trans, init)
    emis[~mask] = 0.0
    trans[~mask[:-1]] = 0.0
    lay = spec.layout
    pomdp = TabularPOMDP(
        transitions=trans,
        emissions=emis,
        rewards=rew,
        initial=init,
        mask=mask,
        state_labels=lay.state_labels(),
        obs_labels=lay.obs_labels(),
        action_labels=lay.action_labels(),
    )
    pub = spec.public()
    v_opt, v_base = closed_form_values(spec)
    c_s, c_o = claimed_counts(pub)
    n_theta = theta_count(pub)
    mu_count = 2 ** (spec.L * spec.K if spec.family == PAC else spec.K)
    meta = InstanceMetadata(
        family=spec.family,
        optimal_value=v_opt,
        baseline_value=v_base,
        optimal_policy=optimal_policy(spec),
        n_states=pomdp.S,
        n_obs=pomdp.O,
        n_actions=pomdp.A,
        claimed_n_states=c_s,
        claimed_n_obs=c_o,
        log_cardinality=math.log(n_theta * mu_count + 1),
        log_cardinality_bound=log_cardinality_bound(pub),
    )
    return HardInstance(spec, pomdp, meta)


def _check_family(spec: HardInstanceSpec, family: str) -> None:
    if spec.family != family:
        raise ParameterError(f"expected family {family!r}, got {spec.family!r}")


def build_single_step(spec: HardInstanceSpec) -> tuple[TabularPOMDP, InstanceMetadata]:
    _check_family(spec, SINGLE)
    inst = build(spec)
    return inst.pomdp, inst.metadata


def build_multistep_regret(spec: HardInstanceSpec) -> tuple[TabularPOMDP, InstanceMetadata]:
    _check_family(spec, REGRET)
    inst = build(spec)
    return inst.pomdp, inst.metadata


def build_multistep_pac(spec: HardInstanceSpec) -> tuple[TabularPOMDP, InstanceMetadata]:
    _check_family(spec, PAC)
    inst = build(spec)
    return inst.pomdp, inst.metadata


def iter_thetas(pub: PublicParams) -> Iterator[Theta]:
    """All admissible hidden parameters in lexicographic order."""
    lay = pub.layout
    revs: Sequence[int | None] = lay.a_rev_set if pub.family == REGRET else (None,)
    for hs in valid_h_stars(pub):
        choices = [lay.allowed_password(step) for step in range(hs + 1, pub.H)]
        for leaf in range(lay.n_leaves):
            for a in range(1, pub.A):
                for ar in revs:
                    for pw in itertools.product(*choices):
                        yield Theta(hs, leaf, a, pw, ar)


def iter_mus(pub: PublicParams) -> Iterator[tuple]:
    shape = (pub.L, pub.K) if pub.family == PAC else (pub.K,)
    for signs in itertools.product((-1, 1), repeat=int(np.prod(shape))):
        yield _as_tuple(np.array(signs).reshape(shape))


def enumerate_family(
    template: HardInstanceSpec,
    include_mu: bool = False,
    cap: int = 10**6,
) -> Iterator[HardInstanceSpec]:
    """The null model first, then every theta (and every mu when ``include_mu``).

    Without ``include_mu`` the template's ``mu`` is kept for every member.
    """
    pub = template.public()
    count = theta_count(pub)
    mus = list(iter_mus(pub)) if include_mu else [template.mu]
    if count * len(mus) + 1 > cap:
        raise EnumerationTooLarge(f"family has {count * len(mus) + 1} members, cap is {cap}")
    yield template.with_theta(None)
    for mu in mus:
        base = template.with_mu(mu)
        for th in iter_thetas(pub):
            yield base.with_theta(th)


def random_theta(pub: PublicParams, rng: np.random.Generator) -> Theta:
    """Uniform draw of entry step, leaf, actions and an admissible password."""
    lay = pub.layout
    hs = int(rng.choice(valid_h_stars(pub)))
    leaf = int(rng.integers(lay.n_leaves))
    a = int(rng.integers(1, pub.A))
    ar = int(rng.choice(lay.a_rev_set)) if pub.family == REGRET else None
    pw = tuple(int(rng.choice(lay.allowed_password(step))) for step in range(hs + 1, pub.H))
    return Theta(hs, leaf, a, pw, ar)


def staying_event(instance: HardInstance):
    """Predicate for ``o_H = s_0`` on a trajectory."""
    root = instance.layout.root

    def pred(traj) -> bool:
        return traj.obs[-1] == root

    return pred


def reveal_event(instance: HardInstance):
    """Predicate: some step in the reveal set has a lock observation and a reveal action."""
    lay = instance.layout
    if lay.family != REGRET:
        raise UnsupportedStructure("reveal event is defined for the regret family")

    def pred(traj) -> bool:
        return any(traj.obs[s - 1] == lay.lock and lay.is_reveal(s, traj.acts[s - 1]) for s in lay.hset)

    return pred
