"""Learners that interact with a hidden environment: a collision uniformity
tester, the brute-force lock learner, OMLE over a finite class, and baselines.

Learners see only ``PublicParams`` and what an ``EnvironmentHandle`` returns;
hidden parameters and latent states stay behind the handle.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BudgetError, PreconditionError, UnsupportedStructure
from .instances import (
    PAC,
    REGRET,
    HardInstance,
    HardInstanceSpec,
    PublicParams,
    Theta,
    WAIT,
    build,
    closed_form_values,
    enumerate_family,
    optimal_actions,
)
from .pomdp import (
    ActionSequencePolicy,
    Policy,
    TabularPOMDP,
    Trajectory,
    UniformPolicy,
    open_loop_paths,
    policy_value,
    sample_open_loop,
    sample_trajectory,
)

DEFAULT_C_TEST = 8.0
DEFAULT_C_BETA = 4.0

# Event predicates map (obs, acts), both (n, H) integer arrays, to a bool vector.
EventFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


# Environment boundary


class EnvironmentHandle:
    """Simulator wrapper that hides parameters and latent states from learners.

    ``optimal_value`` and ``audit_*`` exist for reporting only; learners in this
    module never call them to make decisions.
    """

    def __init__(
        self,
        pomdp: TabularPOMDP,
        seed: int | None = None,
        *,
        optimal_value: float | None = None,
        events: dict[str, EventFn] | None = None,
        trace_latent: bool = False,
        per_call_streams: bool = False,
    ) -> None:
        self._pomdp = pomdp
        self._seed = seed
        self._rng = np.random.default_rng(seed)
        self._per_call = per_call_streams
        self._calls = 0
        self._episodes = 0
        self._vstar = optimal_value
        self._events = dict(events or {})
        self._counts = {k: 0 for k in self._events}
        self._trace = trace_latent
        self._latent: list[np.ndarray] = []
        self._value_cache: dict = {}
        self._paths: dict = {}
        self.rewards = np.array(pomdp.rewards)
        self.rewards.setflags(write=False)

    @classmethod
    def from_instance(
        cls,
        inst: HardInstance,
        seed: int | None = None,
        trace_latent: bool = False,
        per_call_streams: bool = False,
    ) -> "EnvironmentHandle":
        return cls(
            inst.pomdp,
            seed,
            optimal_value=inst.metadata.optimal_value,
            events=instance_events(inst.spec),
            trace_latent=trace_latent,
            per_call_streams=per_call_streams,
        )

    def _stream(self) -> np.random.Generator:
        """Shared generator, or with ``per_call_streams`` a fresh one per batch call
        so a batch's draws do not depend on earlier batch sizes."""
        self._calls += 1
        if self._per_call:
            return np.random.default_rng([0 if self._seed is None else self._seed, self._calls])
        return self._rng

    @property
    def H(self) -> int:
        return self._pomdp.H

    @property
    def n_obs(self) -> int:
        return self._pomdp.O

    @property
    def n_actions(self) -> int:
        return self._pomdp.A

    @property
    def obs_labels(self) -> tuple[str, ...]:
        return self._pomdp.obs_labels

    @property
    def episodes(self) -> int:
        return self._episodes

    @property
    def event_counts(self) -> dict[str, int]:
        return dict(self._counts)

    @property
    def latent_log(self) -> list[np.ndarray]:
        return list(self._latent)

    def _record(self, obs: np.ndarray, acts: np.ndarray, states: np.ndarray | None) -> None:
        self._episodes += obs.shape[0]
        for k, fn in self._events.items():
            self._counts[k] += int(np.count_nonzero(fn(obs, acts)))
        if self._trace and states is not None:
            self._latent.append(states)

    def rollout(self, policy: Policy) -> Trajectory:
        tr = sample_trajectory(self._pomdp, policy, self._stream(), trace=True)
        self._record(np.array([tr.obs]), np.array([tr.acts]), np.array([tr.states]))
        return tr.without_latent()

    def rollout_batch(self, actions: Sequence[int], n: int) -> np.ndarray:
        """``n`` episodes of an open-loop action sequence; returns observations (n, H)."""
        return self.rollout_prefix(actions, n, lambda obs: obs.shape[0])

    def rollout_prefix(
        self, actions: Sequence[int], n_max: int, stop: Callable[[np.ndarray], int]
    ) -> np.ndarray:
        """Draw up to ``n_max`` episodes and keep the first ``stop(obs)`` of them.

        ``stop`` must decide episode ``i`` from episodes ``<= i`` only; under
        that contract the discarded i.i.d. draws are never observed, so only
        the kept episodes are counted.
        """
        acts = np.asarray(actions, dtype=np.int64)
        if acts.shape != (self.H,):
            raise PreconditionError("action sequence must have length H")
        if n_max <= 0:
            return np.empty((0, self.H), dtype=np.int64)
        key = tuple(int(a) for a in acts)
        if key not in self._paths:
            self._paths[key] = open_loop_paths(self._pomdp, key)
        obs, states = sample_open_loop(self._pomdp, acts, n_max, self._stream(), self._paths[key])
        k = int(stop(obs))
        if not 1 <= k <= n_max:
            raise PreconditionError("stop rule must keep between 1 and n_max episodes")
        obs, states = obs[:k], states[:k]
        self._record(obs, np.broadcast_to(acts, obs.shape), states)
        return obs

    # reporting only

    @property
    def can_audit(self) -> bool:
        return self._vstar is not None

    def audit_value(self, policy: Policy) -> float:
        key = ("seq", policy.actions) if isinstance(policy, ActionSequencePolicy) else ("id", id(policy))
        if key not in self._value_cache:
            self._value_cache[key] = (policy, policy_value(self._pomdp, policy))
        return self._value_cache[key][1]

    def audit_regret(self, policy: Policy) -> float:
        if self._vstar is None:
            raise PreconditionError("environment has no optimal value for regret audits")
        return max(self._vstar - self.audit_value(policy), 0.0)


def instance_events(spec: HardInstanceSpec) -> dict[str, EventFn]:
    """Vectorized event predicates for a hard instance (reporting only)."""
    lay = spec.layout
    H = spec.H
    ev: dict[str, EventFn] = {}

    def good(obs, acts):
        return obs[:, H - 1] == lay.good

    ev["good"] = good
    if spec.family in (REGRET, PAC):
        locks = [lay.lock] if spec.family == REGRET else [lay.lock_j(j) for j in range(spec.L)]
        steps = [s for s in lay.hset]

        def reveal(obs, acts):
            hit = np.zeros(obs.shape[0], dtype=bool)
            for s in steps:
                rev = np.array([lay.is_reveal(s, a) for a in range(spec.A)])
                hit |= np.isin(obs[:, s - 1], locks) & rev[acts[:, s - 1]]
            return hit

        ev["reveal"] = reveal
    th = spec.theta
    if th is not None:
        want = np.array(optimal_actions(spec))
        leaf = lay.leaf_state(th.s_star)

        def correct(obs, acts):
            ok = obs[:, th.h_star - 1] == leaf
            return ok & np.all(acts[:, th.h_star - 1 : H - 1] == want[th.h_star - 1 : H - 1], axis=1)

        ev["correct"] = correct
    return ev


# Reports


@dataclass
class LearnerReport:
    """Outcome of one learner run; the regret trace is stored as run-length segments."""

    algorithm: str
    episodes: int
    policy: Policy
    verdict: str | None = None
    theta_hat: Theta | None = None
    regret_segments: list[tuple[int, float]] = field(default_factory=list)
    event_counts: dict[str, int] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def add_regret(self, count: int, value: float) -> None:
        if count <= 0:
            return
        if self.regret_segments and self.regret_segments[-1][1] == value:
            c, v = self.regret_segments[-1]
            self.regret_segments[-1] = (c + count, v)
        else:
            self.regret_segments.append((count, value))

    def regret_trace(self) -> np.ndarray:
        if not self.regret_segments:
            return np.zeros(0)
        return np.concatenate([np.full(c, v) for c, v in self.regret_segments])

    def cumulative_regret(self, T: int | None = None) -> float:
        tot, seen = [], 0
        for c, v in self.regret_segments:
            take = c if T is None else min(c, T - seen)
            if take <= 0:
                break
            tot.append(take * v)
            seen += take
        return math.fsum(tot)

    def cumulative_curve(self, points: Sequence[int]) -> np.ndarray:
        return np.array([self.cumulative_regret(int(t)) for t in points])

    def regret_rows(self):
        """Rows ``(episode, instantaneous, cumulative)`` with 1-based episodes."""
        cum = 0.0
        t = 0
        for c, v in self.regret_segments:
            for _ in range(c):
                t += 1
                cum += v
                yield t, v, cum

    def to_dict(self) -> dict:
        pol = self.policy
        return {
            "algorithm": self.algorithm,
            "episodes": self.episodes,
            "policy": list(pol.actions) if isinstance(pol, ActionSequencePolicy) else type(pol).__name__,
            "verdict": self.verdict,
            "theta_hat": None if self.theta_hat is None else self.theta_hat.to_dict(),
            "cumulative_regret": self.cumulative_regret(),
            "regret_segments": [[c, v] for c, v in self.regret_segments],
            "event_counts": dict(self.event_counts),
            "extras": self.extras,
        }


# Uniformity testing


def collision_statistic(samples, domain_size: int) -> float:
    """Fraction of colliding pairs among the samples."""
    x = np.asarray(samples, dtype=np.int64)
    n = x.shape[0]
    if n < 2:
        raise BudgetError("need at least two samples")
    counts = np.bincount(x, minlength=domain_size).astype(float)
    return float((counts * (counts - 1)).sum() / (n * (n - 1)))


def collision_threshold(domain_size: int, far_tv: float) -> float:
    """Midpoint between ``1/D`` and the least collision rate ``(1 + 4 tv^2)/D`` of a far law."""
    return (1.0 + 2.0 * far_tv**2) / domain_size


def batch_budget(domain_size: int, far_tv: float, c: float = DEFAULT_C_TEST) -> int:
    return int(math.ceil(c * math.sqrt(domain_size) / far_tv**2))


def n_batches(confidence: float) -> int:
    """Odd batch count so that a median of 1/3-error tests errs with probability <= ``confidence``."""
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    if confidence >= 1 / 3:
        return 1
    b = int(math.ceil(18 * math.log(1 / confidence)))
    return b if b % 2 else b + 1


@dataclass(frozen=True)
class TesterResult:
    verdict: str  # "uniform" or "far"
    statistics: tuple[float, ...]
    threshold: float
    batch_size: int

    @property
    def far(self) -> bool:
        return self.verdict == "far"


def collision_uniformity_test(
    samples,
    domain_size: int,
    far_tv: float,
    confidence: float = 1 / 3,
    c: float = DEFAULT_C_TEST,
) -> TesterResult:
    """Collision test with median-of-batches amplification.

    Each batch uses ``ceil(c sqrt(D) / far_tv^2)`` samples; ``confidence`` is
    the target error probability.
    """
    if not 0 < far_tv < 1:
        raise ValueError("far_tv must lie in (0, 1)")
    x = np.asarray(samples, dtype=np.int64)
    if x.size and (x.min() < 0 or x.max() >= domain_size):
        raise ValueError("samples must lie in range(domain_size)")
    size = batch_budget(domain_size, far_tv, c)
    b = n_batches(confidence)
    if x.shape[0] < size * b:
        raise BudgetError(f"need {size * b} samples ({b} batches of {size}), got {x.shape[0]}")
    thr = collision_threshold(domain_size, far_tv)
    stats = tuple(collision_statistic(x[i * size : (i + 1) * size], domain_size) for i in range(b))
    verdict = "far" if float(np.median(stats)) > thr else "uniform"
    return TesterResult(verdict, stats, thr, size)


# Likelihoods


def log_likelihood(model: TabularPOMDP, traj: Trajectory) -> float:
    """``sum_h log P(o_h | tau_{h-1})``; ``-inf`` when an observation has probability zero."""
    alpha = np.asarray(model.initial, dtype=float)
    total = []
    for h, o in enumerate(traj.obs):
        alpha = alpha * model.emissions[h][:, o]
        z = alpha.sum()
        if z <= 0:
            return -math.inf
        total.append(math.log(z))
        alpha = alpha / z
        if h < model.H - 1:
            alpha = alpha @ model.transitions[h][:, traj.acts[h], :]
    return math.fsum(total)


def batch_log_likelihood(model: TabularPOMDP, obs: np.ndarray, actions: Sequence[int]) -> np.ndarray:
    """Vectorized ``log_likelihood`` for open-loop episodes ``obs`` of shape (n, H)."""
    n, H = obs.shape
    alpha = np.broadcast_to(np.asarray(model.initial, dtype=float), (n, model.S)).copy()
    ll = np.zeros(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        for h in range(H):
            alpha *= model.emissions[h][:, obs[:, h]].T
            z = alpha.sum(axis=1)
            ll += np.log(z)
            alpha = np.where(z[:, None] > 0, alpha / np.where(z > 0, z, 1.0)[:, None], 0.0)
            if h < H - 1:
                alpha = alpha @ model.transitions[h][:, actions[h], :]
    ll[np.isnan(ll)] = -np.inf
    return ll


# Brute-force learner


@dataclass(frozen=True)
class Cell:
    """Stage-1 hypothesis ``(h, leaf, a, a-seq, reveal action)``."""

    h: int
    leaf: int
    a: int
    aseq: tuple[int, ...]
    r: int


@dataclass(frozen=True)
class BruteForcePlan:
    cells: tuple[Cell, ...]
    late: tuple[tuple[int, int, int, tuple[int, ...]], ...]
    stage2_blocks: int
    tail_candidates: int
    n_tests: int
    cell_budget: int
    tail_budget: int
    far_tv: float
    domain_size: int

    @property
    def planned_episodes(self) -> int:
        return (len(self.cells) + self.stage2_blocks) * self.cell_budget + (
            self.tail_candidates + len(self.late)
        ) * self.tail_budget


def _reveal_actions(pub: PublicParams) -> tuple[int, ...]:
    return pub.layout.a_rev_set if pub.family == REGRET else (0,)


def _stage2_sizes(pub: PublicParams) -> tuple[int, int]:
    """Worst-case stage-2 candidate count and tail candidate count over ``h*``."""
    lay = pub.layout
    worst2 = worst_tail = 0
    for hs in lay.hset:
        if hs + pub.m > pub.H - 1:
            continue
        h, blocks = hs + pub.m, 0
        while h + pub.m <= pub.H - 1:
            c = math.prod(len(lay.allowed_password(s)) for s in range(h, h + pub.m))
            blocks += c if c > 1 else 0
            h += pub.m
        tail = math.prod(len(lay.allowed_password(s)) for s in range(h, pub.H))
        worst2 = max(worst2, blocks)
        worst_tail = max(worst_tail, tail if tail > 1 else 0)
    return worst2, worst_tail


def bruteforce_plan(
    pub: PublicParams,
    confidence: float,
    accuracy: float | None = None,
    c: float = DEFAULT_C_TEST,
    cell_budget: int | None = None,
    tail_budget: int | None = None,
) -> BruteForcePlan:
    if pub.family not in (PAC, REGRET):
        raise UnsupportedStructure(f"brute-force learner supports {PAC!r} and {REGRET!r}")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    lay = pub.layout
    eps = pub.epsilon if accuracy is None else accuracy
    cells = []
    late = []
    for h in lay.hset:
        for leaf in range(lay.n_leaves):
            for a in range(1, pub.A):
                if h + pub.m <= pub.H - 1:
                    for aseq in itertools.product(range(pub.A), repeat=pub.m - 1):
                        for r in _reveal_actions(pub):
                            cells.append(Cell(h, leaf, a, tuple(aseq), r))
                else:
                    choices = [lay.allowed_password(s) for s in range(h + 1, pub.H)]
                    for pw in itertools.product(*choices):
                        late.append((h, leaf, a, tuple(pw)))
    s2, tail = _stage2_sizes(pub)
    n_tests = len(cells) + len(late) + s2 + tail
    log_term = math.log(max(n_tests, 1) / confidence)
    n1 = int(math.ceil(c * math.sqrt(pub.K * pub.L) / (pub.sigma**2 * eps**2) * log_term))
    nt = int(math.ceil(8 * log_term / eps**2))
    return BruteForcePlan(
        tuple(cells),
        tuple(late),
        s2,
        tail,
        n_tests,
        n1 if cell_budget is None else int(cell_budget),
        nt if tail_budget is None else int(tail_budget),
        pub.sigma * eps / 2,
        2 * pub.K * pub.L,
    )


def _prefix(pub: PublicParams, leaf: int, h: int) -> list[int]:
    lay = pub.layout
    acts = list(lay.route(leaf))
    return acts + [WAIT] * (h - 1 - len(acts))


def _pad(pub: PublicParams, acts: list[int]) -> tuple[int, ...]:
    return tuple(acts + [WAIT] * (pub.H - len(acts)))


def _symbols(pub: PublicParams, obs: np.ndarray, step: int) -> np.ndarray:
    """Joint symbol of ``(o_step, o_{step+1})`` over lock blocks times lock emissions."""
    lay = pub.layout
    blk = np.full(lay.n_obs, -1, dtype=np.int64)
    if pub.family == PAC:
        for j in range(pub.L):
            blk[lay.lock_j(j)] = j
    else:
        blk[lay.lock] = 0
    pm = np.full(lay.n_obs, -1, dtype=np.int64)
    pm[lay.o_block] = np.arange(2 * pub.K)
    b, i = blk[obs[:, step - 1]], pm[obs[:, step]]
    if np.any(b < 0) or np.any(i < 0):
        raise PreconditionError("reveal probe did not land on a lock observation")
    return b * 2 * pub.K + i


class _Runner:
    def __init__(self, pub: PublicParams, env: EnvironmentHandle, report: LearnerReport, audit: bool):
        self.pub, self.env, self.report, self.audit = pub, env, report, audit

    def play(self, acts: tuple[int, ...], n: int) -> np.ndarray:
        obs = self.env.rollout_batch(acts, n)
        if self.audit:
            self.report.add_regret(n, self.env.audit_regret(ActionSequencePolicy(acts, self.pub.A)))
        return obs

    def reveal_stat(self, acts: tuple[int, ...], step: int, plan: BruteForcePlan) -> float:
        obs = self.play(acts, plan.cell_budget)
        return collision_statistic(_symbols(self.pub, obs, step), plan.domain_size)

    def good_rate(self, acts: tuple[int, ...], n: int) -> float:
        obs = self.play(acts, n)
        return float(np.mean(obs[:, self.pub.H - 1] == self.pub.layout.good))


def bruteforce_learn(
    pub: PublicParams,
    env: EnvironmentHandle,
    confidence: float = 0.25,
    accuracy: float | None = None,
    c: float = DEFAULT_C_TEST,
    cell_budget: int | None = None,
    tail_budget: int | None = None,
    max_episodes: int | None = None,
    audit_regret: bool = False,
) -> LearnerReport:
    """Identify ``theta`` (or the null model) by reveal probes and uniformity tests.

    Stage 1 probes every ``(h, leaf, a, a-seq)`` cell with a reveal right after
    the window and tests the joint law of the lock block and the revealed
    emission for uniformity. Stage 2 extends the password ``m`` actions at a
    time by the same probes; password steps too late for a reveal are picked by
    the empirical rate of the ``good`` observation.
    """
    plan = bruteforce_plan(pub, confidence, accuracy, c, cell_budget, tail_budget)
    if max_episodes is not None and plan.planned_episodes > max_episodes:
        f = max_episodes / plan.planned_episodes
        plan = BruteForcePlan(
            plan.cells,
            plan.late,
            plan.stage2_blocks,
            plan.tail_candidates,
            plan.n_tests,
            int(plan.cell_budget * f),
            int(plan.tail_budget * f),
            plan.far_tv,
            plan.domain_size,
        )
    if plan.cell_budget < 2 or plan.tail_budget < 1:
        raise BudgetError("episode budget too small for one probe per test")
    start = env.episodes
    lay = pub.layout
    report = LearnerReport("bruteforce", 0, ActionSequencePolicy((WAIT,) * pub.H, pub.A))
    run = _Runner(pub, env, report, audit_regret)
    thr = collision_threshold(plan.domain_size, plan.far_tv)

    best: tuple[float, Cell] | None = None
    stats1 = []
    for cell in plan.cells:
        acts = _prefix(pub, cell.leaf, cell.h) + [cell.a, *cell.aseq, cell.r]
        stat = run.reveal_stat(_pad(pub, acts), cell.h + pub.m, plan)
        stats1.append(stat)
        if stat > thr and (best is None or stat > best[0]):
            best = (stat, cell)

    theta: Theta | None = None
    if best is not None:
        cell = best[1]
        pw = list(cell.aseq)
        h = cell.h + pub.m
        base = _prefix(pub, cell.leaf, cell.h) + [cell.a]
        while h + pub.m <= pub.H - 1:
            cands = list(itertools.product(*(lay.allowed_password(s) for s in range(h, h + pub.m))))
            if len(cands) > 1:
                scores = [run.reveal_stat(_pad(pub, base + pw + list(x) + [cell.r]), h + pub.m, plan) for x in cands]
                pw += list(cands[int(np.argmax(scores))])
            else:
                pw += list(cands[0])
            h += pub.m
        cands = list(itertools.product(*(lay.allowed_password(s) for s in range(h, pub.H))))
        if len(cands) > 1:
            rates = [run.good_rate(_pad(pub, base + pw + list(x)), plan.tail_budget) for x in cands]
            pw += list(cands[int(np.argmax(rates))])
        else:
            pw += list(cands[0])
        theta = Theta(cell.h, cell.leaf, cell.a, tuple(pw), cell.r if pub.family == REGRET else None)
    elif plan.late:
        cut = 0.25 + (pub.epsilon if accuracy is None else accuracy) / 4
        rates = []
        for h, leaf, a, pw in plan.late:
            rates.append(run.good_rate(_pad(pub, _prefix(pub, leaf, h) + [a, *pw]), plan.tail_budget))
        i = int(np.argmax(rates))
        if rates[i] > cut:
            h, leaf, a, pw = plan.late[i]
            # the reveal action cannot be learned when no reveal step follows h*
            theta = Theta(h, leaf, a, pw, 0 if pub.family == REGRET else None)

    if theta is None:
        acts = (WAIT,) * pub.H
        report.verdict = "null"
    else:
        acts = _pad(pub, _prefix(pub, theta.s_star, theta.h_star) + [theta.a_star, *theta.password])
        report.verdict = "theta"
    report.policy = ActionSequencePolicy(acts, pub.A)
    report.theta_hat = theta
    report.episodes = env.episodes - start
    report.event_counts = env.event_counts
    report.extras = {
        "cell_budget": plan.cell_budget,
        "tail_budget": plan.tail_budget,
        "n_tests": plan.n_tests,
        "n_cells": len(plan.cells),
        "planned_episodes": plan.planned_episodes,
        "threshold": thr,
        "max_stage1_stat": max(stats1) if stats1 else None,
    }
    return report


def episode_bound(pub: PublicParams, cell_budget: int) -> int:
    """``10 (leaves H A A^{m-1} + A^m H) N_1`` with a constant-factor slack."""
    lay = pub.layout
    return 10 * (lay.n_leaves * pub.H * pub.A * pub.A ** (pub.m - 1) + pub.A**pub.m * pub.H) * cell_budget


# OMLE


@dataclass(frozen=True)
class OMLEModel:
    pomdp: TabularPOMDP
    policy: Policy
    value: float
    label: str = ""


def omle_class_from_family(template: HardInstanceSpec, cap: int = 10**4) -> list[OMLEModel]:
    """Every ``theta`` of the template's family with its ``mu``, plus the null model."""
    out = []
    for spec in enumerate_family(template, include_mu=False, cap=cap):
        inst = build(spec)
        label = "null" if spec.theta is None else str(spec.theta.to_dict())
        out.append(OMLEModel(inst.pomdp, inst.metadata.optimal_policy, closed_form_values(spec)[0], label))
    return out


@dataclass
class ConfidenceSet:
    """Models whose cumulative log-likelihood is within ``beta`` of the best."""

    loglik: np.ndarray
    beta: float

    @property
    def active(self) -> np.ndarray:
        top = self.loglik.max()
        return self.loglik >= top - self.beta

    def contains(self, i: int) -> bool:
        return bool(self.active[i])


def _choice(cum: np.ndarray, beta: float, values: np.ndarray) -> np.ndarray:
    """Optimistic pick per row of cumulative log-likelihoods; ties go to the lowest index."""
    top = cum.max(axis=1, keepdims=True)
    score = np.where(cum >= top - beta, values[None, :], -np.inf)
    return np.argmax(score, axis=1)


def omle(
    models: Sequence[OMLEModel],
    env: EnvironmentHandle,
    T: int,
    beta: float | None = None,
    delta: float = 0.1,
    C: float = DEFAULT_C_BETA,
    audit_index: int | None = None,
    min_chunk: int = 64,
    max_chunk: int = 4096,
) -> LearnerReport:
    """Optimistic MLE over a finite class, playing each model's own optimal policy.

    Open-loop policies are rolled out in batches that stop at the first episode
    after which the optimistic pick would change. ``audit_index`` marks the true
    model for the survival flags in the report; it is not used for decisions.
    """
    if not models:
        raise PreconditionError("model class is empty")
    M = len(models)
    beta = C * math.log(M / delta) if beta is None else beta
    values = np.array([m.value for m in models])
    cs = ConfidenceSet(np.zeros(M), beta)
    report = LearnerReport("omle", 0, models[0].policy)
    survived: list[tuple[int, bool]] = []
    start = env.episodes
    chunk = min_chunk
    t = 0
    picks: list[tuple[int, int]] = []
    while t < T:
        k = int(_choice(cs.loglik[None, :], beta, values)[0])
        pol = models[k].policy
        if isinstance(pol, ActionSequencePolicy):
            acts = pol.actions
            box: dict = {}

            def stop(obs, acts=acts, box=box, k=k):
                ll = np.stack([batch_log_likelihood(m.pomdp, obs, acts) for m in models], axis=1)
                cum = cs.loglik[None, :] + np.cumsum(ll, axis=0)
                ch = _choice(cum, beta, values)
                moved = np.flatnonzero(ch != k)
                keep = int(moved[0]) + 1 if moved.size else obs.shape[0]
                box["cum"] = cum[:keep]
                return keep

            env.rollout_prefix(acts, min(chunk, T - t), stop)
            cum = box["cum"]
            n = cum.shape[0]
            chunk = min(chunk * 2, max_chunk) if n == min(chunk, T - t) else min_chunk
        else:
            tr = env.rollout(pol)
            ll = np.array([log_likelihood(m.pomdp, tr) for m in models])
            cum = (cs.loglik + ll)[None, :]
            n = 1
        if audit_index is not None:
            top = cum.max(axis=1)
            alive = cum[:, audit_index] >= top - beta
            for flag in alive:
                if survived and survived[-1][1] == bool(flag):
                    survived[-1] = (survived[-1][0] + 1, bool(flag))
                else:
                    survived.append((1, bool(flag)))
        cs.loglik = cum[-1].copy()
        if env.can_audit:
            report.add_regret(n, env.audit_regret(pol))
        if picks and picks[-1][0] == k:
            picks[-1] = (k, picks[-1][1] + n)
        else:
            picks.append((k, n))
        t += n
    final = int(_choice(cs.loglik[None, :], beta, values)[0])
    report.policy = models[final].policy
    report.episodes = env.episodes - start
    report.event_counts = env.event_counts
    report.extras = {
        "beta": beta,
        "final_model": final,
        "active": np.flatnonzero(cs.active).tolist(),
        "picks": [[k, n] for k, n in picks],
    }
    if audit_index is not None:
        report.extras["survival_segments"] = [[c, f] for c, f in survived]
        report.extras["true_model_survived"] = all(f for _, f in survived)
    return report


# Baselines


def explore_then_exploit(
    pub: PublicParams,
    env: EnvironmentHandle,
    T: int,
    split: float,
    confidence: float = 0.25,
    c: float = DEFAULT_C_TEST,
) -> LearnerReport:
    """Brute-force learning on the first ``ceil(split T)`` episodes, then commit."""
    if not 0 < split < 1:
        raise ValueError("split must lie in (0, 1)")
    budget = int(math.ceil(split * T))
    try:
        rep = bruteforce_learn(pub, env, confidence, c=c, max_episodes=budget, audit_regret=True)
    except BudgetError:
        rep = LearnerReport("bruteforce", 0, ActionSequencePolicy((WAIT,) * pub.H, pub.A), verdict="null")
    used = rep.episodes
    rest = T - used
    if rest > 0:
        env.rollout_batch(rep.policy.actions, rest)
        rep.add_regret(rest, env.audit_regret(rep.policy))
    rep.algorithm = "explore-then-exploit"
    rep.episodes = used + max(rest, 0)
    rep.event_counts = env.event_counts
    rep.extras["explore_episodes"] = used
    return rep


def always_explore(pub: PublicParams, env: EnvironmentHandle, T: int) -> LearnerReport:
    """Cycle through the stage-1 reveal probes for all ``T`` episodes."""
    plan = bruteforce_plan(pub, 0.5, cell_budget=1, tail_budget=1)
    if not plan.cells:
        raise UnsupportedStructure("family has no reveal probes")
    report = LearnerReport("always-explore", 0, ActionSequencePolicy((WAIT,) * pub.H, pub.A))
    per = max(1, T // len(plan.cells))
    t = 0
    for cell in itertools.cycle(plan.cells):
        if t >= T:
            break
        acts = _pad(pub, _prefix(pub, cell.leaf, cell.h) + [cell.a, *cell.aseq, cell.r])
        n = min(per, T - t)
        env.rollout_batch(acts, n)
        report.add_regret(n, env.audit_regret(ActionSequencePolicy(acts, pub.A)))
        t += n
    report.episodes = T
    report.event_counts = env.event_counts
    return report


def uniform_baseline(env: EnvironmentHandle, T: int) -> LearnerReport:
    """Uniformly random actions every episode."""
    pol = UniformPolicy(env.n_actions)
    for _ in range(T):
        env.rollout(pol)
    report = LearnerReport("uniform", T, pol)
    report.add_regret(T, env.audit_regret(pol))
    report.event_counts = env.event_counts
    return report


def oracle_exploit(pub: PublicParams, env: EnvironmentHandle, T: int, theta: Theta | None, explore_episodes: int = 0):
    """Commit to a given ``theta`` after a fixed number of probe episodes."""
    report = LearnerReport("oracle", 0, ActionSequencePolicy((WAIT,) * pub.H, pub.A), theta_hat=theta)
    if explore_episodes:
        report = always_explore(pub, env, explore_episodes)
    if theta is None:
        acts = (WAIT,) * pub.H
    else:
        acts = _pad(pub, _prefix(pub, theta.s_star, theta.h_star) + [theta.a_star, *theta.password])
    pol = ActionSequencePolicy(acts, pub.A)
    rest = T - explore_episodes
    if rest > 0:
        env.rollout_batch(acts, rest)
        report.add_regret(rest, env.audit_regret(pol))
    report.algorithm = "oracle"
    report.policy = pol
    report.theta_hat = theta
    report.episodes = T
    report.event_counts = env.event_counts
    return report
