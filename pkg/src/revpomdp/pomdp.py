"""Finite-horizon tabular POMDPs: representation, simulation, enumeration, evaluation.

Steps are 0-based in code: step ``h`` in ``range(H)`` emits ``o_h`` from ``s_h``,
the agent picks ``a_h`` and collects ``r_h(o_h, a_h)``, then (for ``h < H-1``)
the state moves according to ``transitions[h]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import InitVar, dataclass, field
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConstructionInconsistency, EnumerationTooLarge, ShapeError

ROW_TOL = 1e-12
DEFAULT_CAP = 10**6
PATH_CAP = 1 << 16
TIE_BREAK = "lexicographic-smallest-action"
FORMAT_NAME = "revpomdp.tabular"
FORMAT_VERSION = 1


def _frozen(x: Any, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_rows(rows: np.ndarray, live: np.ndarray, what: str) -> None:
    """Rows selected by ``live`` must be distributions; others must be zero."""
    if np.any(rows < 0):
        raise ValueError(f"{what}: negative entries")
    sums = rows.sum(axis=-1)
    bad = live & (np.abs(sums - 1.0) > ROW_TOL)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"{what}: row {idx} sums to {sums[idx]!r}")
    dead = ~live & (sums != 0.0)
    if np.any(dead):
        idx = tuple(int(i) for i in np.argwhere(dead)[0])
        raise ValueError(f"{what}: masked row {idx} must be zero-filled")


@dataclass(frozen=True, eq=False)
class TabularPOMDP:
    """Immutable finite-horizon POMDP with an explicit reachability mask.

    Shapes: ``transitions`` (H-1, S, A, S), ``emissions`` (H, S, O),
    ``rewards`` (H, O, A), ``initial`` (S,), ``mask`` (H, S) boolean.
    ``mask[h, s]`` is False for states that no policy can reach at step ``h``;
    their rows are zero-filled and reading them raises
    :class:`ConstructionInconsistency`.
    """

    transitions: np.ndarray
    emissions: np.ndarray
    rewards: np.ndarray
    initial: np.ndarray
    mask: np.ndarray | None = None
    state_labels: tuple[str, ...] | None = None
    obs_labels: tuple[str, ...] | None = None
    action_labels: tuple[str, ...] | None = None
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool) -> None:
        emis = _frozen(self.emissions)
        if emis.ndim != 3:
            raise ShapeError("emissions must have shape (H, S, O)")
        H, S, O = emis.shape
        rew = _frozen(self.rewards)
        if rew.ndim != 3 or rew.shape[:2] != (H, O):
            raise ShapeError("rewards must have shape (H, O, A)")
        A = rew.shape[2]
        trans = _frozen(self.transitions)
        if trans.shape != (H - 1, S, A, S):
            raise ShapeError(f"transitions must have shape {(H - 1, S, A, S)}, got {trans.shape}")
        init = _frozen(self.initial)
        if init.shape != (S,):
            raise ShapeError("initial must have shape (S,)")
        mask = np.ones((H, S), dtype=bool) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != (H, S):
            raise ShapeError("mask must have shape (H, S)")
        mask.setflags(write=False)
        object.__setattr__(self, "emissions", emis)
        object.__setattr__(self, "rewards", rew)
        object.__setattr__(self, "transitions", trans)
        object.__setattr__(self, "initial", init)
        object.__setattr__(self, "mask", mask)
        for name, n in (("state_labels", S), ("obs_labels", O), ("action_labels", A)):
            labels = getattr(self, name)
            if labels is None:
                labels = tuple(str(i) for i in range(n))
            labels = tuple(str(x) for x in labels)
            if len(labels) != n:
                raise ShapeError(f"{name} must have {n} entries")
            object.__setattr__(self, name, labels)
        if validate:
            self._validate()

    def _validate(self) -> None:
        mask = self.mask
        if np.any(self.rewards < 0) or np.any(self.rewards > 1):
            raise ValueError("rewards must lie in [0, 1]")
        _check_rows(self.initial[None, :], np.array([True]), "initial")
        if np.any((self.initial > 0) & ~mask[0]):
            raise ValueError("initial distribution charges a masked state")
        _check_rows(self.emissions, mask, "emissions")
        for h in range(self.H - 1):
            live = np.repeat(mask[h][:, None], self.A, axis=1)
            _check_rows(self.transitions[h], live, f"transitions[{h}]")
            succ = self.transitions[h][mask[h]].reshape(-1, self.S).sum(axis=0) > 0
            if np.any(succ & ~mask[h + 1]):
                raise ValueError(f"mask does not cover states reachable at step {h + 1}")

    @property
    def H(self) -> int:
        return self.emissions.shape[0]

    @property
    def S(self) -> int:
        return self.emissions.shape[1]

    @property
    def O(self) -> int:  # noqa: E743
        return self.emissions.shape[2]

    @property
    def A(self) -> int:
        return self.rewards.shape[2]

    def emission_row(self, h: int, s: int) -> np.ndarray:
        if not self.mask[h, s]:
            raise ConstructionInconsistency(f"emission row of masked state {self.state_labels[s]!r} at step {h}")
        return self.emissions[h, s]

    def transition_row(self, h: int, s: int, a: int) -> np.ndarray:
        if not self.mask[h, s]:
            raise ConstructionInconsistency(f"transition row of masked state {self.state_labels[s]!r} at step {h}")
        return self.transitions[h, s, a]

    def reachable(self) -> np.ndarray:
        """Forward reachability under arbitrary actions, shape (H, S)."""
        reach = np.zeros((self.H, self.S), dtype=bool)
        reach[0] = self.initial > 0
        for h in range(self.H - 1):
            reach[h + 1] = self.transitions[h][reach[h]].reshape(-1, self.S).sum(axis=0) > 0
        return reach

    def max_realized_reward(self) -> float:
        """Largest total reward over all feasible (state, observation, action) paths."""
        W = np.zeros(self.S)
        for h in range(self.H - 1, -1, -1):
            newW = np.full(self.S, -np.inf)
            for s in np.flatnonzero(self.mask[h]):
                best = -np.inf
                for o in np.flatnonzero(self.emissions[h, s] > 0):
                    for a in range(self.A):
                        cont = 0.0
                        if h < self.H - 1:
                            nxt = self.transitions[h, s, a] > 0
                            cont = W[nxt].max()
                        best = max(best, self.rewards[h, o, a] + cont)
                newW[s] = best
            W = newW
        return float(W[self.initial > 0].max())

    # serialization

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "H": self.H,
            "S": self.S,
            "O": self.O,
            "A": self.A,
            "state_labels": list(self.state_labels),
            "obs_labels": list(self.obs_labels),
            "action_labels": list(self.action_labels),
            "initial": self.initial.tolist(),
            "transitions": self.transitions.tolist(),
            "emissions": self.emissions.tolist(),
            "rewards": self.rewards.tolist(),
            "mask": self.mask.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TabularPOMDP":
        if d.get("format") != FORMAT_NAME or d.get("version") != FORMAT_VERSION:
            raise ValueError("unsupported serialization format or version")
        H, S, A = d["H"], d["S"], d["A"]
        trans = np.array(d["transitions"], dtype=float).reshape(H - 1, S, A, S)
        return cls(
            transitions=trans,
            emissions=np.array(d["emissions"], dtype=float),
            rewards=np.array(d["rewards"], dtype=float),
            initial=np.array(d["initial"], dtype=float),
            mask=np.array(d["mask"], dtype=bool),
            state_labels=tuple(d["state_labels"]),
            obs_labels=tuple(d["obs_labels"]),
            action_labels=tuple(d["action_labels"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularPOMDP":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "TabularPOMDP":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# Policies


class Policy:
    """History-dependent action rule.

    ``probs(h, obs, acts)`` returns the action distribution at step ``h`` given
    ``obs = (o_0..o_h)`` and ``acts = (a_0..a_{h-1})``.
    """

    n_actions: int

    def probs(self, h: int, obs: Sequence[int], acts: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def reactive_probs(self, h: int, o: int) -> np.ndarray | None:
        """Distribution depending only on (h, o_h), or None if history matters."""
        return None

    def _onehot(self, a: int) -> np.ndarray:
        v = np.zeros(self.n_actions)
        v[a] = 1.0
        return v


@dataclass(frozen=True)
class ActionSequencePolicy(Policy):
    """Open-loop deterministic policy playing ``actions[h]`` at step ``h``."""

    actions: tuple[int, ...]
    n_actions: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        if any(a < 0 or a >= self.n_actions for a in self.actions):
            raise ValueError("action out of range")

    def probs(self, h, obs, acts):
        return self._onehot(self.actions[h])

    def reactive_probs(self, h, o):
        return self._onehot(self.actions[h])


@dataclass(frozen=True)
class ReactivePolicy(Policy):
    """Deterministic map (h, o_h) -> action with a default."""

    table: Mapping[tuple[int, int], int]
    n_actions: int
    default: int = 0

    def probs(self, h, obs, acts):
        return self._onehot(self.table.get((h, obs[-1]), self.default))

    def reactive_probs(self, h, o):
        return self._onehot(self.table.get((h, o), self.default))


@dataclass(frozen=True)
class HistoryPolicy(Policy):
    """Deterministic map (obs prefix, action prefix) -> action with a default."""

    table: Mapping[tuple[tuple[int, ...], tuple[int, ...]], int]
    n_actions: int
    default: int = 0
    tie_break: str = TIE_BREAK

    def probs(self, h, obs, acts):
        return self._onehot(self.table.get((tuple(obs), tuple(acts)), self.default))


@dataclass(frozen=True)
class UniformPolicy(Policy):
    n_actions: int

    def probs(self, h, obs, acts):
        return np.full(self.n_actions, 1.0 / self.n_actions)

    def reactive_probs(self, h, o):
        return self.probs(h, (o,), ())


@dataclass(frozen=True)
class RandomHistoryPolicy(Policy):
    """Seeded pseudo-random history policy, deterministic or stochastic.

    The action rule at each history is drawn from a generator keyed on
    ``(seed, h, obs, acts)``, so the policy is a fixed function of the history.
    """

    n_actions: int
    seed: int
    stochastic: bool = False
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def probs(self, h, obs, acts):
        key = (tuple(obs), tuple(acts))
        hit = self._cache.get(key)
        if hit is None:
            rng = np.random.default_rng([self.seed, h, *key[0], *key[1]])
            if self.stochastic:
                hit = rng.dirichlet(np.ones(self.n_actions))
            else:
                hit = self._onehot(int(rng.integers(self.n_actions)))
            self._cache[key] = hit
        return hit


# Trajectories


@dataclass(frozen=True)
class Trajectory:
    """Observations and actions of one episode; rewards and latent trace ride along."""

    obs: tuple[int, ...]
    acts: tuple[int, ...]
    rewards: tuple[float, ...] = field(default=(), compare=False)
    states: tuple[int, ...] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.obs) != len(self.acts):
            raise ShapeError("trajectory needs one action per observation")

    @property
    def H(self) -> int:
        return len(self.obs)

    @property
    def total_reward(self) -> float:
        return math.fsum(self.rewards)

    def without_latent(self) -> "Trajectory":
        return Trajectory(self.obs, self.acts, self.rewards, None)


def _draw(rng: np.random.Generator, p: np.ndarray) -> int:
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(p) - 1)


def _draw_action(rng: np.random.Generator, p: np.ndarray) -> int:
    top = int(np.argmax(p))
    if p[top] == 1.0:
        return top
    return _draw(rng, p)


def sample_trajectory(
    pomdp: TabularPOMDP,
    policy: Policy,
    seed: int | np.random.Generator | None,
    trace: bool = False,
) -> Trajectory:
    """Draw one episode; reproducible for a fixed integer seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = _draw(rng, pomdp.initial)
    obs: list[int] = []
    acts: list[int] = []
    rews: list[float] = []
    states: list[int] = []
    for h in range(pomdp.H):
        states.append(s)
        o = _draw(rng, pomdp.emission_row(h, s))
        obs.append(o)
        a = _draw_action(rng, policy.probs(h, obs, acts))
        acts.append(a)
        rews.append(float(pomdp.rewards[h, o, a]))
        if h < pomdp.H - 1:
            s = _draw(rng, pomdp.transition_row(h, s, a))
    return Trajectory(tuple(obs), tuple(acts), tuple(rews), tuple(states) if trace else None)


def _grouped_draw(u: np.ndarray, table: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw from ``table[rows[i]]`` with uniform ``u[i]``, grouped by row."""
    out = np.empty(rows.shape[0], dtype=np.int64)
    last = table.shape[1] - 1
    for r in np.unique(rows):
        sel = rows == r
        cdf = np.cumsum(table[r])
        out[sel] = np.minimum(np.searchsorted(cdf, u[sel] * cdf[-1], side="right"), last)
    return out


@dataclass(frozen=True)
class OpenLoopPaths:
    """Positive-probability (state, observation) paths of one action sequence."""

    cdf: np.ndarray
    obs: np.ndarray
    states: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.diff(self.cdf, prepend=0.0)


def open_loop_paths(pomdp: TabularPOMDP, actions: Sequence[int], cap: int = PATH_CAP) -> OpenLoopPaths | None:
    """Enumerate the trajectory law of an action sequence; None past ``cap`` paths."""
    H = pomdp.H
    init = np.asarray(pomdp.initial, dtype=float)
    s = np.flatnonzero(init > 0)
    p = init[s]
    states = s[:, None]
    obs = np.empty((s.size, 0), dtype=np.int64)
    for h in range(H):
        if not np.all(pomdp.mask[h, s]):
            bad = int(s[~pomdp.mask[h, s]][0])
            raise ConstructionInconsistency(f"masked state {pomdp.state_labels[bad]!r} reached at step {h}")
        E = pomdp.emissions[h][s]
        pi, oi = np.nonzero(E > 0)
        p, s, states = p[pi] * E[pi, oi], s[pi], states[pi]
        obs = np.hstack([obs[pi], oi[:, None]])
        if h < H - 1:
            T = pomdp.transitions[h][s, actions[h], :]
            pi, si = np.nonzero(T > 0)
            p, s = p[pi] * T[pi, si], si
            states, obs = np.hstack([states[pi], si[:, None]]), obs[pi]
        if p.size > cap:
            return None
    return OpenLoopPaths(np.cumsum(p), obs, states)


def sample_open_loop(
    pomdp: TabularPOMDP,
    actions: Sequence[int],
    n: int,
    rng: np.random.Generator,
    paths: OpenLoopPaths | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized rollouts of an action sequence; returns (obs, states), each (n, H).

    With ``paths`` each episode is one inverse-CDF draw over the enumerated
    paths; otherwise each step is drawn in turn. Either way the uniforms come
    one row per episode, so for a fixed generator state the first ``k``
    episodes do not depend on ``n``.
    """
    if paths is not None:
        cdf = paths.cdf
        idx = np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), cdf.size - 1)
        return paths.obs[idx], paths.states[idx]
    H = pomdp.H
    u = rng.random((n, 2 * H))
    obs = np.empty((n, H), dtype=np.int64)
    states = np.empty((n, H), dtype=np.int64)
    s = _grouped_draw(u[:, 0], np.asarray(pomdp.initial)[None, :], np.zeros(n, dtype=np.int64))
    for h in range(H):
        if not np.all(pomdp.mask[h, s]):
            bad = int(s[~pomdp.mask[h, s]][0])
            raise ConstructionInconsistency(f"masked state {pomdp.state_labels[bad]!r} reached at step {h}")
        states[:, h] = s
        obs[:, h] = _grouped_draw(u[:, 2 * h + 1], pomdp.emissions[h], s)
        if h < H - 1:
            s = _grouped_draw(u[:, 2 * h + 2], pomdp.transitions[h][:, actions[h], :], s)
    return obs, states


# Exact enumeration and evaluation


def _check_belief(pomdp: TabularPOMDP, h: int, b: np.ndarray) -> None:
    if np.any((b > 0) & ~pomdp.mask[h]):
        raise ConstructionInconsistency(f"belief charges a masked state at step {h}")


def iter_trajectories(
    pomdp: TabularPOMDP, policy: Policy, cap: int = DEFAULT_CAP
) -> Iterator[tuple[Trajectory, float]]:
    """Depth-first enumeration of the trajectory support with log-space products."""
    H = pomdp.H
    count = 0

    def rec(h, b, logp, obs, acts, rews):
        nonlocal count
        _check_belief(pomdp, h, b)
        po = b @ pomdp.emissions[h]
        for o in np.flatnonzero(po > 0):
            bo = b * pomdp.emissions[h][:, o] / po[o]
            lo = logp + math.log(po[o])
            obs2 = obs + (int(o),)
            pa = policy.probs(h, obs2, acts)
            for a in np.flatnonzero(pa > 0):
                la = lo + math.log(pa[a])
                rews2 = rews + (float(pomdp.rewards[h, o, a]),)
                acts2 = acts + (int(a),)
                if h == H - 1:
                    count += 1
                    if count > cap:
                        raise EnumerationTooLarge(f"trajectory support exceeds cap {cap}")
                    yield Trajectory(obs2, acts2, rews2), math.exp(la)
                else:
                    yield from rec(h + 1, bo @ pomdp.transitions[h][:, a, :], la, obs2, acts2, rews2)

    yield from rec(0, np.asarray(pomdp.initial, dtype=float), 0.0, (), (), ())


def enumerate_distribution(
    pomdp: TabularPOMDP, policy: Policy, cap: int = DEFAULT_CAP
) -> dict[Trajectory, float]:
    """Exact distribution over full trajectories under ``policy``.

    ``cap`` bounds the number of trajectories with positive probability.
    """
    return dict(iter_trajectories(pomdp, policy, cap))


def trajectory_probability(pomdp: TabularPOMDP, obs: Sequence[int], acts: Sequence[int]) -> float:
    """Policy-free factor P(o_1..o_H | do(a_1..a_{H-1})) by forward recursion."""
    alpha = np.asarray(pomdp.initial, dtype=float)
    for h, o in enumerate(obs):
        alpha = alpha * pomdp.emissions[h][:, o]
        if h < len(obs) - 1:
            alpha = alpha @ pomdp.transitions[h][:, acts[h], :]
    return float(alpha.sum())


def _forward_value(pomdp: TabularPOMDP, policy: Policy) -> float:
    d = np.asarray(pomdp.initial, dtype=float)
    terms: list[float] = []
    for h in range(pomdp.H):
        _check_belief(pomdp, h, d)
        joint = d[:, None] * pomdp.emissions[h]  # (S, O)
        po = joint.sum(axis=0)
        nxt = np.zeros(pomdp.S)
        for o in np.flatnonzero(po > 0):
            pa = policy.reactive_probs(h, int(o))
            terms.append(float(po[o] * (pa @ pomdp.rewards[h, o])))
            if h < pomdp.H - 1:
                nxt += np.einsum("s,a,sat->t", joint[:, o], pa, pomdp.transitions[h])
        d = nxt
    return math.fsum(terms)


def policy_value(
    pomdp: TabularPOMDP, policy: Policy, method: str = "auto", cap: int = DEFAULT_CAP
) -> float:
    """Expected total reward; ``forward`` is exact for open-loop and reactive policies."""
    if method not in ("auto", "forward", "enumerate"):
        raise ValueError(f"unknown method {method!r}")
    reactive = policy.reactive_probs(0, 0) is not None
    if method == "forward" or (method == "auto" and reactive):
        if not reactive:
            raise ValueError("forward evaluation needs an observation-reactive policy")
        return _forward_value(pomdp, policy)
    return math.fsum(p * t.total_reward for t, p in iter_trajectories(pomdp, policy, cap))


def event_probability(
    pomdp: TabularPOMDP,
    policy: Policy,
    event: Callable[[Trajectory], bool],
    cap: int = DEFAULT_CAP,
) -> float:
    return math.fsum(p for t, p in iter_trajectories(pomdp, policy, cap) if event(t))


def optimal_value_bruteforce(
    pomdp: TabularPOMDP, cap: int = DEFAULT_CAP, tol: float = 1e-12
) -> tuple[float, HistoryPolicy]:
    """Optimal value over deterministic history policies by backward recursion.

    Beliefs reached by distinct histories share memo entries when bit-identical.
    Ties go to the smallest action index within ``tol``.
    """
    H, A = pomdp.H, pomdp.A
    memo: dict[tuple[int, bytes], tuple[float, dict[int, int]]] = {}
    nodes = 0

    def value(h: int, b: np.ndarray) -> float:
        nonlocal nodes
        key = (h, b.tobytes())
        hit = memo.get(key)
        if hit is not None:
            return hit[0]
        nodes += 1
        if nodes > cap:
            raise EnumerationTooLarge(f"belief recursion exceeds cap {cap}")
        _check_belief(pomdp, h, b)
        po = b @ pomdp.emissions[h]
        total: list[float] = []
        choice: dict[int, int] = {}
        for o in np.flatnonzero(po > 0):
            bo = b * pomdp.emissions[h][:, o] / po[o]
            q = np.array(pomdp.rewards[h, o], dtype=float)
            if h < H - 1:
                for a in range(A):
                    q[a] += value(h + 1, bo @ pomdp.transitions[h][:, a, :])
            best = int(np.flatnonzero(q >= q.max() - tol)[0])
            choice[int(o)] = best
            total.append(float(po[o] * q[best]))
        v = math.fsum(total)
        memo[key] = (v, choice)
        return v

    b0 = np.asarray(pomdp.initial, dtype=float)
    v0 = value(0, b0)

    table: dict[tuple[tuple[int, ...], tuple[int, ...]], int] = {}

    def walk(h: int, b: np.ndarray, obs: tuple[int, ...], acts: tuple[int, ...]) -> None:
        _, choice = memo[(h, b.tobytes())]
        for o, a in choice.items():
            obs2 = obs + (o,)
            table[(obs2, acts)] = a
            if h < H - 1:
                po = b @ pomdp.emissions[h]
                bo = b * pomdp.emissions[h][:, o] / po[o]
                walk(h + 1, bo @ pomdp.transitions[h][:, a, :], obs2, acts + (a,))

    walk(0, b0, (), ())
    return v0, HistoryPolicy(table, A)


def random_pomdp(
    S: int, O: int, A: int, H: int, rng: np.random.Generator, concentration: float = 1.0
) -> TabularPOMDP:
    """Dense random POMDP with Dirichlet rows and uniform rewards in [0, 1].

    With ``O >= S`` the emission matrices have full column rank almost surely,
    so the model is 1-step revealing.
    """
    alpha = np.full(S, concentration)
    return TabularPOMDP(
        rng.dirichlet(alpha, size=(H - 1, S, A)),
        rng.dirichlet(np.full(O, concentration), size=(H, S)),
        rng.random((H, O, A)),
        rng.dirichlet(alpha),
    )
