"""PSR view of a POMDP: core tests, B-representations, factorization and B-stability checks.

Steps are 1-based. Core tests at step ``h`` have window ``w_h = min(m, H-h+1)``
and use the row convention of :mod:`revpomdp.revealing`:
``index = a_idx * O**w + o_idx``. ``U_{H+1}`` is a single dummy test.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import BudgetError, EnumerationTooLarge, UnsupportedStructure
from .pomdp import DEFAULT_CAP, TabularPOMDP
from .revealing import (
    InverseCertificate,
    construct_block_inverse,
    emission_action_matrix,
    star_norm,
)

RANK_RTOL = 1e-8
NODE_CAP = 2 * 10**6


@dataclass(frozen=True)
class CoreTests:
    """Window and size of ``U_h`` for ``h = 1..H+1``; index 0 is unused."""

    n_obs: int
    n_actions: int
    windows: tuple[int, ...]

    def size(self, h: int) -> int:
        w = self.windows[h]
        if w == 0:
            return 1
        return self.n_obs**w * self.n_actions ** (w - 1)

    def block_size(self, h: int) -> int:
        w = self.windows[h]
        return 1 if w == 0 else self.n_obs**w

    def decode(self, h: int, idx: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """(observation sequence, action sequence) of test ``idx`` at step ``h``."""
        w = self.windows[h]
        a_idx, o_idx = divmod(idx, self.n_obs**w)
        obs = _digits(o_idx, self.n_obs, w)
        acts = _digits(a_idx, self.n_actions, w - 1)
        return obs, acts

    def arrays(self, h: int) -> tuple[np.ndarray, np.ndarray]:
        """All tests at step ``h`` as (size, w) observation and (size, w-1) action arrays."""
        w = self.windows[h]
        idx = np.arange(self.size(h))
        a_idx, o_idx = np.divmod(idx, self.n_obs**w)
        obs = np.stack([(o_idx // self.n_obs ** (w - 1 - k)) % self.n_obs for k in range(w)], axis=1)
        if w > 1:
            acts = np.stack(
                [(a_idx // self.n_actions ** (w - 2 - k)) % self.n_actions for k in range(w - 1)], axis=1
            )
        else:
            acts = np.zeros((idx.size, 0), dtype=int)
        return obs, acts


def _digits(idx: int, base: int, length: int) -> tuple[int, ...]:
    out = []
    for _ in range(length):
        out.append(idx % base)
        idx //= base
    return tuple(reversed(out))


def core_tests(pomdp: TabularPOMDP, m: int) -> CoreTests:
    """``U_h = (O x A)^{min(m-1, H-h)} x O``; ``U_{H+1}`` is the dummy test."""
    if m < 1:
        raise ValueError("m must be >= 1")
    H = pomdp.H
    windows = (0,) + tuple(min(m, H - h + 1) for h in range(1, H + 1)) + (0,)
    return CoreTests(pomdp.O, pomdp.A, windows)


@dataclass(frozen=True, eq=False)
class BRepresentation:
    m: int
    tests: CoreTests
    B: tuple[np.ndarray, ...]  # B[h-1] has shape (O, A, |U_{h+1}|, |U_h|)
    q0: np.ndarray
    rank_bound: int
    regimes: tuple[str, ...]

    @property
    def H(self) -> int:
        return len(self.B)

    def matrix(self, h: int, o: int, a: int) -> np.ndarray:
        return self.B[h - 1][o, a]

    @property
    def R_B(self) -> float:
        return 1.0 + max(float(np.abs(b).sum(axis=2).max()) for b in self.B)

    def apply(self, obs: Sequence[int], acts: Sequence[int]) -> np.ndarray:
        """``B_{h:1}(tau_h) q0`` for a history of length ``h``."""
        v = self.q0
        for k, (o, a) in enumerate(zip(obs, acts)):
            v = self.B[k][o, a] @ v
        return v

    def corrupted(self, h: int, o: int, a: int, delta: float = 0.1) -> "BRepresentation":
        """Copy with ``delta`` added to every entry of ``B_h(o, a)`` (negative tests)."""
        B = [b.copy() for b in self.B]
        B[h - 1][o, a] += delta
        return BRepresentation(self.m, self.tests, tuple(B), self.q0, self.rank_bound, self.regimes)


def build_brep(
    pomdp: TabularPOMDP,
    m: int,
    certs: Mapping[int, InverseCertificate] | Sequence[InverseCertificate] | None = None,
    cap: int = 5 * 10**7,
) -> BRepresentation:
    """B-representation from generalized inverses for ``h <= H-m`` and indicators after.

    ``certs`` maps each step ``h <= H-m`` to a valid window-``m`` certificate;
    missing steps are filled with :func:`construct_block_inverse`.
    """
    H, O, A = pomdp.H, pomdp.O, pomdp.A
    U = core_tests(pomdp, m)
    if isinstance(certs, Sequence):
        certs = {c.h: c for c in certs}
    certs = dict(certs or {})
    total = sum(O * A * U.size(h) * U.size(h + 1) for h in range(1, H + 1))
    if total > cap:
        raise EnumerationTooLarge(f"B-representation needs {total} entries, cap is {cap}")
    B: list[np.ndarray] = []
    regimes: list[str] = []
    mats = {}
    for h in range(1, H + 1):
        if h <= H - m:
            cert = certs.get(h) or construct_block_inverse(pomdp, h, m)
            if not cert.valid or cert.window != m or cert.h != h:
                raise UnsupportedStructure(f"certificate for step {h} is invalid or mismatched")
            if h + 1 not in mats:
                mats[h + 1] = emission_action_matrix(pomdp, h + 1, m).matrix
            Mn = mats[h + 1]
            E = pomdp.emissions[h - 1]  # (S, O)
            T = pomdp.transitions[h - 1]  # (S, A, S)
            # B[o, a] = M_{h+1} T_a^T diag(E[:, o]) M+
            left = np.einsum("us,tas->aut", Mn, T)  # (A, U', S)
            Bh = np.einsum("aut,to,tv->oauv", left, E, cert.inverse)
            regimes.append("inverse")
        else:
            Bh = np.zeros((O, A, U.size(h + 1), U.size(h)))
            w = U.windows[h]
            nxt = U.size(h + 1)
            for t in range(U.size(h)):
                obs, acts = U.decode(h, t)
                if w == 1:
                    Bh[obs[0], :, 0, t] = 1.0
                else:
                    tail = _encode(acts[1:], A) * O ** (w - 1) + _encode(obs[1:], O)
                    assert tail < nxt
                    Bh[obs[0], acts[0], tail, t] = 1.0
            regimes.append("indicator")
        B.append(Bh)
    q0 = emission_action_matrix(pomdp, 1, U.windows[1]).matrix @ pomdp.initial
    return BRepresentation(m, U, tuple(B), q0, pomdp.S, tuple(regimes))


def _encode(seq: Sequence[int], base: int) -> int:
    idx = 0
    for x in seq:
        idx = idx * base + int(x)
    return idx


def _test_probabilities(pomdp: TabularPOMDP, alpha: np.ndarray, h: int, U: CoreTests) -> np.ndarray:
    """``P(o_{1:h-1}, t | do(...))`` for all ``t`` in ``U_h`` by a direct forward pass.

    ``alpha`` is the unnormalized state vector at step ``h``. Independent of the
    emission-action matrix code path.
    """
    if U.windows[h] == 0:
        return np.array([alpha.sum()])
    obs, acts = U.arrays(h)
    V = np.broadcast_to(alpha, (obs.shape[0], alpha.size)).copy()
    w = U.windows[h]
    for k in range(w):
        step = h - 1 + k
        V *= pomdp.emissions[step][:, obs[:, k]].T
        if k < w - 1:
            Tk = pomdp.transitions[step][:, acts[:, k], :]  # (S, N, S)
            V = np.einsum("ns,snt->nt", V, Tk)
    return V.sum(axis=1)


def verify_factorization(brep: BRepresentation, pomdp: TabularPOMDP, cap: int = DEFAULT_CAP) -> float:
    """Max over positive-probability histories and core tests of the factorization error.

    Zero-probability children are checked once but not expanded further.
    """
    U = brep.tests
    H = pomdp.H
    worst = 0.0
    count = 0
    stack = [(0, np.asarray(pomdp.initial, dtype=float), brep.q0)]
    while stack:
        h, alpha, v = stack.pop()
        # alpha: unnormalized state vector at step h+1, v: B_{h:1} q0 over U_{h+1}
        ref = _test_probabilities(pomdp, alpha, h + 1, U)
        worst = max(worst, float(np.abs(ref - v).max()))
        if h == H:
            continue
        for o in range(pomdp.O):
            a_o = alpha * pomdp.emissions[h][:, o]
            for a in range(pomdp.A):
                count += 1
                if count > cap:
                    raise EnumerationTooLarge(f"factorization check exceeds cap {cap}")
                v2 = brep.B[h][o, a] @ v
                if h + 1 < H:
                    nxt = a_o @ pomdp.transitions[h][:, a, :]
                else:
                    nxt = a_o
                if a_o.sum() > 0:
                    stack.append((h + 1, nxt, v2))
                else:
                    worst = max(worst, float(np.abs(v2).max()))
    return worst


def histories(pomdp: TabularPOMDP, h: int, cap: int = DEFAULT_CAP):
    """Positive-probability histories of length ``h`` with their unnormalized state vectors.

    The state vector is at step ``h+1`` (after the last transition); for ``h = H``
    it is the vector after the final emission.
    """
    out = []
    stack = [(0, np.asarray(pomdp.initial, dtype=float), (), ())]
    while stack:
        k, alpha, obs, acts = stack.pop()
        if k == h:
            out.append((obs, acts, alpha))
            if len(out) > cap:
                raise EnumerationTooLarge(f"more than {cap} histories")
            continue
        for o in np.flatnonzero(alpha @ pomdp.emissions[k] > 0):
            a_o = alpha * pomdp.emissions[k][:, o]
            for a in range(pomdp.A):
                nxt = a_o @ pomdp.transitions[k][:, a, :] if k + 1 < pomdp.H else a_o
                stack.append((k + 1, nxt, obs + (int(o),), acts + (int(a),)))
    return out


def predictive_states(pomdp: TabularPOMDP, m: int, h: int, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Rows ``q(tau_{h-1})`` over ``U_h`` for every positive-probability history."""
    U = core_tests(pomdp, m)
    M = emission_action_matrix(pomdp, h, U.windows[h]).matrix
    rows = []
    for _, _, alpha in histories(pomdp, h - 1, cap):
        b = alpha / alpha.sum()
        rows.append(M @ b)
    return np.array(rows)


def numerical_rank(D: np.ndarray, rtol: float = RANK_RTOL) -> int:
    if D.size == 0:
        return 0
    sv = np.linalg.svd(D, compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))


def psr_rank(pomdp: TabularPOMDP, m: int, cap: int = DEFAULT_CAP) -> int:
    """``max_h rank(D_h)`` with ``D_h`` the stacked predictive states after ``h`` steps."""
    best = 0
    for h in range(0, pomdp.H):
        D = predictive_states(pomdp, m, h + 1, cap)
        best = max(best, numerical_rank(D))
    return best


def pi_prime_norm(x: np.ndarray, tests: CoreTests, h: int) -> float:
    """``max`` over deterministic test policies of the policy-weighted l1 mass of ``x``.

    All tests in ``U_h`` share one length, so every test is maximal.
    """
    w = tests.windows[h]
    O, A = tests.n_obs, tests.n_actions
    if w <= 1:
        return float(np.abs(x).sum())
    arr = np.abs(np.asarray(x, dtype=float)).reshape((A,) * (w - 1) + (O,) * w)
    # reorder to (o_1, a_1, o_2, a_2, ..., o_w)
    order = []
    for k in range(w):
        order.append(w - 1 + k)
        if k < w - 1:
            order.append(k)
    arr = arr.transpose(order)
    for _ in range(w - 1):
        arr = arr.sum(axis=-1).max(axis=-1)
    return float(arr.sum())


def policy_weighted_l1(x: np.ndarray, tests: CoreTests, h: int) -> float:
    """Alias kept for readability in reports: equals :func:`pi_prime_norm`."""
    return pi_prime_norm(x, tests, h)


def _stability_tree(
    brep: BRepresentation, h: int, x: np.ndarray, lam: float | None, node_cap: int
) -> float:
    """``max_pi`` of the B-stability left side, minus ``lam`` times the test mass if given.

    Observations are revealed before actions, so the backward pass takes a sum
    over observations of a max over actions.
    """
    U = brep.tests
    H = brep.H
    O, A = U.n_obs, U.n_actions
    w = U.windows[h]
    V = np.asarray(x, dtype=float)[None, :]
    codes = np.zeros(1, dtype=np.int64)  # partial test code (o/a interleaved digits)
    levels = []
    xa = np.abs(np.asarray(x, dtype=float))
    for k in range(H - h + 1):
        step = h + k
        W = np.einsum("oaij,nj->noai", brep.B[step - 1], V)
        N = V.shape[0]
        if step == H:
            child = np.abs(W[..., 0])
            levels.append((N, None, None, child, codes))
            break
        flat = W.reshape(N * O * A, -1)
        ids = np.arange(N * O * A)
        keep_all = lam is not None and k + 1 <= w - 1
        alive = ids if keep_all else ids[np.any(flat != 0, axis=1)]
        n_idx, rest = np.divmod(alive, O * A)
        o_idx, a_idx = np.divmod(rest, A)
        new_codes = (codes[n_idx] * O + o_idx) * A + a_idx
        levels.append((N, n_idx, o_idx * A + a_idx, None, codes))
        V = flat[alive]
        codes = new_codes
        if V.shape[0] > node_cap:
            raise BudgetError(f"stability recursion exceeds {node_cap} nodes at step {step}")
        if V.shape[0] == 0:
            break
    # backward pass
    child_vals = None
    for k in range(len(levels) - 1, -1, -1):
        N, n_idx, oa, leaf_child, codes_k = levels[k]
        if leaf_child is not None:
            C = leaf_child
        else:
            C = np.zeros((N, O * A))
            if child_vals is not None and n_idx.size:
                C[n_idx, oa] = child_vals
            C = C.reshape(N, O, A)
        best = C.max(axis=2)  # (N, O)
        if lam is not None and k == w - 1:
            # completed test: o_h..o_{h+w-1} with actions a_h..a_{h+w-2}
            pen = np.empty((N, O))
            for i, code in enumerate(codes_k):
                obs, acts = _split_code(int(code), O, A, k)
                for o in range(O):
                    t = _encode(acts, A) * O**w + _encode(obs + (o,), O)
                    pen[i, o] = xa[t]
            best = best - lam * pen
        child_vals = best.sum(axis=1)
        if k == 0:
            return float(child_vals[0])
    return 0.0


def _split_code(code: int, O: int, A: int, length: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    obs, acts = [], []
    for _ in range(length):
        code, a = divmod(code, A)
        code, o = divmod(code, O)
        obs.append(o)
        acts.append(a)
    return tuple(reversed(obs)), tuple(reversed(acts))


@dataclass(frozen=True)
class ProbeResult:
    h: int
    kind: str
    index: int
    lhs: float
    star: float
    pi_prime: float
    margin: float
    strong_excess: float

    @property
    def passes(self) -> bool:
        return self.margin >= -1e-9

    @property
    def strong_passes(self) -> bool:
        return self.strong_excess <= 1e-9


@dataclass(frozen=True)
class StabilityReport:
    lam: float
    results: tuple[ProbeResult, ...]
    notes: tuple[str, ...] = field(default=())

    @property
    def passes(self) -> bool:
        return all(r.passes for r in self.results)

    @property
    def strong_passes(self) -> bool:
        return all(r.strong_passes for r in self.results)

    @property
    def coverage(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.results:
            out[r.kind] = out.get(r.kind, 0) + 1
        return out

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "passes": self.passes,
            "strong_passes": self.strong_passes,
            "coverage": self.coverage,
            "notes": list(self.notes),
            "probes": [r.__dict__ for r in self.results],
        }


def default_probes(
    brep: BRepresentation, pomdp: TabularPOMDP, h: int, n_random: int = 50, seed: int = 0, cap: int = DEFAULT_CAP
) -> list[tuple[str, np.ndarray]]:
    """Unit coordinates, predictive states of all histories, and seeded Gaussian vectors."""
    d = brep.tests.size(h)
    probes: list[tuple[str, np.ndarray]] = [("unit", np.eye(d)[i]) for i in range(d)]
    D = predictive_states(pomdp, brep.m, h, cap)
    for row in np.unique(np.round(D, 15), axis=0):
        probes.append(("predictive", row))
    rng = np.random.default_rng([seed, h])
    for _ in range(n_random):
        probes.append(("random", rng.standard_normal(d)))
    return probes


def check_b_stability(
    brep: BRepresentation,
    lam: float,
    probes: Mapping[int, Sequence[tuple[str, np.ndarray]]],
    strong: bool = True,
    node_cap: int = NODE_CAP,
) -> StabilityReport:
    """Evaluate both stability inequalities on a probe set per step.

    ``margin = lam * max(||x||_*, ||x||_Pi') - lhs``; ``strong_excess`` is
    ``max_pi (lhs(pi) - lam * sum_t pi(t)|x(t)|)``.
    """
    results = []
    U = brep.tests
    for h, plist in sorted(probes.items()):
        for i, (kind, x) in enumerate(plist):
            lhs = _stability_tree(brep, h, x, None, node_cap)
            st = star_norm(x, U.block_size(h))
            pp = pi_prime_norm(x, U, h)
            excess = _stability_tree(brep, h, x, lam, node_cap) if strong else float("nan")
            results.append(ProbeResult(h, kind, i, lhs, st, pp, lam * max(st, pp) - lhs, excess))
    notes = ("all core tests at a step share one length, so the maximal-test set equals U_h",)
    return StabilityReport(lam, tuple(results), notes)
