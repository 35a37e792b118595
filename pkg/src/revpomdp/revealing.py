"""Emission-action matrices, generalized left inverses and revealing certificates.

Steps are 1-based here. Rows of an m-step emission-action matrix are indexed by
``a_idx * O**m + o_idx`` where ``a_idx`` encodes the action sequence
``(a_h, ..., a_{h+m-2})`` and ``o_idx`` the observation sequence
``(o_h, ..., o_{h+m-1})``, both in base ``A``/``O`` with the first element most
significant. Each action sequence therefore owns one contiguous row block.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import BudgetError, EnumerationTooLarge, ShapeError, UnsupportedStructure
from .pomdp import DEFAULT_CAP, TabularPOMDP

RESIDUAL_TOL = 1e-9
MAX_SIGN_ROWS = 20


@dataclass(frozen=True, eq=False)
class EmissionActionMatrix:
    h: int
    m: int
    matrix: np.ndarray  # (A**(m-1) * O**m, S)
    n_obs: int
    n_actions: int
    live: np.ndarray  # (S,) states unmasked at step h

    @property
    def block_size(self) -> int:
        return self.n_obs**self.m

    @property
    def n_blocks(self) -> int:
        return self.n_actions ** (self.m - 1)

    def block(self, a_seq: Sequence[int]) -> np.ndarray:
        i = encode(a_seq, self.n_actions)
        return self.matrix[i * self.block_size : (i + 1) * self.block_size]

    def row_index(self, a_seq: Sequence[int], o_seq: Sequence[int]) -> int:
        return encode(a_seq, self.n_actions) * self.block_size + encode(o_seq, self.n_obs)


def encode(seq: Sequence[int], base: int) -> int:
    idx = 0
    for x in seq:
        idx = idx * base + int(x)
    return idx


def decode(idx: int, base: int, length: int) -> tuple[int, ...]:
    out = []
    for _ in range(length):
        out.append(idx % base)
        idx //= base
    return tuple(reversed(out))


def _check_window(pomdp: TabularPOMDP, h: int, m: int) -> None:
    if m < 1:
        raise ValueError("window m must be >= 1")
    if not 1 <= h <= pomdp.H - m + 1:
        raise ValueError(f"step h={h} outside 1..H-m+1 for m={m}")


def emission_action_matrix(
    pomdp: TabularPOMDP, h: int, m: int, cap: int = DEFAULT_CAP
) -> EmissionActionMatrix:
    """``M_{h,m}[(a, o), s] = P(o_{h:h+m-1} = o | s_h = s, do(a))``; masked columns are zero."""
    _check_window(pomdp, h, m)
    O, A, S = pomdp.O, pomdp.A, pomdp.S
    if O**m * A ** (m - 1) > cap:
        raise EnumerationTooLarge(f"emission-action matrix has {O**m * A ** (m - 1)} rows, cap is {cap}")
    h0 = h - 1
    live = np.array(pomdp.mask[h0], dtype=bool)
    blocks = []
    for a_seq in itertools.product(range(A), repeat=m - 1):
        # F has shape (S, O**k): probability of the remaining observations from a state
        F = pomdp.emissions[h0 + m - 1]
        for k in range(m - 2, -1, -1):
            step = h0 + k
            nxt = pomdp.transitions[step][:, a_seq[k], :] @ F  # (S, O**(m-1-k))
            F = (pomdp.emissions[step][:, :, None] * nxt[:, None, :]).reshape(S, -1)
        blocks.append(F.T)
    mat = np.vstack(blocks)
    mat[:, ~live] = 0.0
    mat.setflags(write=False)
    return EmissionActionMatrix(h, m, mat, O, A, live)


def star_norm(x: np.ndarray, block_size: int | None = None) -> float:
    """l2 over action blocks of l1 over observations inside each block."""
    x = np.asarray(x, dtype=float).ravel()
    if block_size is None:
        block_size = x.size
    if x.size == 0:
        return 0.0
    sums = np.abs(x.reshape(-1, block_size)).sum(axis=1)
    return float(np.sqrt(np.sum(sums**2)))


def star_to_one_norm(
    Mplus: np.ndarray, block_size: int | None = None, max_rows: int = MAX_SIGN_ROWS, chunk: int = 4096
) -> float:
    """Operator norm ``max ||M+ x||_1`` over the star unit ball.

    Uses ``max_s ||M+^T s||_dual`` over sign vectors ``s``, where the dual norm
    is l2 over blocks of l-infinity within a block. Zero rows and zero blocks
    are dropped first; a single surviving block reduces to the largest column
    l1 norm.
    """
    M = np.asarray(Mplus, dtype=float)
    if M.ndim != 2:
        raise ShapeError("M+ must be a matrix")
    if block_size is None:
        block_size = M.shape[1]
    if M.shape[1] % block_size:
        raise ShapeError("column count must be a multiple of block_size")
    M = M[np.any(M != 0, axis=1)]
    if M.size == 0:
        return 0.0
    blocks = M.reshape(M.shape[0], -1, block_size)
    keep = np.any(blocks != 0, axis=(0, 2))
    blocks = blocks[:, keep, :]
    if blocks.shape[1] == 1:
        return float(np.abs(blocks[:, 0, :]).sum(axis=0).max())
    r = blocks.shape[0]
    if r > max_rows:
        raise BudgetError(f"{r} nonzero rows exceed the sign-enumeration budget {max_rows}")
    flat = blocks.reshape(r, -1)
    nb = blocks.shape[1]
    best = 0.0
    total = 1 << (r - 1)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(total, start + chunk))
        # the first sign is fixed to +1 by symmetry
        bits = (codes[:, None] >> np.arange(r - 1)[None, :]) & 1
        signs = np.hstack([np.ones((codes.size, 1)), 1.0 - 2.0 * bits])
        y = (signs @ flat).reshape(codes.size, nb, block_size)
        val = np.sqrt((np.abs(y).max(axis=2) ** 2).sum(axis=1)).max()
        best = max(best, float(val))
    return best


@dataclass(frozen=True, eq=False)
class InverseCertificate:
    h: int
    window: int
    inverse: np.ndarray  # (S, rows)
    block_size: int
    residual: float
    norm: float
    tag: str
    anchor: tuple[int, ...] = ()

    @property
    def valid(self) -> bool:
        return self.residual <= RESIDUAL_TOL

    def to_dict(self, include_inverse: bool = False) -> dict:
        d = {
            "h": self.h,
            "window": self.window,
            "tag": self.tag,
            "residual": self.residual,
            "norm": self.norm,
            "valid": self.valid,
            "anchor": list(self.anchor),
        }
        if include_inverse:
            d["inverse"] = self.inverse.tolist()
        return d


def prior_columns(pomdp: TabularPOMDP, h: int) -> np.ndarray:
    """Columns of ``T_{h-1}`` from unmasked source states; ``mu1`` for ``h = 1``."""
    if h == 1:
        return np.asarray(pomdp.initial, dtype=float)[:, None]
    h0 = h - 2
    src = np.flatnonzero(pomdp.mask[h0])
    cols = pomdp.transitions[h0][src].reshape(-1, pomdp.S)
    return cols.T


def verify_generalized_inverse(
    pomdp: TabularPOMDP,
    h: int,
    m: int,
    Mplus: np.ndarray,
    tag: str = "user-supplied",
    M: EmissionActionMatrix | None = None,
    anchor: tuple[int, ...] = (),
) -> InverseCertificate:
    """Residual ``max|M+ M T_{h-1} - T_{h-1}|`` and the star-to-one norm of ``M+``."""
    if M is None:
        M = emission_action_matrix(pomdp, h, m)
    Mplus = np.asarray(Mplus, dtype=float)
    if Mplus.shape != (pomdp.S, M.matrix.shape[0]):
        raise ShapeError(f"M+ must have shape {(pomdp.S, M.matrix.shape[0])}, got {Mplus.shape}")
    T = prior_columns(pomdp, h)
    resid = float(np.abs(Mplus @ (M.matrix @ T) - T).max()) if T.size else 0.0
    norm = star_to_one_norm(Mplus, M.block_size)
    Mplus = Mplus.copy()
    Mplus.setflags(write=False)
    return InverseCertificate(h, m, Mplus, M.block_size, resid, norm, tag, anchor)


def _block_candidate(block: np.ndarray, support: np.ndarray, rank_tol: float = 1e-10) -> np.ndarray | None:
    """Left inverse of one action block on the supported states, or None."""
    S = block.shape[1]
    cols = np.flatnonzero(support)
    inv = np.zeros((S, block.shape[0]))
    if cols.size == 0:
        return inv
    sub = block[:, cols] > 0
    overlap = (sub.T.astype(float) @ sub.astype(float)) > 0
    n_comp, labels = connected_components(csr_matrix(overlap), directed=False)
    for c in range(n_comp):
        members = cols[labels == c]
        rows = np.flatnonzero(np.any(block[:, members] > 0, axis=1))
        if members.size == 1:
            inv[members[0], rows] = 1.0
            continue
        sub_m = block[np.ix_(rows, members)]
        sv = np.linalg.svd(sub_m, compute_uv=False)
        if sv.size < members.size or sv[-1] <= rank_tol * sv[0]:
            return None
        inv[np.ix_(members, rows)] = np.linalg.pinv(sub_m)
    return inv


def construct_block_inverse(pomdp: TabularPOMDP, h: int, m: int) -> InverseCertificate:
    """Block inverse from support analysis, minimized over the anchoring action sequence.

    For each action sequence the states charged by ``T_{h-1}`` are grouped into
    components with overlapping observation supports. Singleton components get
    an indicator row; larger ones get the pseudo-inverse of their sub-block.
    The admissible sequence with the smallest norm wins, ties going to the
    lexicographically smallest sequence.
    """
    M = emission_action_matrix(pomdp, h, m)
    support = prior_columns(pomdp, h).sum(axis=1) > 0
    bs = M.block_size
    best: InverseCertificate | None = None
    for a_seq in itertools.product(range(pomdp.A), repeat=m - 1):
        i = encode(a_seq, pomdp.A)
        cand = _block_candidate(M.matrix[i * bs : (i + 1) * bs], support)
        if cand is None:
            continue
        full = np.zeros((pomdp.S, M.matrix.shape[0]))
        full[:, i * bs : (i + 1) * bs] = cand
        cert = verify_generalized_inverse(pomdp, h, m, full, tag="block", M=M, anchor=a_seq)
        if not cert.valid:
            continue
        if best is None or cert.norm < best.norm - 1e-12:
            best = cert
    if best is None:
        raise UnsupportedStructure(f"no admissible block partition at h={h}, m={m}")
    return best


def lift_inverse(cert: InverseCertificate, pomdp: TabularPOMDP, h: int, anchor_action: int) -> InverseCertificate:
    """Window ``m+1`` inverse ``M+_{m+1} = M+_m F_a``.

    ``F_a`` marginalizes the last observation and fixes the appended action to
    ``anchor_action``; the lifted matrix copies each entry of ``M+_m`` onto every
    extension of its observation sequence.
    """
    if not cert.valid:
        raise UnsupportedStructure("cannot lift an invalid certificate")
    m = cert.window
    _check_window(pomdp, h, m + 1)
    O, A, S = pomdp.O, pomdp.A, pomdp.S
    old = cert.inverse.reshape(S, A ** (m - 1), O**m)
    new = np.zeros((S, A ** (m - 1), A, O**m, O))
    new[:, :, anchor_action, :, :] = old[:, :, :, None]
    new = new.reshape(S, A**m * O ** (m + 1))
    anchor = cert.anchor + (anchor_action,) if cert.anchor or m == 1 else ()
    return verify_generalized_inverse(pomdp, h, m + 1, new, tag="lifted", anchor=anchor)


@dataclass(frozen=True)
class RevealingReport:
    window: int
    certificates: tuple[InverseCertificate, ...]

    @property
    def alpha_inv(self) -> float:
        return max(c.norm for c in self.certificates)

    @property
    def valid(self) -> bool:
        return all(c.valid for c in self.certificates)

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "alpha_inv": self.alpha_inv,
            "valid": self.valid,
            "steps": [c.to_dict() for c in self.certificates],
        }


def certify(pomdp: TabularPOMDP, m: int, steps: Sequence[int] | None = None) -> RevealingReport:
    """Block certificates for every step ``h <= H - m + 1`` (or the given steps)."""
    if steps is None:
        steps = range(1, pomdp.H - m + 2)
    return RevealingReport(m, tuple(construct_block_inverse(pomdp, h, m) for h in steps))
