"""Dual functional of polyline-to-atoms optimal transport and its derivatives.

For weights ``phi`` the dual functional is

    g(phi) = sum_(i,a) rho_a * int_{t_s}^{t_e} (|l_a(t) - x_i|^2 - phi_i) dt
             + sum_i m_i phi_i

where ``[t_s, t_e]`` is the time segment ``a`` spends in the Laguerre cell of
``x_i``.  Its gradient is ``m_i - nu(Lag_i)`` and its Hessian is supported on
pairs of cells whose common facet is crossed by some segment.
"""
from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .errors import NearTangentCrossing, TraceStall
from .measures import AtomicMeasure, PolylineMeasure
from .power_diagram import ADJACENCY, NeighborOracle, build_oracle

CHUNK_SEGMENTS = 32
COS_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class SegmentTrace:
    """Ordered cell intervals of every traced segment.

    Flat arrays sorted by segment then time: entry ``k`` says segment
    ``segment[k]`` lies in cell ``cell[k]`` for ``t_start[k] <= t <= t_end[k]``.
    """

    segment: np.ndarray
    cell: np.ndarray
    t_start: np.ndarray
    t_end: np.ndarray
    p: int

    def __len__(self):
        return self.segment.shape[0]

    def entries(self, a: int):
        lo, hi = np.searchsorted(self.segment, [a, a + 1])
        return [(int(self.cell[k]), float(self.t_start[k]), float(self.t_end[k]))
                for k in range(lo, hi)]

    def as_lists(self):
        return [self.entries(a) for a in range(self.p)]

    def cells_of(self, a: int) -> set:
        """Distinct cells met by segment ``a``."""
        lo, hi = np.searchsorted(self.segment, [a, a + 1])
        return set(self.cell[lo:hi].tolist())

    def transitions(self):
        """Indices ``k`` such that entries ``k`` and ``k + 1`` are a crossing."""
        same = self.segment[1:] == self.segment[:-1]
        return np.flatnonzero(same)


@dataclass(frozen=True, eq=False)
class TransportEvaluation:
    phi: np.ndarray
    cost: float
    gradient: np.ndarray
    empty_cells: int
    cell_mass: np.ndarray
    trace: SegmentTrace
    entry_cost: np.ndarray

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.gradient))


@dataclass(frozen=True, eq=False)
class SparseHessian:
    """Hessian of ``g`` in CSR form.

    ``flagged`` counts crossings whose cosine had to be floored; a flagged
    Hessian should not be trusted for a Newton step.
    """

    matrix: sp.csr_matrix
    flagged: int = 0

    def toarray(self):
        return self.matrix.toarray()


def _lift(mu, phi):
    x = mu.positions
    return np.einsum("ij,ij->i", x, x) - phi


def chunk_bounds(p: int, chunk_segments: int = CHUNK_SEGMENTS):
    """Contiguous near-equal chunks of ``range(p)``; depends on ``p`` only."""
    n_chunks = max(1, -(-p // chunk_segments))
    edges = np.linspace(0, p, n_chunks + 1).round().astype(np.int64)
    return list(zip(edges[:-1], edges[1:]))


def default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def next_crossing(mu: AtomicMeasure, nu: PolylineMeasure, phi, oracle: NeighborOracle,
                  segment: int, cell: int, previous: int | None = None, t_now: float = 0.0):
    """Next cell entered by ``segment`` after ``t_now`` while in ``cell``.

    Returns ``(k, t)``, or ``None`` when the segment ends in ``cell``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    V = nu.vertices
    k, t = _kernels.next_crossing(
        mu.positions, _lift(mu, phi), V[segment].copy(), V[segment + 1] - V[segment],
        int(cell), -1 if previous is None else int(previous), float(t_now),
        oracle.indptr, oracle.indices, oracle.brute, oracle.hidden)
    if k < 0:
        return None
    return int(k), float(t)


def _run_chunk(args):
    (X, lift, phi, V, rho, traced, lo, hi, start, indptr, indices, brute, hidden) = args
    cap = 4 * (hi - lo) + 64
    while True:
        seg = np.empty(cap, dtype=np.int64)
        cell = np.empty(cap, dtype=np.int64)
        ts = np.empty(cap)
        te = np.empty(cap)
        cost = np.empty(cap)
        status = _kernels.trace_chunk(X, lift, phi, V, rho, traced, lo, hi, start,
                                      indptr, indices, brute, hidden, seg, cell, ts, te, cost)
        if status == _kernels.STATUS_OVERFLOW:
            cap *= 4
            continue
        if status == _kernels.STATUS_STALL:
            raise TraceStall(f"tracer exceeded its step budget in segments {lo}..{hi - 1}")
        return seg[:status], cell[:status], ts[:status], te[:status], cost[:status]


def _trace_arrays(mu, nu, phi, oracle, threads):
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    lift = _lift(mu, phi)
    start = int(np.argmax(phi))
    traced = nu.traced_segments()
    jobs = [(mu.positions, lift, phi, nu.vertices, nu.densities, traced, lo, hi, start,
             oracle.indptr, oracle.indices, oracle.brute, oracle.hidden)
            for lo, hi in chunk_bounds(nu.p)]
    if threads is None:
        threads = default_threads()
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(job) for job in jobs]
    # merged in chunk order, so results do not depend on the thread count
    return [np.concatenate([part[f] for part in parts]) for f in range(5)]


def trace_polyline(mu: AtomicMeasure, nu: PolylineMeasure, phi, oracle: NeighborOracle = None,
                   threads: int | None = None) -> SegmentTrace:
    """Cell intervals of every segment of ``nu`` in the Laguerre diagram."""
    if oracle is None:
        oracle = build_oracle(mu, phi)
    seg, cell, ts, te, _ = _trace_arrays(mu, nu, phi, oracle, threads)
    return SegmentTrace(seg, cell, ts, te, nu.p)


def evaluate(mu: AtomicMeasure, nu: PolylineMeasure, phi, oracle: NeighborOracle = None, *,
             mode: str = ADJACENCY, threads: int | None = None) -> TransportEvaluation:
    """Value, gradient and empty-cell count of the dual functional at ``phi``.

    If ``oracle`` is omitted one is built for ``phi`` in the given ``mode``.
    Each trace interval is integrated by 2-point Gauss-Legendre, exact for
    the quadratic integrand.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (mu.n,):
        raise ValueError(f"phi must have shape ({mu.n},), got {phi.shape}")
    if not np.all(np.isfinite(phi)):
        raise ValueError("phi has non-finite entries")
    if oracle is None:
        oracle = build_oracle(mu, phi, mode)
    seg, cell, ts, te, cost = _trace_arrays(mu, nu, phi, oracle, threads)
    trace = SegmentTrace(seg, cell, ts, te, nu.p)
    cell_mass = np.bincount(cell, weights=nu.densities[seg] * (te - ts), minlength=mu.n)
    gradient = mu.masses - cell_mass
    value = float(np.sum(cost) + phi @ mu.masses)
    empty = int(np.count_nonzero(cell_mass <= 0.0))
    return TransportEvaluation(phi.copy(), value, gradient, empty, cell_mass, trace, cost)


def hessian(mu: AtomicMeasure, nu: PolylineMeasure, phi, trace: SegmentTrace) -> SparseHessian:
    """Sparse Hessian of ``g`` read off the crossings recorded in ``trace``.

    A crossing of segment ``a`` from cell ``i`` into cell ``j`` adds
    ``rho_a / (2 |x_j - x_i| |cos theta| L_a)`` to ``H_ij`` and ``H_ji``,
    where ``theta`` is the angle between the segment and ``x_j - x_i``.
    The diagonal is minus the off-diagonal row sum, so ``H @ 1 == 0`` holds
    exactly in floating point.
    """
    n = mu.n
    k = trace.transitions()
    a = trace.segment[k]
    i = trace.cell[k]
    j = trace.cell[k + 1]
    rho = nu.densities[a]
    keep = rho > 0
    a, i, j, rho = a[keep], i[keep], j[keep], rho[keep]
    X = mu.positions
    seg_vec = nu.vertices[a + 1] - nu.vertices[a]
    L = nu.lengths[a]
    dx = X[j] - X[i]
    dist = np.linalg.norm(dx, axis=1)
    cos = np.abs(np.einsum("ij,ij->i", seg_vec, dx)) / (L * dist)
    flagged = int(np.count_nonzero(cos < COS_FLOOR))
    if flagged:
        warnings.warn(f"{flagged} near-tangent crossing(s); cosine floored at {COS_FLOOR}",
                      NearTangentCrossing, stacklevel=2)
        cos = np.maximum(cos, COS_FLOOR)
    w = rho / (2.0 * dist * cos * L)
    # Snap the weights to a grid of 2**-52 times (twice) the largest row sum:
    # every partial row sum is then exactly representable, so H @ 1 is exactly
    # zero whatever order a mat-vec adds in.  The perturbation is one ulp of
    # the row sum.
    rows = np.bincount(i, w, n) + np.bincount(j, w, n)
    if w.size and rows.max() > 0:
        q = 2.0 ** (np.floor(np.log2(rows.max())) + 2 - 53)
        w = np.round(w / q) * q
    off = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                        shape=(n, n)).tocsr()
    off.sum_duplicates()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    H = (off + sp.diags(diag)).tocsr()
    H.sort_indices()
    return SparseHessian(H, flagged)


def gershgorin_bound(H) -> float:
    """``2 max_i sum_{j != i} |H_ij|``, a bound on the gradient's Lipschitz constant."""
    M = H.matrix if isinstance(H, SparseHessian) else sp.csr_matrix(H)
    M = M.tocsr()
    absM = abs(M)
    off = np.asarray(absM.sum(axis=1)).ravel() - np.abs(M.diagonal())
    if off.size == 0:
        return 0.0
    return float(2.0 * off.max())
