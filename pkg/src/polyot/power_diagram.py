"""Candidate neighbour sets for Laguerre cells.

The regular triangulation of the sites ``x_i`` with weights ``phi_i`` is the
lower convex hull of the lifted points ``(x_i, |x_i|^2 - phi_i)``.  Two cells
share a facet exactly when their sites are joined by an edge of that lower
hull, so edge lists of the lower facets give neighbour sets with no false
negatives.  Extra candidates only cost time in the tracer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import DegenerateInput
from .measures import AtomicMeasure

log = logging.getLogger(__name__)

ADJACENCY = "adjacency"
BRUTE_FORCE = "brute_force"


@dataclass(frozen=True, eq=False)
class NeighborOracle:
    """Per-site candidate neighbour lists in CSR layout.

    In brute-force mode ``indptr``/``indices`` are empty and every site is a
    candidate for every other.
    """

    mode: str
    n: int
    indptr: np.ndarray
    indices: np.ndarray
    hidden: np.ndarray

    @property
    def brute(self) -> bool:
        return self.mode == BRUTE_FORCE

    def neighbors(self, i: int) -> np.ndarray:
        if self.brute:
            return np.delete(np.arange(self.n), i)
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def pairs(self) -> set:
        """All unordered candidate pairs ``(i, j)`` with ``i < j``."""
        if self.brute:
            return {(i, j) for i in range(self.n) for j in range(i + 1, self.n)}
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        keep = rows < self.indices
        return set(zip(rows[keep].tolist(), self.indices[keep].tolist()))


def _brute_oracle(n: int) -> NeighborOracle:
    empty = np.zeros(0, dtype=np.int64)
    return NeighborOracle(BRUTE_FORCE, n, np.zeros(n + 1, dtype=np.int64), empty,
                          np.zeros(n, dtype=bool))


def _csr_from_pairs(n, a, b):
    """Symmetric CSR adjacency from undirected pairs (duplicates allowed)."""
    rows = np.concatenate([a, b])
    cols = np.concatenate([b, a])
    key = np.unique(rows * n + cols)
    rows, cols = key // n, key % n
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    return np.cumsum(indptr), cols.astype(np.int64)


def regular_triangulation(positions, phi):
    """Lower-hull simplices of the lifted sites.

    Returns ``(lower, loose)``: simplices of strictly lower facets, and those
    of all facets that are not strictly upper (vertical facets included).
    Raises :class:`DegenerateInput` if qhull cannot build the hull.
    """
    x = np.asarray(positions, dtype=np.float64)
    n, d = x.shape
    if n < d + 2:
        raise DegenerateInput(f"{n} sites cannot span a {d}-dimensional triangulation")
    lifted = np.column_stack([x, np.einsum("ij,ij->i", x, x) - phi])
    # Qt: triangulate merged facets, which can only add candidate edges.
    try:
        hull = ConvexHull(lifted, qhull_options="Qt Qbb Qc")
    except (QhullError, ValueError) as exc:
        raise DegenerateInput(str(exc)) from exc
    normal_last = hull.equations[:, d]
    normal_scale = np.linalg.norm(hull.equations[:, :d + 1], axis=1)
    eps = 1e-12 * normal_scale
    lower = hull.simplices[normal_last < -eps]
    loose_mask = normal_last <= eps
    loose = hull.simplices[loose_mask]
    # points qhull judged coplanar with a facet are not vertices; tie them to
    # that facet's vertices so their tiny cells keep candidate neighbours
    cop = hull.coplanar
    if cop.size:
        cop = cop[loose_mask[cop[:, 1]]]
        verts = hull.simplices[cop[:, 1]]
        rows = [np.column_stack([cop[:, 0], np.delete(verts, s, axis=1)])
                for s in range(verts.shape[1])]
        loose = np.vstack([loose] + rows)
    return lower, loose


def build_oracle(mu: AtomicMeasure, phi, mode: str = ADJACENCY) -> NeighborOracle:
    """Neighbour oracle for the Laguerre diagram of ``mu`` under weights ``phi``.

    Falls back to brute force when the sites cannot be triangulated.
    Hidden sites (empty power cells) borrow the neighbour list of the
    non-hidden site closest in power distance, and are then added to the
    lists of those neighbours so the lists stay symmetric.
    """
    phi = np.asarray(phi, dtype=np.float64)
    n = mu.n
    if phi.shape != (n,):
        raise ValueError(f"phi must have shape ({n},), got {phi.shape}")
    if mode == BRUTE_FORCE:
        return _brute_oracle(n)
    if mode != ADJACENCY:
        raise ValueError(f"unknown oracle mode {mode!r}")
    x = mu.positions
    try:
        lower, loose = regular_triangulation(x, phi)
    except DegenerateInput as exc:
        log.debug("falling back to brute-force neighbours: %s", exc)
        return _brute_oracle(n)

    k = loose.shape[1]
    ia, ib = np.triu_indices(k, 1)
    a = loose[:, ia].ravel()
    b = loose[:, ib].ravel()

    hidden = np.ones(n, dtype=bool)
    hidden[np.unique(lower)] = False
    if hidden.all():
        return _brute_oracle(n)
    if hidden.any():
        a, b = _borrow_for_hidden(x, phi, hidden, a, b, n)
    indptr, indices = _csr_from_pairs(n, a, b)
    return NeighborOracle(ADJACENCY, n, indptr, indices, hidden)


def _borrow_for_hidden(x, phi, hidden, a, b, n):
    indptr, indices = _csr_from_pairs(n, a, b)
    visible = np.flatnonzero(~hidden)
    hid = np.flatnonzero(hidden)
    # power-nearest visible site == Euclidean nearest after lifting by sqrt(M - phi)
    lift = np.sqrt(phi[visible].max() - phi[visible])
    tree = cKDTree(np.column_stack([x[visible], lift]))
    _, nearest = tree.query(np.column_stack([x[hid], np.zeros(hid.shape[0])]))
    host = visible[nearest]
    counts = indptr[host + 1] - indptr[host]
    starts = np.repeat(indptr[host], counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    borrowed = indices[starts + offsets]
    owner = np.repeat(hid, counts)
    keep = borrowed != owner
    return (np.concatenate([a, owner[keep], hid]),
            np.concatenate([b, borrowed[keep], host]))
