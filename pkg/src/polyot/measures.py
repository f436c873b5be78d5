"""Atomic and polyline probability measures.

An :class:`AtomicMeasure` is a weighted point cloud ``sum_i m_i delta_{x_i}``.
A :class:`PolylineMeasure` is carried by the chain ``P_0, ..., P_p``; segment
``a`` holds the *total* mass ``rho_a`` spread uniformly in the segment
parameter ``t in [0, 1]``, so its per-unit-length density is
``rho_a / |P_{a+1} - P_a|``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ZeroTotalLength, ZeroTotalMass

MASS_TOL = 1e-12


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AtomicMeasure:
    """Dirac masses at ``positions`` (shape ``(n, d)``) with weights ``masses``."""

    positions: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        m = np.asarray(self.masses, dtype=np.float64).ravel()
        if x.ndim != 2 or x.shape[1] not in (2, 3):
            raise ValueError(f"positions must have shape (n, 2) or (n, 3), got {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("an atomic measure needs at least one Dirac")
        if m.shape[0] != x.shape[0]:
            raise ValueError("positions and masses differ in length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(m))):
            raise ValueError("non-finite positions or masses")
        if np.any(m < 0):
            raise ValueError("masses must be nonnegative")
        object.__setattr__(self, "positions", _frozen(x))
        object.__setattr__(self, "masses", _frozen(m))

    @classmethod
    def uniform(cls, positions):
        positions = np.atleast_2d(positions)
        n = positions.shape[0]
        return cls(positions, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def translated(self, v) -> "AtomicMeasure":
        return AtomicMeasure(self.positions + np.asarray(v, dtype=float), self.masses)

    def has_distinct_positions(self) -> bool:
        uniq = np.unique(self.positions, axis=0)
        return uniq.shape[0] == self.n


@dataclass(frozen=True, eq=False)
class PolylineMeasure:
    """Measure carried by the open polyline through ``vertices``.

    ``densities[a]`` is the total mass of segment ``a`` (between vertices
    ``a`` and ``a + 1``).  In ``disjoint_mode`` the odd segments are breaks
    and must carry zero mass; the even segments then act as separate pieces.
    """

    vertices: np.ndarray
    densities: np.ndarray
    disjoint_mode: bool = False
    _lengths: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vertices, dtype=np.float64))
        rho = np.asarray(self.densities, dtype=np.float64).ravel()
        if v.ndim != 2 or v.shape[1] not in (2, 3):
            raise ValueError(f"vertices must have shape (p+1, 2) or (p+1, 3), got {v.shape}")
        if v.shape[0] < 2:
            raise ValueError("a polyline needs at least two vertices")
        if rho.shape[0] != v.shape[0] - 1:
            raise ValueError("need exactly one density per segment")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(rho))):
            raise ValueError("non-finite vertices or densities")
        if np.any(rho < 0):
            raise ValueError("densities must be nonnegative")
        lengths = np.linalg.norm(np.diff(v, axis=0), axis=1)
        if np.any((rho > 0) & (lengths == 0)):
            raise ValueError("a segment with positive mass has zero length")
        if self.disjoint_mode and np.any(rho[1::2] != 0):
            raise ValueError("disjoint_mode requires zero density on odd segments")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "densities", _frozen(rho))
        object.__setattr__(self, "disjoint_mode", bool(self.disjoint_mode))
        object.__setattr__(self, "_lengths", _frozen(lengths))

    @classmethod
    def from_vertices(cls, vertices, disjoint_mode=False) -> "PolylineMeasure":
        """Polyline whose segment masses are proportional to segment lengths."""
        return cls(vertices, density_from_lengths(vertices, disjoint_mode), disjoint_mode)

    @property
    def p(self) -> int:
        return self.vertices.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self._lengths

    def traced_segments(self) -> np.ndarray:
        """Boolean mask of the segments the tracer visits."""
        mask = np.ones(self.p, dtype=bool)
        if self.disjoint_mode:
            mask[1::2] = False
        return mask

    def with_vertices(self, vertices, renormalize=True) -> "PolylineMeasure":
        if renormalize:
            return PolylineMeasure.from_vertices(vertices, self.disjoint_mode)
        return replace(self, vertices=vertices)

    def translated(self, v) -> "PolylineMeasure":
        return replace(self, vertices=self.vertices + np.asarray(v, dtype=float))


def normalize(measure):
    """Rescale masses (or densities) so they sum to one.

    Raises :class:`ZeroTotalMass` when every weight is zero.
    """
    if isinstance(measure, AtomicMeasure):
        total = measure.masses.sum()
        if not total > 0:
            raise ZeroTotalMass("atomic measure has zero total mass")
        return AtomicMeasure(measure.positions, measure.masses / total)
    if isinstance(measure, PolylineMeasure):
        total = measure.densities.sum()
        if not total > 0:
            raise ZeroTotalMass("polyline measure has zero total mass")
        return replace(measure, densities=measure.densities / total)
    raise TypeError(f"cannot normalize {type(measure).__name__}")


def density_from_lengths(vertices, disjoint_mode: bool = False) -> np.ndarray:
    """Segment masses proportional to segment lengths.

    In ``disjoint_mode`` only even segments are counted and odd ones get 0.
    """
    v = np.atleast_2d(np.asarray(vertices, dtype=np.float64))
    if v.shape[0] < 2:
        raise ValueError("need at least two vertices")
    lengths = np.linalg.norm(np.diff(v, axis=0), axis=1)
    if disjoint_mode:
        lengths = lengths.copy()
        lengths[1::2] = 0.0
    total = lengths.sum()
    if not total > 0:
        raise ZeroTotalLength("all active segments are degenerate")
    return lengths / total


def density_length_jacobian(vertices, disjoint_mode: bool = False) -> np.ndarray:
    """Derivative of :func:`density_from_lengths` with respect to the vertices.

    Returns ``J`` of shape ``(p, p+1, d)`` with ``J[b, a] = d rho_b / d P_a``.
    Only used for small problems; see ``shape.shape_gradient`` for the
    contracted form used in optimisation.
    """
    v = np.atleast_2d(np.asarray(vertices, dtype=np.float64))
    p, d = v.shape[0] - 1, v.shape[1]
    diff = np.diff(v, axis=0)
    lengths = np.linalg.norm(diff, axis=1)
    active = np.ones(p, dtype=bool)
    if disjoint_mode:
        active[1::2] = False
    total = lengths[active].sum()
    unit = np.zeros_like(diff)
    nz = lengths > 0
    unit[nz] = diff[nz] / lengths[nz, None]
    # dL_g/dP_g = -u_g, dL_g/dP_{g+1} = u_g
    dL = np.zeros((p, p + 1, d))
    for g in np.flatnonzero(active):
        dL[g, g] = -unit[g]
        dL[g, g + 1] = unit[g]
    rho = np.where(active, lengths, 0.0) / total
    J = dL / total - rho[:, None, None] * dL.sum(axis=0)[None] / total
    J[~active] = 0.0
    return J


def check_genericity(mu: AtomicMeasure, nu: PolylineMeasure, tolerance: float = 1e-12):
    """List the ``(segment, i, j)`` triples, ``i < j``, that violate genericity.

    A triple is reported when the segment direction is orthogonal, up to the
    relative ``tolerance``, to ``x_i - x_j``.  Cost is ``O(p n^2)``; meant for
    test-sized inputs.
    """
    x = mu.positions
    seg = np.diff(nu.vertices, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    iu, ju = np.triu_indices(mu.n, k=1)
    dx = x[iu] - x[ju]
    dx_len = np.linalg.norm(dx, axis=1)
    out = []
    for a in range(nu.p):
        inner = np.abs(dx @ seg[a])
        bad = np.flatnonzero(inner <= tolerance * seg_len[a] * dx_len)
        out.extend((a, int(iu[k]), int(ju[k])) for k in bad)
    return out
