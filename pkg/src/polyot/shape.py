"""Optimisation of polyline vertices against a point cloud.

``G(P) = max_phi g(phi, P)`` is the squared Wasserstein distance.  At the
optimal ``phi`` its derivative is the partial derivative of ``g`` with
``phi`` frozen, which only needs the cell intervals of each segment.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .errors import AdmmMaxIterations, InnerSolveFailed, StaleDual
from .measures import AtomicMeasure, PolylineMeasure
from .solvers import SolverConfig, solve
from .transport import TransportEvaluation, evaluate

log = logging.getLogger(__name__)

_GL = 1.0 / np.sqrt(3.0)


@dataclass(frozen=True, eq=False)
class ShapeGradient:
    """Vertex gradient of ``G``.

    ``partial`` keeps the segment masses fixed; ``density_term`` is the
    chain-rule contribution of masses tied to segment lengths.
    ``density_derivative[a]`` is ``dG/drho_a``.
    """

    partial: np.ndarray
    density_term: np.ndarray
    density_derivative: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.partial + self.density_term

    def max_norm(self) -> float:
        return float(np.abs(self.total).max())


@dataclass(frozen=True)
class KinematicConstraints:
    """Bounds on segment length (``K1``) and on second differences (``K2``)."""

    K1: float = np.inf
    K2: float = np.inf

    def __post_init__(self):
        if not (self.K1 > 0 and self.K2 > 0):
            raise ValueError("K1 and K2 must be positive (use inf to disable)")

    def violation(self, vertices) -> float:
        """Largest amount by which ``vertices`` exceed either bound."""
        V = np.asarray(vertices, dtype=np.float64)
        worst = 0.0
        if np.isfinite(self.K1) and V.shape[0] >= 2:
            worst = max(worst, np.linalg.norm(np.diff(V, axis=0), axis=1).max() - self.K1)
        if np.isfinite(self.K2) and V.shape[0] >= 3:
            acc = 2 * V[1:-1] - V[:-2] - V[2:]
            worst = max(worst, np.linalg.norm(acc, axis=1).max() - self.K2)
        return max(worst, 0.0)


@dataclass
class AdmmConfig:
    """ADMM settings; ``penalty`` is the initial value when ``adaptive``.

    With ``adaptive`` the penalty is rescaled by ``2`` whenever the primal
    and dual residuals differ by more than a factor ``balance``.
    """

    penalty: float = 1.0
    tol: float = 1e-8
    max_iter: int = 5000
    adaptive: bool = True
    balance: float = 2.0


@dataclass
class ShapeConfig:
    max_iter: int = 200
    grad_threshold: float = 1e-3
    step_scale: float = 0.5
    constraints: Optional[KinematicConstraints] = None
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    backtracking: bool = False
    max_halvings: int = 8
    dump_every: Optional[int] = None
    dump: Optional[Callable] = None


@dataclass
class ShapeRecord:
    iteration: int
    G: float
    grad_inf: float
    inner_iterations: int
    inner_grad_norm: float


@dataclass
class ShapeHistory:
    records: list = field(default_factory=list)
    converged: bool = False

    def __len__(self):
        return len(self.records)

    @property
    def G(self):
        return np.array([r.G for r in self.records])

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "G", "grad_inf", "inner_iterations", "inner_grad_norm"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.G), repr(r.grad_inf), r.inner_iterations,
                            repr(r.inner_grad_norm)])


def _segment_integrals(mu, nu, trace):
    """Per-entry ``int (1-t) dt``, ``int t dt`` and ``int |l(t)-x|^2 - phi`` pieces."""
    ts, te = trace.t_start, trace.t_end
    length = te - ts
    int_t = 0.5 * (te * te - ts * ts)
    int_1mt = length - int_t
    return length, int_t, int_1mt


def shape_gradient(mu: AtomicMeasure, nu: PolylineMeasure, phi, evaluation: TransportEvaluation = None,
                   tol: float = None, length_densities: bool = True) -> ShapeGradient:
    """Gradient of ``G`` with respect to the vertices, at optimal ``phi``.

    For vertex ``a`` the fixed-mass part is

        rho_{a-1} (P_a + (P_{a-1} - P_a)/3 - 2 sum_i x_i int t dt)
      + rho_a     (P_a + (P_{a+1} - P_a)/3 - 2 sum_i x_i int (1 - t) dt)

    the integrals running over the cell intervals of the two neighbouring
    segments.  With ``length_densities`` the masses follow the segment
    lengths and the chain-rule term through ``rho(P)`` is added.

    Raises :class:`StaleDual` if ``tol`` is given and the dual gradient
    norm at ``phi`` exceeds ``10 * tol``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    ev = evaluation if evaluation is not None else evaluate(mu, nu, phi)
    if tol is not None and ev.grad_norm > 10 * tol:
        raise StaleDual(f"dual gradient norm {ev.grad_norm:.3e} exceeds 10 x {tol:.1e}")
    tr = ev.trace
    X, V, rho = mu.positions, nu.vertices, nu.densities
    p, d = nu.p, nu.dim
    seg, cell = tr.segment, tr.cell
    length, int_t, int_1mt = _segment_integrals(mu, nu, tr)
    w = rho[seg]

    partial = np.zeros((p + 1, d))
    np.add.at(partial, seg, (-2.0 * (w * int_1mt))[:, None] * X[cell])
    np.add.at(partial, seg + 1, (-2.0 * (w * int_t))[:, None] * X[cell])
    traced = nu.traced_segments()
    start, end = V[:-1], V[1:]
    near_start = start + (end - start) / 3.0
    near_end = end + (start - end) / 3.0
    partial[:-1] += np.where(traced, rho, 0.0)[:, None] * near_start
    partial[1:] += np.where(traced, rho, 0.0)[:, None] * near_end

    # dG/drho_a = int over segment a of |l(t) - x_i|^2 - phi_i
    half, mid = 0.5 * length, 0.5 * (tr.t_start + tr.t_end)
    D = V[seg + 1] - V[seg]
    acc = np.zeros_like(half)
    for node in (mid - half * _GL, mid + half * _GL):
        diff = V[seg] + node[:, None] * D - X[cell]
        acc += half * (np.einsum("ij,ij->i", diff, diff) - phi[cell])
    c = np.bincount(seg, weights=acc, minlength=p)

    density_term = np.zeros((p + 1, d))
    if length_densities:
        active = traced.copy()
        L = nu.lengths
        S = L[active].sum()
        if S > 0:
            rho_len = np.where(active, L, 0.0) / S
            dG_dL = np.where(active, (c - c @ rho_len) / S, 0.0)
            unit = np.zeros((p, d))
            nz = L > 0
            unit[nz] = (end - start)[nz] / L[nz, None]
            contrib = dG_dL[:, None] * unit
            density_term[:-1] -= contrib
            density_term[1:] += contrib
    return ShapeGradient(partial, density_term, c)


def barycenter_diagnostic(mu: AtomicMeasure, nu: PolylineMeasure, phi, trace=None):
    """Segment centres ``c_a`` and time-averaged Dirac positions ``xbar_a``.

    For an isolated segment ``(dG/dP_a + dG/dP_{a+1}) / 2 = rho_a (c_a - xbar_a)``.
    """
    if trace is None:
        trace = evaluate(mu, nu, phi).trace
    V = nu.vertices
    centers = 0.5 * (V[:-1] + V[1:])
    xbar = np.zeros_like(centers)
    np.add.at(xbar, trace.segment, (trace.t_end - trace.t_start)[:, None] * mu.positions[trace.cell])
    return centers, xbar


def metric_diagonal(densities) -> np.ndarray:
    """Per-vertex metric ``(rho_{a-1} + rho_a) / 2`` with zero mass past the ends."""
    rho = np.asarray(densities, dtype=np.float64)
    padded = np.concatenate([[0.0], rho, [0.0]])
    return 0.5 * (padded[:-1] + padded[1:])


def _difference_ops(m):
    """Dense-free first and second difference stencils as callables."""
    def d1(Q):
        return Q[1:] - Q[:-1]

    def d1t(U):
        out = np.zeros((U.shape[0] + 1, U.shape[1]))
        out[1:] += U
        out[:-1] -= U
        return out

    def d2(Q):
        return 2 * Q[1:-1] - Q[:-2] - Q[2:]

    def d2t(W):
        out = np.zeros((W.shape[0] + 2, W.shape[1]))
        out[1:-1] += 2 * W
        out[:-2] -= W
        out[2:] -= W
        return out

    return d1, d1t, d2, d2t


def _gram_banded(m, use1, use2, pen):
    """Upper banded form of ``I + pen (D1^T D1 + D2^T D2)`` for ``m`` vertices."""
    ab = np.zeros((3, m))
    diag, off1, off2 = ab[2], ab[1, 1:], ab[0, 2:]
    diag += 1.0
    if use1 and m >= 2:
        # D1^T D1: tridiagonal (1, 2, ..., 2, 1) / -1
        dd = np.full(m, 2.0)
        dd[0] = dd[-1] = 1.0
        diag += pen * dd
        off1 += pen * -1.0
    if use2 and m >= 3:
        # D2^T D2 from stencil (-1, 2, -1) at rows 1..m-2
        k = np.arange(1, m - 1)
        dd = np.zeros(m)
        np.add.at(dd, k - 1, 1.0)
        np.add.at(dd, k, 4.0)
        np.add.at(dd, k + 1, 1.0)
        o1 = np.zeros(m - 1)
        np.add.at(o1, k - 1, -2.0)
        np.add.at(o1, k, -2.0)
        o2 = np.ones(m - 2)
        diag += pen * dd
        off1 += pen * o1
        off2 += pen * o2
    return ab


def _project_rows(Z, radius):
    if not np.isfinite(radius):
        return Z
    norms = np.linalg.norm(Z, axis=1)
    scale = np.where(norms > radius, radius / np.maximum(norms, 1e-300), 1.0)
    return Z * scale[:, None]


def project_kinematic(vertices, constraints: KinematicConstraints, config: AdmmConfig = None,
                      return_info: bool = False):
    """Euclidean projection of a polyline onto the kinematic constraint set.

    ADMM on the splitting ``u = D1 Q`` (rows in the ball of radius ``K1``)
    and ``w = D2 Q`` (rows in the ball of radius ``K2``), with scaled dual
    variables.  The ``Q``-update solves the banded system
    ``(I + pen (D1^T D1 + D2^T D2)) Q = P + pen D1^T (u - y1) + pen D2^T (w - y2)``
    whose Cholesky factor is computed once.

    Stops when primal and dual residual norms are both below ``config.tol``.
    On the iteration cap an :class:`AdmmMaxIterations` warning is issued and
    the iterate with the smallest primal residual is returned.
    """
    config = config or AdmmConfig()
    P = np.array(vertices, dtype=np.float64)
    m = P.shape[0]
    use1 = np.isfinite(constraints.K1) and m >= 2
    use2 = np.isfinite(constraints.K2) and m >= 3
    info = {"iterations": 0, "primal": 0.0, "dual": 0.0, "converged": True}
    if not (use1 or use2):
        return (P, info) if return_info else P

    pen = config.penalty
    d1, d1t, d2, d2t = _difference_ops(m)
    chol = cholesky_banded(_gram_banded(m, use1, use2, pen))

    Q = P.copy()
    u = _project_rows(d1(Q), constraints.K1) if use1 else None
    w = _project_rows(d2(Q), constraints.K2) if use2 else None
    y1 = np.zeros_like(u) if use1 else None
    y2 = np.zeros_like(w) if use2 else None
    best = (np.inf, Q)
    r = s = np.inf
    for it in range(1, config.max_iter + 1):
        rhs = P.copy()
        if use1:
            rhs += pen * d1t(u - y1)
        if use2:
            rhs += pen * d2t(w - y2)
        Q = cho_solve_banded((chol, False), rhs)
        r2 = 0.0
        dual = np.zeros_like(Q)
        if use1:
            a = d1(Q)
            u_old = u
            u = _project_rows(a + y1, constraints.K1)
            y1 += a - u
            r2 += np.sum((a - u) ** 2)
            dual += d1t(u - u_old)
        if use2:
            b = d2(Q)
            w_old = w
            w = _project_rows(b + y2, constraints.K2)
            y2 += b - w
            r2 += np.sum((b - w) ** 2)
            dual += d2t(w - w_old)
        r = np.sqrt(r2)
        s = pen * np.linalg.norm(dual)
        if r < best[0]:
            best = (r, Q)
        if r <= config.tol and s <= config.tol:
            info.update(iterations=it, primal=r, dual=s, penalty=pen)
            return (Q, info) if return_info else Q
        if config.adaptive and (r > config.balance * s or s > config.balance * r):
            factor = 2.0 if r > s else 0.5
            pen *= factor
            # scaled duals follow the penalty
            if use1:
                y1 /= factor
            if use2:
                y2 /= factor
            chol = cholesky_banded(_gram_banded(m, use1, use2, pen))
    info.update(iterations=config.max_iter, primal=best[0], dual=s, converged=False)
    warnings.warn(f"ADMM hit {config.max_iter} iterations (primal {r:.2e}, dual {s:.2e})",
                  AdmmMaxIterations, stacklevel=2)
    return (best[1], info) if return_info else best[1]


def _inner_solve(mu, nu, phi, solver_config):
    phi, hist = solve(mu, nu, phi, solver_config)
    ev = hist.final
    if ev.grad_norm > 10 * solver_config.grad_tol:
        raise InnerSolveFailed(f"inner transport solve stalled at |grad| = {ev.grad_norm:.3e}")
    return phi, hist


def optimize_polyline(mu: AtomicMeasure, nu_init: PolylineMeasure,
                      solver_config: SolverConfig = None, shape_config: ShapeConfig = None,
                      phi_init=None):
    """Metric gradient descent on the vertices (one outer step per transport solve).

    Each outer iteration moves vertex ``a`` by ``-step_scale * grad_a / sigma_a``
    with ``sigma_a = (rho_{a-1} + rho_a) / 2``, optionally projects onto the
    kinematic constraints, resets the masses to the normalised lengths and
    re-solves the dual from the previous ``phi``.  Vertices whose metric
    entry is below ``1e-12`` are not moved.

    Returns ``(nu, history, phi)``.  If an inner solve fails,
    :class:`InnerSolveFailed` is raised with ``polyline``, ``history`` and
    ``phi`` attributes holding the last good state.
    """
    solver_config = solver_config or SolverConfig()
    cfg = shape_config or ShapeConfig()
    nu = PolylineMeasure.from_vertices(nu_init.vertices, nu_init.disjoint_mode)
    if cfg.constraints is not None:
        nu = nu.with_vertices(project_kinematic(nu.vertices, cfg.constraints, cfg.admm))
    history = ShapeHistory()

    try:
        phi, inner = _inner_solve(mu, nu, phi_init, solver_config)
    except InnerSolveFailed as exc:
        exc.polyline, exc.history, exc.phi = nu, history, phi_init
        raise
    ev = inner.final
    grad = shape_gradient(mu, nu, phi, ev, tol=solver_config.grad_tol)
    history.records.append(ShapeRecord(0, ev.cost, grad.max_norm(), inner.iterations, ev.grad_norm))

    for it in range(1, cfg.max_iter + 1):
        sigma = metric_diagonal(nu.densities)
        movable = sigma > 1e-12
        direction = np.zeros_like(nu.vertices)
        direction[movable] = grad.total[movable] / sigma[movable, None]
        scale = cfg.step_scale
        for attempt in range(cfg.max_halvings + 1):
            V = nu.vertices - scale * direction
            if cfg.constraints is not None:
                V = project_kinematic(V, cfg.constraints, cfg.admm)
            trial = nu.with_vertices(V)
            try:
                new_phi, new_inner = _inner_solve(mu, trial, phi, solver_config)
            except InnerSolveFailed as exc:
                exc.polyline, exc.history, exc.phi = nu, history, phi
                raise
            if not cfg.backtracking or new_inner.final.cost <= ev.cost:
                break
            scale *= 0.5
        nu, phi, inner = trial, new_phi, new_inner
        ev = inner.final
        grad = shape_gradient(mu, nu, phi, ev, tol=solver_config.grad_tol)
        history.records.append(ShapeRecord(it, ev.cost, grad.max_norm(), inner.iterations,
                                           ev.grad_norm))
        log.info("outer %4d  G=%.10g  |dG|_inf=%.3e  inner=%d", it, ev.cost, grad.max_norm(),
                 inner.iterations)
        if cfg.dump is not None and cfg.dump_every and it % cfg.dump_every == 0:
            cfg.dump(it, nu)
        if grad.max_norm() < cfg.grad_threshold:
            history.converged = True
            break
    return nu, history, phi
