"""Maximisation of the concave dual functional over the weights ``phi``.

``solve`` runs L-BFGS or the hybrid scheme (L-BFGS while some Laguerre cell
is empty, Newton once every cell receives mass).  ``solve_first_order``
runs gradient ascent, global Barzilai-Borwein or Nesterov's method.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .errors import LineSearchFailure, NearTangentCrossing
from .measures import AtomicMeasure, PolylineMeasure
from .power_diagram import ADJACENCY
from .transport import TransportEvaluation, evaluate, gershgorin_bound, hessian

log = logging.getLogger(__name__)

METHODS = ("gradient", "bb", "nesterov", "lbfgs", "hybrid")
QUASI_NEWTON = "quasi-newton"
NEWTON = "newton"
SHIFT = "component-shift"
FIRST_ORDER = "first-order"


STALL_LIMIT = 3


def LIFT_LIMIT(n):
    return max(10, n // 10)


@dataclass
class SolverConfig:
    method: str = "hybrid"
    grad_tol: float = 1e-6
    outer_max: int = 1000
    lbfgs_memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    nesterov_L: Optional[float] = None
    fixed_step: Optional[float] = None
    max_line_evals: int = 50
    newton_rtol: float = 1e-6
    newton_min_step: float = 0.01
    bb_memory: int = 10
    lift_empty: bool = True
    oracle_mode: str = ADJACENCY
    threads: Optional[int] = None
    seed: Optional[int] = None
    verbose: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.outer_max < 1 or self.lbfgs_memory < 1:
            raise ValueError("outer_max and lbfgs_memory must be at least 1")


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    grad_norm: float
    step: float
    empty_cells: int
    branch: str


@dataclass
class ConvergenceHistory:
    records: list = field(default_factory=list)
    converged: bool = False
    evaluations: int = 0
    final: Optional[TransportEvaluation] = None

    def append(self, *args):
        self.records.append(IterationRecord(*args))

    def __len__(self):
        return len(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def costs(self):
        return self.column("cost")

    @property
    def grad_norms(self):
        return self.column("grad_norm")

    @property
    def iterations(self) -> int:
        return self.records[-1].iteration if self.records else 0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "cost", "grad_norm", "step", "empty_cells", "branch"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.cost), repr(r.grad_norm), repr(r.step),
                            r.empty_cells, r.branch])


@dataclass
class LineSearchResult:
    step: float
    value: float
    gradient: np.ndarray
    payload: object
    evaluations: int


def wolfe_line_search(fun: Callable, phi, direction, s0: float = 1.0, value0=None,
                      grad0=None, c1: float = 1e-4, c2: float = 0.9,
                      max_evals: int = 50, s_max: float = 1e10) -> LineSearchResult:
    """Strong-Wolfe step for *maximising* along an ascent direction.

    ``fun(phi)`` must return ``(value, gradient, payload)``.  The accepted
    step ``s`` satisfies

        g(phi + s d) >= g(phi) + c1 s <grad, d>
        |<grad(phi + s d), d>| <= c2 |<grad, d>|

    Bracketing then zoom with safeguarded quadratic interpolation.
    Raises ``ValueError`` if ``d`` is not an ascent direction and
    :class:`LineSearchFailure` once ``max_evals`` evaluations are spent.
    """
    phi = np.asarray(phi, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if value0 is None or grad0 is None:
        value0, grad0, _ = fun(phi)
    # work with f = -g (minimisation) internally
    f0 = -value0
    df0 = -float(grad0 @ d)
    if not df0 < 0:
        raise ValueError("direction is not an ascent direction")

    evals = 0
    best = None

    def probe(s):
        nonlocal evals, best
        evals += 1
        v, gr, payload = fun(phi + s * d)
        f, df = -v, -float(gr @ d)
        if f <= f0 + c1 * s * df0 and (best is None or f < -best[1]):
            best = (s, v, gr, payload)
        return f, df, v, gr, payload

    def done(s, v, gr, payload):
        return LineSearchResult(s, v, gr, payload, evals)

    def zoom(lo, f_lo, df_lo, hi, f_hi):
        while evals < max_evals:
            width = hi - lo
            # quadratic through (lo, f_lo, df_lo) and (hi, f_hi)
            denom = 2.0 * (f_hi - f_lo - df_lo * width)
            s = lo - df_lo * width * width / denom if denom > 0 else lo + 0.5 * width
            a, b = sorted((lo, hi))
            margin = 0.1 * (b - a)
            if not (a + margin <= s <= b - margin):
                s = 0.5 * (lo + hi)
            f, df, v, gr, payload = probe(s)
            if f > f0 + c1 * s * df0 or f >= f_lo:
                hi, f_hi = s, f
            else:
                if abs(df) <= -c2 * df0:
                    return done(s, v, gr, payload)
                if df * (hi - lo) >= 0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, df_lo = s, f, df
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        raise LineSearchFailure("zoom exhausted its evaluation budget", best)

    s_prev, f_prev, df_prev = 0.0, f0, df0
    s = float(s0)
    while evals < max_evals:
        f, df, v, gr, payload = probe(s)
        if f > f0 + c1 * s * df0 or (evals > 1 and f >= f_prev):
            return zoom(s_prev, f_prev, df_prev, s, f)
        if abs(df) <= -c2 * df0:
            return done(s, v, gr, payload)
        if df >= 0:
            return zoom(s, f, df, s_prev, f_prev)
        s_prev, f_prev, df_prev = s, f, df
        s = min(2.0 * s, s_max)
    raise LineSearchFailure("bracketing exhausted its evaluation budget", best)


class LBFGSMemory:
    """Curvature pairs for the two-loop recursion, stored for ``-g``.

    ``add(s, y)`` takes the step ``s`` and ``y = grad_old - grad_new`` of the
    concave ``g``, i.e. the gradient change of the convex ``-g``.
    """

    def __init__(self, size: int):
        self.pairs = deque(maxlen=size)

    def __len__(self):
        return len(self.pairs)

    def reset(self):
        self.pairs.clear()

    def add(self, s, y) -> bool:
        sy = float(s @ y)
        if not sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        self.pairs.append((s, y, 1.0 / sy))
        return True

    def direction(self, grad):
        """Ascent direction ``H_k grad`` with ``H_k`` the inverse-Hessian model of ``-g``."""
        q = np.array(grad, dtype=np.float64)
        if not self.pairs:
            return q
        alphas = []
        for s, y, r in reversed(self.pairs):
            a = r * (s @ q)
            q -= a * y
            alphas.append(a)
        s, y, _ = self.pairs[-1]
        q *= (s @ y) / (y @ y)
        for (s, y, r), a in zip(self.pairs, reversed(alphas)):
            b = r * (y @ q)
            q += (a - b) * s
        return q


def newton_direction(H, grad, rtol: float = 1e-6):
    """Solve ``H d = -grad`` on the complement of the kernel of ``H``.

    ``H`` is negative semidefinite with ``H 1 = 0``; its kernel holds the
    indicator of every connected component of its sparsity graph (several
    when the support has separate pieces).  One coordinate per component is
    pinned to zero, the reduced system is factorised, the result is refined
    once and re-centred per component.  The mean gradient of each component
    lies in the kernel and is dropped (see :func:`component_shift`).
    Returns ``None`` when the reduced system is singular or the residual
    exceeds ``rtol`` times the solvable part of ``grad``.
    """
    M = H.matrix if hasattr(H, "matrix") else sp.csr_matrix(H)
    n = M.shape[0]
    if n == 1:
        return np.zeros(1)
    grad = np.asarray(grad, dtype=np.float64)
    ncomp, label = connected_components(M, directed=False)
    diag = np.abs(M.diagonal())
    counts = np.bincount(label, minlength=ncomp)
    mean_g = np.bincount(label, grad, ncomp) / counts
    rhs = grad - mean_g[label] if ncomp > 1 else grad
    # pin the largest-curvature node of each component
    order = np.lexsort((-diag, label))
    pins = order[np.concatenate([[0], np.cumsum(counts)[:-1]])]
    keep = np.setdiff1d(np.arange(n), pins)
    d = np.zeros(n)
    if keep.size:
        A = (-M)[keep][:, keep].tocsc()
        b = rhs[keep]
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                lu = splu(A)
                z = lu.solve(b)
                z += lu.solve(b - A @ z)
        except (RuntimeError, Warning):
            return None
        d[keep] = z
    d -= (np.bincount(label, d, ncomp) / counts)[label]
    if not np.all(np.isfinite(d)):
        return None
    if np.linalg.norm(M @ d + rhs) > rtol * np.linalg.norm(rhs):
        return None
    return d


def component_shift(H, grad):
    """Ascent direction along the kernel of a disconnected Hessian.

    Returns ``None`` when the sparsity graph of ``H`` is connected.  Otherwise
    each component is shifted by its mean gradient over its largest
    curvature; ``g`` is linear along such shifts until two components meet,
    so the step length is left to a line search.
    """
    M = H.matrix if hasattr(H, "matrix") else sp.csr_matrix(H)
    ncomp, label = connected_components(M, directed=False)
    if ncomp == 1:
        return None
    diag = np.abs(M.diagonal())
    counts = np.bincount(label, minlength=ncomp)
    mean_g = np.bincount(label, np.asarray(grad, dtype=np.float64), ncomp) / counts
    curv = np.zeros(ncomp)
    np.maximum.at(curv, label, diag)
    curv[curv == 0] = diag.max() if diag.max() > 0 else 1.0
    d = (mean_g / curv)[label]
    return d if grad @ d > 0 else None


def empty_cell_lift(mu: AtomicMeasure, nu: PolylineMeasure, phi, evaluation):
    """Smallest weight increments that make each empty cell touch the support.

    While cell ``i`` is empty, ``g`` is linear in ``phi_i`` with slope
    ``m_i > 0``.  Power differences are linear along a segment, so the
    first point of contact lies at a breakpoint of the current trace; the
    threshold ``min_k |y_k - x_i|^2 - P(y_k)`` over breakpoints ``y_k`` with
    power ``P`` is found with one nearest-neighbour query in a lifted
    kd-tree.  Returns ``(indices, increments)``.
    """
    empty = np.flatnonzero(evaluation.cell_mass <= 0)
    tr = evaluation.trace
    keep = nu.densities[tr.segment] > 0
    if empty.size == 0 or not keep.any():
        return empty, np.zeros(empty.size)
    seg, cell = tr.segment[keep], tr.cell[keep]
    V, X = nu.vertices, mu.positions
    D = V[seg + 1] - V[seg]
    Y = np.vstack([V[seg] + tr.t_start[keep, None] * D, V[seg] + tr.t_end[keep, None] * D])
    owner = np.concatenate([cell, cell])
    c = phi[owner] - ((Y - X[owner]) ** 2).sum(axis=1)
    c0 = c.min()
    tree = cKDTree(np.column_stack([Y, np.sqrt(c - c0)]))
    dist, _ = tree.query(np.column_stack([X[empty], np.zeros(empty.size)]))
    return empty, np.maximum(dist ** 2 + c0 - phi[empty], 0.0)


class _Objective:
    """Counts evaluations; caches the last one for callers."""

    def __init__(self, mu, nu, config):
        self.mu, self.nu, self.config = mu, nu, config
        self.count = 0

    def evaluate(self, phi) -> TransportEvaluation:
        self.count += 1
        return evaluate(self.mu, self.nu, phi, mode=self.config.oracle_mode,
                        threads=self.config.threads)

    def __call__(self, phi):
        ev = self.evaluate(phi)
        return ev.cost, ev.gradient, ev


def _initial_phi(mu, phi_init):
    if phi_init is None:
        return np.zeros(mu.n)
    phi = np.array(phi_init, dtype=np.float64)
    if phi.shape != (mu.n,) or not np.all(np.isfinite(phi)):
        raise ValueError("phi_init must be a finite vector with one entry per Dirac")
    return phi


def _log_progress(config, it, ev, step, branch):
    if config.verbose and (it % 50 == 0):
        log.info("it %5d  g=%.12g  |grad|=%.3e  step=%.3e  empty=%d  %s",
                 it, ev.cost, ev.grad_norm, step, ev.empty_cells, branch)


def _lift(obj, phi, ev, memory):
    """Raise empty cells just past contact; kept only if ``g`` increases.

    The overshoot is sized from the largest Hessian diagonal so that each
    lifted cell gains at most about half the smallest Dirac mass.
    """
    mu, nu = obj.mu, obj.nu
    idx, inc = empty_cell_lift(mu, nu, phi, ev)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NearTangentCrossing)
        diag = np.abs(hessian(mu, nu, phi, ev.trace).matrix.diagonal())
    kappa = diag.max() if diag.size and diag.max() > 0 else 1.0
    step = np.zeros(mu.n)
    step[idx] = inc + 0.5 * mu.masses[idx].min() / kappa
    trial = obj.evaluate(phi + step)
    if not trial.cost >= ev.cost:
        return phi, ev
    memory.add(step, ev.gradient - trial.gradient)
    return phi + step, trial


def _unit_newton_step(obj, phi, d, ev, config):
    """Accept the full Newton step when it passes Armijo, or when the change in
    ``g`` is below rounding level and the gradient norm decreases.

    Near the optimum the increase predicted by a Newton step drops below the
    resolution of ``g`` itself, where a value-based search only sees noise.
    Returns ``None`` to request the strong-Wolfe search.
    """
    trial = obj.evaluate(phi + d)
    gain = trial.cost - ev.cost
    slope = float(ev.gradient @ d)
    noise = 16 * np.finfo(float).eps * max(abs(ev.cost), abs(trial.cost))
    if gain >= config.c1 * slope or (abs(gain) <= noise and trial.grad_norm < ev.grad_norm):
        return LineSearchResult(1.0, trial.cost, trial.gradient, trial, 1)
    return None


def solve(mu: AtomicMeasure, nu: PolylineMeasure, phi_init=None,
          config: SolverConfig = None, callback=None):
    """Maximise the dual functional; returns ``(phi, history)``.

    ``config.method`` selects ``"lbfgs"`` or ``"hybrid"``; first-order
    methods are dispatched to :func:`solve_first_order`.  The final
    :class:`TransportEvaluation` is stored in ``history.final``.

    When ``config.lift_empty`` is set the hybrid method starts each
    iteration with empty cells by raising their weights just past the
    point of first contact (see :func:`empty_cell_lift`), an exact ascent
    step that usually lets Newton take over much earlier.
    """
    config = config or SolverConfig()
    if config.method in ("gradient", "bb", "nesterov"):
        return solve_first_order(mu, nu, phi_init, config, callback)
    obj = _Objective(mu, nu, config)
    phi = _initial_phi(mu, phi_init)
    ev = obj.evaluate(phi)
    hist = ConvergenceHistory()
    hist.append(0, ev.cost, ev.grad_norm, 0.0, ev.empty_cells, QUASI_NEWTON)
    memory = LBFGSMemory(config.lbfgs_memory)
    hybrid = config.method == "hybrid"

    it = 0
    newton_blocked = False
    last_branch = None
    stalled = 0
    while it < config.outer_max and ev.grad_norm > config.grad_tol:
        it += 1
        grad = ev.gradient
        d, branch = None, QUASI_NEWTON
        if hybrid and config.lift_empty and 0 < ev.empty_cells <= LIFT_LIMIT(mu.n):
            phi, ev = _lift(obj, phi, ev, memory)
            grad = ev.gradient
        if hybrid and ev.empty_cells == 0 and not newton_blocked:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NearTangentCrossing)
                H = hessian(mu, nu, phi, ev.trace)
            if not H.flagged:
                # separate pieces of the support leave H disconnected: alternate
                # shifts between components with Newton steps inside them
                if last_branch != SHIFT:
                    d = component_shift(H, grad)
                if d is not None:
                    branch = SHIFT
                else:
                    d = newton_direction(H, grad, config.newton_rtol)
                    if d is not None:
                        branch = NEWTON
        if d is None:
            d = memory.direction(grad)
            if not grad @ d > 0:
                memory.reset()
                d = grad.copy()
        res = _unit_newton_step(obj, phi, d, ev, config) if branch == NEWTON else None
        try:
            if res is None:
                res = wolfe_line_search(obj, phi, d, 1.0, ev.cost, grad, config.c1, config.c2,
                                        config.max_line_evals)
        except LineSearchFailure as exc:
            if exc.best is not None:
                res = LineSearchResult(*exc.best, config.max_line_evals)
            elif len(memory) or branch == NEWTON:
                log.debug("line search failed on %s direction; retrying with gradient", branch)
                memory.reset()
                d, branch = grad.copy(), QUASI_NEWTON
                try:
                    res = wolfe_line_search(obj, phi, d, 1.0, ev.cost, grad, config.c1,
                                            config.c2, config.max_line_evals)
                except LineSearchFailure as exc2:
                    if exc2.best is None:
                        break
                    res = LineSearchResult(*exc2.best, config.max_line_evals)
            else:
                break
        # a short Newton step means a Hessian jump lies just ahead; take one
        # quasi-Newton step before trusting the local quadratic model again
        newton_blocked = branch == NEWTON and res.step < config.newton_min_step
        step = res.step * d
        new_ev = res.payload
        memory.add(step, grad - new_ev.gradient)
        progress = new_ev.cost > ev.cost or new_ev.grad_norm < ev.grad_norm
        stalled = 0 if progress else stalled + 1
        phi = phi + step
        ev = new_ev
        last_branch = branch
        hist.append(it, ev.cost, ev.grad_norm, res.step, ev.empty_cells, branch)
        _log_progress(config, it, ev, res.step, branch)
        if callback is not None:
            callback(it, phi, ev)
        if stalled >= STALL_LIMIT:
            # the line search only finds rounding-level moves: nothing more to gain
            log.info("stopping after %d iterations without progress", stalled)
            break

    hist.converged = ev.grad_norm <= config.grad_tol
    hist.evaluations = obj.count
    hist.final = ev
    return phi, hist


def solve_first_order(mu: AtomicMeasure, nu: PolylineMeasure, phi_init=None,
                      config: SolverConfig = None, callback=None):
    """Gradient ascent, global Barzilai-Borwein or Nesterov acceleration.

    Gradient ascent uses the strong-Wolfe search (or ``config.fixed_step``),
    Barzilai-Borwein a non-monotone Armijo search over the last
    ``config.bb_memory`` values, and Nesterov a constant step
    ``1 / nesterov_L`` with ``k / (k + 3)`` momentum.  When ``nesterov_L`` is
    unset it is taken as half the Gershgorin bound of the Hessian at
    ``phi_init``.
    """
    config = config or SolverConfig(method="gradient")
    method = config.method
    if method not in ("gradient", "bb", "nesterov"):
        raise ValueError(f"{method!r} is not a first-order method")
    obj = _Objective(mu, nu, config)
    phi = _initial_phi(mu, phi_init)
    ev = obj.evaluate(phi)
    hist = ConvergenceHistory()
    hist.append(0, ev.cost, ev.grad_norm, 0.0, ev.empty_cells, FIRST_ORDER)

    if method == "nesterov":
        L = config.nesterov_L
        if L is None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NearTangentCrossing)
                L = 0.5 * gershgorin_bound(hessian(mu, nu, phi, ev.trace))
            if not L > 0:
                L = 1.0
        x_prev = phi.copy()
        y = phi
        for it in range(1, config.outer_max + 1):
            if ev.grad_norm <= config.grad_tol:
                break
            x = y + ev.gradient / L
            y = x + (it / (it + 3.0)) * (x - x_prev)
            x_prev = x
            ev = obj.evaluate(y)
            phi = y
            hist.append(it, ev.cost, ev.grad_norm, 1.0 / L, ev.empty_cells, FIRST_ORDER)
            _log_progress(config, it, ev, 1.0 / L, FIRST_ORDER)
            if callback is not None:
                callback(it, phi, ev)
    elif method == "bb":
        phi, ev = _global_bb(obj, phi, ev, config, hist, callback)
    else:
        s_prev = 1.0
        for it in range(1, config.outer_max + 1):
            if ev.grad_norm <= config.grad_tol:
                break
            grad = ev.gradient
            if config.fixed_step is not None:
                s = config.fixed_step
                new_ev = obj.evaluate(phi + s * grad)
            else:
                try:
                    res = wolfe_line_search(obj, phi, grad, s_prev, ev.cost, grad, config.c1,
                                            config.c2, config.max_line_evals)
                except LineSearchFailure as exc:
                    if exc.best is None:
                        break
                    res = LineSearchResult(*exc.best, config.max_line_evals)
                s, new_ev = res.step, res.payload
                s_prev = s
            phi = phi + s * grad
            ev = new_ev
            hist.append(it, ev.cost, ev.grad_norm, s, ev.empty_cells, FIRST_ORDER)
            _log_progress(config, it, ev, s, FIRST_ORDER)
            if callback is not None:
                callback(it, phi, ev)

    hist.converged = ev.grad_norm <= config.grad_tol
    hist.evaluations = obj.count
    hist.final = ev
    return phi, hist


def _global_bb(obj, phi, ev, config, hist, callback, gamma=1e-4):
    recent = deque([ev.cost], maxlen=config.bb_memory)
    alpha = 1.0
    for it in range(1, config.outer_max + 1):
        if ev.grad_norm <= config.grad_tol:
            break
        grad = ev.gradient
        gg = float(grad @ grad)
        floor = min(recent)
        lam = alpha
        for _ in range(config.max_line_evals):
            trial = obj.evaluate(phi + lam * grad)
            if trial.cost >= floor + gamma * lam * gg:
                break
            lam *= 0.5
        else:
            break
        s = lam * grad
        y = trial.gradient - grad  # gradient change of g; -y for -g
        sy = -float(s @ y)
        alpha = float(s @ s) / sy if sy > 0 else 1.0 / math.sqrt(gg)
        alpha = min(max(alpha, 1e-10), 1e10)
        phi = phi + s
        ev = trial
        recent.append(ev.cost)
        hist.append(it, ev.cost, ev.grad_norm, lam, ev.empty_cells, FIRST_ORDER)
        _log_progress(config, it, ev, lam, FIRST_ORDER)
        if callback is not None:
            callback(it, phi, ev)
    return phi, ev
