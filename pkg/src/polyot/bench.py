"""Benchmark harness: solver comparison and thread scaling."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass

import numpy as np

from .measures import AtomicMeasure, PolylineMeasure
from .power_diagram import build_oracle
from .solvers import NEWTON, SolverConfig, solve
from .transport import evaluate

SOLVER_ORDER = ("hybrid", "lbfgs", "nesterov", "bb")


def benchmark_instance(n: int, p: int, seed: int, dim: int = 2):
    """``n`` uniform Diracs and a ``p``-segment polyline with uniform random vertices."""
    rng = np.random.default_rng(seed)
    mu = AtomicMeasure.uniform(rng.random((n, dim)))
    nu = PolylineMeasure.from_vertices(rng.random((p + 1, dim)))
    return mu, nu


@dataclass
class SolverRow:
    method: str
    seed: int
    n: int
    p: int
    iterations: int
    evaluations: int
    grad_norm: float
    cost: float
    seconds: float
    ms_per_iteration: float
    newton_steps: int
    converged: bool


def compare_solvers(n=1000, p=100, seeds=(0,), iterations=1000, methods=SOLVER_ORDER,
                    grad_tol=1e-12, threads=None, histories=None):
    """Run every method for a fixed iteration budget on seeded instances.

    ``grad_tol`` sits just above machine precision, so every method runs
    the full budget unless it has converged to rounding level.  If ``histories`` is a dict it receives the
    convergence history of each ``(method, seed)``.
    """
    rows = []
    for seed in seeds:
        mu, nu = benchmark_instance(n, p, seed)
        for method in methods:
            cfg = SolverConfig(method=method, grad_tol=grad_tol, outer_max=iterations,
                               threads=threads)
            t0 = time.perf_counter()
            _, hist = solve(mu, nu, None, cfg)
            dt = time.perf_counter() - t0
            its = max(hist.iterations, 1)
            rows.append(SolverRow(method, seed, n, p, hist.iterations, hist.evaluations,
                                  hist.final.grad_norm, hist.final.cost, dt, 1e3 * dt / its,
                                  sum(r.branch == NEWTON for r in hist.records), hist.converged))
            if histories is not None:
                histories[(method, seed)] = hist
    return rows


@dataclass
class ScalingRow:
    threads: int
    seconds: float
    speedup: float
    cost: float
    identical: bool


def scaling(n=20000, p=8000, seed=0, thread_counts=(1, 2, 4, 8), repeats=3):
    """Time :func:`evaluate` per thread count on one instance.

    ``identical`` is true when cost and gradient agree bitwise with the
    single-thread run.  The neighbour oracle is built once and shared, so
    only the tracing and integration are timed.
    """
    mu, nu = benchmark_instance(n, p, seed)
    rng = np.random.default_rng(seed + 1)
    phi = 1e-3 * rng.standard_normal(n)
    oracle = build_oracle(mu, phi)
    evaluate(mu, nu, phi, oracle, threads=1)  # compile and warm caches
    rows, ref, base = [], None, None
    for t in thread_counts:
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            ev = evaluate(mu, nu, phi, oracle, threads=t)
            best = min(best, time.perf_counter() - t0)
        if ref is None:
            ref, base = ev, best
        same = (ev.cost == ref.cost) and np.array_equal(ev.gradient, ref.gradient)
        rows.append(ScalingRow(t, best, base / best, ev.cost, bool(same)))
    return rows


def write_rows(rows, path):
    """Dataclass rows to CSV (floats written with full precision)."""
    if not rows:
        return
    names = list(asdict(rows[0]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])


def format_rows(rows) -> str:
    if not rows:
        return ""
    names = list(asdict(rows[0]))
    cells = [[f"{v:.3e}" if isinstance(v, float) else str(v) for v in asdict(r).values()]
             for r in rows]
    widths = [max(len(h), *(len(c[k]) for c in cells)) for k, h in enumerate(names)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(names, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
