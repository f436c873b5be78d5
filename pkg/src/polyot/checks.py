"""Finite-difference self-tests used by ``polyot check``."""
from __future__ import annotations

import numpy as np

from .measures import check_genericity
from .power_diagram import BRUTE_FORCE
from .shape import shape_gradient
from .solvers import SolverConfig, solve
from .transport import evaluate, hessian


def gradient_error(mu, nu, phi, eps=1e-5, indices=None):
    """Max abs gap between the analytic gradient and central differences of ``g``."""
    phi = np.asarray(phi, dtype=np.float64)
    ev = evaluate(mu, nu, phi, mode=BRUTE_FORCE)
    idx = range(mu.n) if indices is None else indices
    err = 0.0
    for i in idx:
        e = np.zeros(mu.n)
        e[i] = eps
        fd = (evaluate(mu, nu, phi + e, mode=BRUTE_FORCE).cost
              - evaluate(mu, nu, phi - e, mode=BRUTE_FORCE).cost) / (2 * eps)
        err = max(err, abs(fd - ev.gradient[i]))
    return err


def hessian_error(mu, nu, phi, eps=1e-5, indices=None):
    """Max abs gap between the sparse Hessian and central differences of the gradient."""
    phi = np.asarray(phi, dtype=np.float64)
    ev = evaluate(mu, nu, phi, mode=BRUTE_FORCE)
    H = hessian(mu, nu, phi, ev.trace).toarray()
    idx = range(mu.n) if indices is None else indices
    err = 0.0
    for i in idx:
        e = np.zeros(mu.n)
        e[i] = eps
        col = (evaluate(mu, nu, phi + e, mode=BRUTE_FORCE).gradient
               - evaluate(mu, nu, phi - e, mode=BRUTE_FORCE).gradient) / (2 * eps)
        err = max(err, float(np.abs(col - H[:, i]).max()))
    return err


def optimal_cost(mu, nu, phi0=None, grad_tol=1e-12):
    phi, hist = solve(mu, nu, phi0, SolverConfig(grad_tol=grad_tol, outer_max=2000))
    return hist.final.cost, phi, hist


def shape_gradient_error(mu, nu, eps=1e-5, grad_tol=1e-12):
    """Relative max-norm gap between the shape gradient and differences of ``G``.

    ``G`` is re-solved for every perturbed polyline, with the masses tied to
    the segment lengths.
    """
    _, phi, hist = optimal_cost(mu, nu, grad_tol=grad_tol)
    g = shape_gradient(mu, nu, phi, hist.final).total
    V = nu.vertices
    fd = np.zeros_like(V)
    for a in range(V.shape[0]):
        for q in range(V.shape[1]):
            vals = []
            for sgn in (1, -1):
                W = V.copy()
                W[a, q] += sgn * eps
                vals.append(optimal_cost(mu, nu.with_vertices(W), phi, grad_tol)[0])
            fd[a, q] = (vals[0] - vals[1]) / (2 * eps)
    return float(np.abs(fd - g).max() / max(np.abs(fd).max(), 1e-300))


def run_checks(mu, nu, phi=None, seed=0, max_coords=20, tolerance=1e-12):
    """Genericity report plus finite-difference checks on a random subset of coordinates."""
    rng = np.random.default_rng(seed)
    if phi is None:
        phi = np.zeros(mu.n)
    idx = np.sort(rng.choice(mu.n, size=min(mu.n, max_coords), replace=False))
    report = {
        "genericity_violations": len(check_genericity(mu, nu, tolerance)),
        "gradient_fd_error": gradient_error(mu, nu, phi, indices=idx),
        "hessian_fd_error": hessian_error(mu, nu, phi, indices=idx),
    }
    if mu.n * nu.p <= 5000:
        report["shape_gradient_fd_rel_error"] = shape_gradient_error(mu, nu)
    return report
