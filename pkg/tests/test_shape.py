import warnings

import numpy as np
import pytest

from polyot import (AdmmConfig, AdmmMaxIterations, AtomicMeasure, InnerSolveFailed,
                    KinematicConstraints, PolylineMeasure, ShapeConfig, SolverConfig, StaleDual,
                    barycenter_diagnostic, evaluate, metric_diagonal, optimize_polyline,
                    project_kinematic, shape_gradient, solve)

from oracles import feasibility, random_instance


def solved(mu, nu, tol=1e-12):
    phi, hist = solve(mu, nu, None, SolverConfig(grad_tol=tol, outer_max=3000))
    return phi, hist.final


def fd_shape_gradient(mu, nu, eps=1e-5, tol=1e-12):
    phi, _ = solved(mu, nu, tol)
    V = nu.vertices
    out = np.zeros_like(V)
    for a in range(V.shape[0]):
        for q in range(V.shape[1]):
            vals = []
            for sgn in (1, -1):
                W = V.copy()
                W[a, q] += sgn * eps
                _, hist = solve(mu, nu.with_vertices(W), phi,
                                SolverConfig(grad_tol=tol, outer_max=3000))
                vals.append(hist.final.cost)
            out[a, q] = (vals[0] - vals[1]) / (2 * eps)
    return out


# --- shape gradient --------------------------------------------------------------

def test_single_segment_single_dirac():
    mu = AtomicMeasure([[0, 0]], [1.0])
    nu = PolylineMeasure([[0, 0], [1, 0]], [1.0])
    g = shape_gradient(mu, nu, np.zeros(1))
    np.testing.assert_allclose(g.partial[0], [1 / 3, 0], atol=1e-15)
    np.testing.assert_allclose(g.partial[1], [2 / 3, 0], atol=1e-15)
    # one segment: rho is fixed at 1, so the chain term vanishes
    np.testing.assert_allclose(g.density_term, 0, atol=1e-15)


def test_mirror_symmetry():
    mu = AtomicMeasure.uniform([[0.2, 0.7], [0.8, 0.7], [0.35, -0.4], [0.65, -0.4]])
    nu = PolylineMeasure.from_vertices([[0, 0], [1, 0]])
    phi, ev = solved(mu, nu)
    g = shape_gradient(mu, nu, phi, ev).total
    np.testing.assert_allclose(g[1], [-g[0, 0], g[0, 1]], atol=1e-10)


@pytest.mark.parametrize("disjoint", [False, True])
def test_shape_gradient_finite_differences(disjoint):
    mu, nu = random_instance(21, 50, 10 if not disjoint else 9, disjoint=disjoint)
    phi, ev = solved(mu, nu)
    g = shape_gradient(mu, nu, phi, ev).total
    fd = fd_shape_gradient(mu, nu)
    assert np.abs(g - fd).max() <= 1e-4 * np.abs(fd).max()


def test_envelope_directional_derivative():
    mu, nu = random_instance(22, 30, 6)
    phi, ev = solved(mu, nu)
    g = shape_gradient(mu, nu, phi, ev).total
    rng = np.random.default_rng(0)
    for _ in range(3):
        dP = rng.standard_normal(nu.vertices.shape)
        eps = 1e-5
        vals = [solve(mu, nu.with_vertices(nu.vertices + s * eps * dP), phi,
                      SolverConfig(grad_tol=1e-12))[1].final.cost for s in (1, -1)]
        fd = (vals[0] - vals[1]) / (2 * eps)
        assert abs(fd - np.sum(g * dP)) <= 1e-4 * max(abs(fd), 1e-12)


def test_stale_dual():
    mu, nu = random_instance(3, 40, 5)
    with pytest.raises(StaleDual):
        shape_gradient(mu, nu, np.zeros(40), tol=1e-10)


def test_fixed_density_gradient_skips_chain_term():
    mu, nu = random_instance(4, 40, 5)
    phi, ev = solved(mu, nu)
    g = shape_gradient(mu, nu, phi, ev, length_densities=False)
    assert np.all(g.density_term == 0)


# --- barycentres -----------------------------------------------------------------

def test_barycenter_single_cell():
    mu = AtomicMeasure([[0.5, 1.0]], [1.0])
    nu = PolylineMeasure([[0, 0], [1, 0]], [1.0])
    c, xbar = barycenter_diagnostic(mu, nu, np.zeros(1))
    np.testing.assert_allclose(c, [[0.5, 0]])
    np.testing.assert_allclose(xbar, [[0.5, 1]])
    g = shape_gradient(mu, nu, np.zeros(1)).partial
    np.testing.assert_allclose(0.5 * (g[0] + g[1]), [0, -1], atol=1e-14)


def test_barycenter_centered_segment():
    mu = AtomicMeasure([[0.5, 0.0]], [1.0])
    nu = PolylineMeasure([[0, 0], [1, 0]], [1.0])
    g = shape_gradient(mu, nu, np.zeros(1)).partial
    np.testing.assert_allclose(0.5 * (g[0] + g[1]), 0, atol=1e-15)


def test_barycenter_two_cells():
    mu = AtomicMeasure([[0, 0], [1, 0]], [0.5, 0.5])
    nu = PolylineMeasure([[0, 0], [1, 0]], [1.0])
    _, xbar = barycenter_diagnostic(mu, nu, np.zeros(2))
    np.testing.assert_allclose(xbar, [[0.5, 0]], atol=1e-15)


def test_barycenter_identity_random():
    mu, _ = random_instance(5, 30, 1)
    nu = PolylineMeasure.from_vertices([[0.1, 0.2], [0.9, 0.7]])
    phi = 0.01 * np.random.default_rng(5).standard_normal(30)
    c, xbar = barycenter_diagnostic(mu, nu, phi)
    g = shape_gradient(mu, nu, phi, length_densities=False).partial
    np.testing.assert_allclose(0.5 * (g[0] + g[1]), nu.densities[0] * (c[0] - xbar[0]),
                               atol=1e-10)


def test_metric_diagonal():
    np.testing.assert_allclose(metric_diagonal([0.2, 0.3, 0.5]), [0.1, 0.25, 0.4, 0.25])
    sig = metric_diagonal([0.5, 0.0, 0.5])
    assert np.all(sig > 0)
    assert metric_diagonal([0.0, 1.0, 0.0])[0] == 0


# --- kinematic projection ---------------------------------------------------------

def test_projection_two_points():
    Q = project_kinematic([[0, 0], [2, 0]], KinematicConstraints(K1=1.0))
    np.testing.assert_allclose(Q, [[0.5, 0], [1.5, 0]], atol=1e-6)


def test_projection_identity_on_feasible():
    P = np.array([[0, 0], [1, 0], [2, 0]], float)
    Q = project_kinematic(P, KinematicConstraints(K1=2.0, K2=0.1))
    np.testing.assert_allclose(Q, P, atol=1e-10)


def test_projection_kink():
    Q = project_kinematic([[0, 0], [1, 0], [1, 1]], KinematicConstraints(K2=0.1))
    assert np.linalg.norm(2 * Q[1] - Q[0] - Q[2]) <= 0.1 + 1e-8


def test_projection_matches_convex_solver():
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(0)
    P = np.cumsum(rng.standard_normal((30, 2)) * 0.1, axis=0)
    K = KinematicConstraints(0.08, 0.05)
    Q = project_kinematic(P, K, AdmmConfig(tol=1e-10))
    X = cp.Variable(P.shape)
    cons = [cp.norm(X[1:] - X[:-1], axis=1) <= K.K1,
            cp.norm(2 * X[1:-1] - X[:-2] - X[2:], axis=1) <= K.K2]
    cp.Problem(cp.Minimize(cp.sum_squares(X - P)), cons).solve(solver=cp.CLARABEL)
    assert np.abs(Q - X.value).max() <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_projection_feasible_and_idempotent(seed):
    rng = np.random.default_rng(seed)
    P = rng.random((40, 2))
    K = KinematicConstraints(0.05 + 0.1 * rng.random(), 0.02 + 0.05 * rng.random())
    Q = project_kinematic(P, K)
    assert feasibility(Q, K.K1, K.K2) <= 1e-6
    assert K.violation(Q) <= 1e-6
    assert np.abs(project_kinematic(Q, K) - Q).max() <= 1e-6


def test_projection_cap_warns():
    P = np.random.default_rng(0).random((50, 2))
    with pytest.warns(AdmmMaxIterations):
        Q, info = project_kinematic(P, KinematicConstraints(0.01, 0.005),
                                    AdmmConfig(max_iter=3), return_info=True)
    assert not info["converged"] and Q.shape == P.shape


def test_projection_disabled_constraints():
    P = np.random.default_rng(0).random((5, 2))
    assert np.array_equal(project_kinematic(P, KinematicConstraints()), P)
    with pytest.raises(ValueError):
        KinematicConstraints(K1=0.0)


# --- outer loop -------------------------------------------------------------------

def test_single_segment_shrinks_monotonically():
    mu = AtomicMeasure([[0, 0]], [1.0])
    nu = PolylineMeasure([[-0.3, 0.2], [0.7, -0.1]], [1.0])
    out, hist, _ = optimize_polyline(mu, nu, SolverConfig(grad_tol=1e-12),
                                     ShapeConfig(max_iter=50, grad_threshold=1e-14))
    G = hist.G
    assert len(G) == 51
    assert np.all(np.diff(G) < 0)
    assert np.linalg.norm(np.diff(out.vertices, axis=0)) < np.linalg.norm(np.diff(nu.vertices, axis=0))


def test_translation_equivariance():
    mu, nu = random_instance(31, 40, 8)
    v = np.array([0.25, -0.5])
    cfg = ShapeConfig(max_iter=5, constraints=KinematicConstraints(0.3, 0.2))
    a, ha, _ = optimize_polyline(mu, nu, SolverConfig(grad_tol=1e-11), cfg)
    b, hb, _ = optimize_polyline(mu.translated(v), nu.translated(v), SolverConfig(grad_tol=1e-11),
                                 cfg)
    np.testing.assert_allclose(b.vertices, a.vertices + v, atol=1e-8)
    np.testing.assert_allclose(hb.G, ha.G, atol=1e-10)


def test_outer_loop_records_and_dumps(tmp_path):
    mu, nu = random_instance(32, 60, 12)
    dumped = []
    cfg = ShapeConfig(max_iter=4, dump_every=2, dump=lambda it, poly: dumped.append(it),
                      constraints=KinematicConstraints(0.3, 0.2))
    out, hist, phi = optimize_polyline(mu, nu, SolverConfig(grad_tol=1e-9), cfg)
    assert dumped == [2, 4]
    assert len(hist) == 5 and phi.shape == (60,)
    assert KinematicConstraints(0.3, 0.2).violation(out.vertices) <= 1e-6
    hist.to_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().startswith("iteration,G,grad_inf")


def test_backtracking_is_monotone():
    mu, nu = random_instance(33, 60, 12)
    _, hist, _ = optimize_polyline(mu, nu, SolverConfig(grad_tol=1e-9),
                                   ShapeConfig(max_iter=6, backtracking=True, step_scale=1.0))
    assert np.all(np.diff(hist.G) <= 0)


def test_disjoint_mode_keeps_breaks():
    mu, nu = random_instance(34, 60, 7, disjoint=True)
    out, hist, _ = optimize_polyline(mu, nu, SolverConfig(grad_tol=1e-9), ShapeConfig(max_iter=3))
    assert out.disjoint_mode and np.all(out.densities[1::2] == 0)
    assert hist.G[-1] < hist.G[0]


def test_inner_failure_reports_last_state():
    mu, nu = random_instance(35, 60, 12)
    with pytest.raises(InnerSolveFailed) as info:
        optimize_polyline(mu, nu, SolverConfig(grad_tol=1e-14, outer_max=2), ShapeConfig(max_iter=2))
    assert info.value.polyline.p == 12 and len(info.value.history) == 0
