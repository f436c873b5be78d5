import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from polyot import (BRUTE_FORCE, AtomicMeasure, NearTangentCrossing, PolylineMeasure,
                    build_oracle, evaluate, gershgorin_bound, hessian, next_crossing,
                    trace_polyline)
from polyot.transport import COS_FLOOR, SparseHessian, chunk_bounds

from oracles import (cell_masses, drop_short, dual_value, envelope_traces, fd_gradient,
                     max_trace_gap, random_instance)


def two_dirac(phi=(0.0, 0.0)):
    mu = AtomicMeasure([[0, 0], [1, 0]], [0.5, 0.5])
    nu = PolylineMeasure([[-0.5, 0], [1.5, 0]], [1.0])
    return mu, nu, np.array(phi, float)


# --- next_crossing -----------------------------------------------------------

def test_next_crossing_bisector():
    mu, nu, phi = two_dirac()
    k, t = next_crossing(mu, nu, phi, build_oracle(mu, phi, BRUTE_FORCE), 0, 0)
    assert k == 1 and abs(t - 0.5) < 1e-15


def test_next_crossing_weighted_bisector():
    mu, nu, phi = two_dirac((0.2, 0.0))
    k, t = next_crossing(mu, nu, phi, build_oracle(mu, phi, BRUTE_FORCE), 0, 0)
    assert k == 1 and abs(t - 0.55) < 1e-15


def test_next_crossing_single_dirac_ends():
    mu = AtomicMeasure.uniform([[0.3, 0.2]])
    nu = PolylineMeasure.from_vertices([[0, 0], [1, 1]])
    assert next_crossing(mu, nu, np.zeros(1), build_oracle(mu, np.zeros(1)), 0, 0) is None


# --- trace ---------------------------------------------------------------------

def test_trace_single_cell():
    mu = AtomicMeasure.uniform([[0, 0], [5, 5], [-5, 5]])
    nu = PolylineMeasure.from_vertices([[0.1, 0], [0.2, 0.1]])
    assert trace_polyline(mu, nu, np.zeros(3)).as_lists() == [[(0, 0.0, 1.0)]]


def test_trace_two_dirac():
    mu, nu, phi = two_dirac()
    assert trace_polyline(mu, nu, phi).as_lists() == [[(0, 0.0, 0.5), (1, 0.5, 1.0)]]


@pytest.mark.parametrize("seed", range(6))
def test_trace_invariants(seed):
    mu, nu = random_instance(seed, 80, 15, disjoint=seed % 2 == 1)
    phi = 0.01 * np.random.default_rng(seed).standard_normal(80)
    tr = trace_polyline(mu, nu, phi)
    traced = nu.traced_segments()
    for a, entries in enumerate(tr.as_lists()):
        if not traced[a]:
            assert entries == []
            continue
        assert entries[0][1] == 0.0 and entries[-1][2] == 1.0
        for (c0, s0, e0), (c1, s1, e1) in zip(entries, entries[1:]):
            assert e0 == s1 and c0 != c1
        assert all(0 <= s <= e <= 1 for _, s, e in entries)


def test_trace_matches_envelope_oracle_large():
    mu, nu = random_instance(11, 1000, 100)
    phi = 1e-3 * np.random.default_rng(11).standard_normal(1000)
    got = trace_polyline(mu, nu, phi).as_lists()
    ref = envelope_traces(mu, nu, phi, samples=256)
    gap = max(max_trace_gap(drop_short(g, 1e-12), drop_short(r, 1e-12)) for g, r in zip(got, ref))
    assert gap <= 1e-9


def test_zero_density_segments_are_bridged():
    mu, _ = random_instance(4, 40, 3)
    nu = PolylineMeasure([[0.1, 0.1], [0.9, 0.2], [0.2, 0.8], [0.8, 0.9]], [0.5, 0.0, 0.5])
    ev = evaluate(mu, nu, np.zeros(40))
    assert abs(ev.cell_mass.sum() - 1) < 1e-14
    assert len(ev.trace.entries(1)) >= 1  # traced even though it carries no mass


def test_three_dimensional_trace():
    rng = np.random.default_rng(5)
    mu = AtomicMeasure.uniform(rng.random((200, 3)))
    nu = PolylineMeasure.from_vertices(rng.random((11, 3)))
    phi = 1e-3 * rng.standard_normal(200)
    got = trace_polyline(mu, nu, phi).as_lists()
    ref = envelope_traces(mu, nu, phi)
    assert max(max_trace_gap(drop_short(g, 1e-12), drop_short(r, 1e-12))
               for g, r in zip(got, ref)) <= 1e-9


# --- evaluate ------------------------------------------------------------------

def test_single_dirac_cost():
    mu = AtomicMeasure([[0, 0]], [1.0])
    nu = PolylineMeasure([[0, 0], [1, 0]], [1.0])
    ev = evaluate(mu, nu, np.zeros(1))
    assert abs(ev.cost - 1 / 3) < 1e-15
    assert ev.gradient[0] == 0 and ev.empty_cells == 0


def test_two_dirac_cost():
    mu, nu, phi = two_dirac()
    ev = evaluate(mu, nu, phi)
    assert abs(ev.cost - 1 / 12) < 1e-15
    np.testing.assert_allclose(ev.gradient, 0, atol=1e-15)


def test_two_dirac_shifted_gradient():
    mu, nu, phi = two_dirac((0.2, 0.0))
    np.testing.assert_allclose(evaluate(mu, nu, phi).gradient, [-0.05, 0.05], atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_evaluate_matches_direct_integration(seed):
    mu, nu = random_instance(seed, 60, 12)
    phi = 0.02 * np.random.default_rng(seed).standard_normal(60)
    ev = evaluate(mu, nu, phi)
    ref = envelope_traces(mu, nu, phi)
    assert abs(ev.cost - dual_value(mu, nu, phi, ref)) < 1e-13
    np.testing.assert_allclose(ev.cell_mass, cell_masses(mu, nu, ref), atol=1e-13)
    assert ev.empty_cells == int(np.sum(cell_masses(mu, nu, ref) <= 0))


@pytest.mark.parametrize("seed", range(5))
def test_adjacency_equals_brute_force(seed):
    mu, nu = random_instance(seed, 300, 40)
    phi = 5e-3 * np.random.default_rng(seed).standard_normal(300)
    a = evaluate(mu, nu, phi)
    b = evaluate(mu, nu, phi, mode=BRUTE_FORCE)
    assert abs(a.cost - b.cost) <= 1e-12
    assert np.abs(a.gradient - b.gradient).max() <= 1e-12


def test_shift_covariance():
    mu, nu = random_instance(2, 50, 10)
    phi = 0.01 * np.random.default_rng(2).standard_normal(50)
    a, b = evaluate(mu, nu, phi), evaluate(mu, nu, phi + 0.37)
    assert abs(a.cost - b.cost) <= 1e-12
    assert np.abs(a.gradient - b.gradient).max() <= 1e-12


def test_gradient_finite_differences():
    mu, nu = random_instance(8, 50, 20, genericity_tol=1e-8)
    phi = 0.01 * np.random.default_rng(8).standard_normal(50)
    g = evaluate(mu, nu, phi).gradient
    fd = fd_gradient(lambda f: evaluate(mu, nu, f).cost, phi)
    assert np.abs(g - fd).max() <= 1e-6


def test_concave_along_directions():
    mu, nu = random_instance(9, 40, 10)
    rng = np.random.default_rng(9)
    phi = 0.01 * rng.standard_normal(40)
    for _ in range(3):
        d = 0.01 * rng.standard_normal(40)
        vals = np.array([evaluate(mu, nu, phi + s * d).cost for s in np.linspace(-2, 2, 41)])
        assert np.all(vals[2:] - 2 * vals[1:-1] + vals[:-2] <= 1e-10)


def test_bad_phi():
    mu, nu, _ = two_dirac()
    with pytest.raises(ValueError):
        evaluate(mu, nu, np.zeros(3))
    with pytest.raises(ValueError):
        evaluate(mu, nu, np.array([0.0, np.inf]))


@pytest.mark.parametrize("threads", [1, 2, 3])
def test_thread_count_bit_identity(threads):
    mu, nu = random_instance(1, 500, 200)
    phi = 1e-3 * np.random.default_rng(1).standard_normal(500)
    ref = evaluate(mu, nu, phi, threads=1)
    ev = evaluate(mu, nu, phi, threads=threads)
    assert ev.cost == ref.cost and np.array_equal(ev.gradient, ref.gradient)


def test_chunk_bounds_cover():
    for p in (1, 31, 32, 33, 1000):
        b = chunk_bounds(p)
        assert b[0][0] == 0 and b[-1][1] == p
        assert all(hi == lo2 for (_, hi), (lo2, _) in zip(b, b[1:]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 15), st.integers(0, 2**31), st.floats(0, 0.1),
       st.booleans())
def test_conservation_property(n, p, seed, scale, disjoint):
    mu, nu = random_instance(seed, n, p, disjoint=disjoint and p >= 1)
    phi = scale * np.random.default_rng(seed).standard_normal(n)
    ev = evaluate(mu, nu, phi)
    assert abs(ev.gradient.sum()) <= 1e-10
    assert abs(ev.cell_mass.sum() - 1) <= 1e-10


# --- hessian -------------------------------------------------------------------

def test_hessian_two_dirac():
    mu, nu, phi = two_dirac()
    H = hessian(mu, nu, phi, evaluate(mu, nu, phi).trace).toarray()
    np.testing.assert_allclose(H, [[-0.25, 0.25], [0.25, -0.25]], atol=1e-15)
    fd = np.column_stack([
        (evaluate(mu, nu, phi + e).gradient - evaluate(mu, nu, phi - e).gradient) / 2e-5
        for e in 1e-5 * np.eye(2)])
    np.testing.assert_allclose(H, fd, atol=1e-6)


def test_hessian_short_segment():
    mu = AtomicMeasure([[0, 0], [2, 0]], [0.5, 0.5])
    nu = PolylineMeasure([[0.5, 0], [1.5, 0]], [1.0])
    H = hessian(mu, nu, np.zeros(2), evaluate(mu, nu, np.zeros(2)).trace).toarray()
    assert abs(H[0, 1] - 0.25) < 1e-15


@pytest.mark.parametrize("seed", range(4))
def test_hessian_structure(seed):
    mu, nu = random_instance(seed, 100, 30)
    phi = 0.01 * np.random.default_rng(seed).standard_normal(100)
    H = hessian(mu, nu, phi, evaluate(mu, nu, phi).trace)
    M = H.matrix
    assert np.all(M @ np.ones(100) == 0)
    assert (abs(M - M.T)).max() == 0
    assert np.all(M.diagonal() <= 0)
    off = M - sp.diags(M.diagonal())
    assert off.toarray().min() >= 0
    assert np.linalg.eigvalsh(M.toarray()).max() <= 1e-10


def test_hessian_near_tangent_is_flagged():
    mu = AtomicMeasure([[0, 0], [1, 0]], [0.5, 0.5])
    # crosses the bisector x = 1/2 at a grazing angle, |cos| ~ 1e-11
    nu = PolylineMeasure([[0.5 - 1e-11, -1], [0.5 + 1e-11, 1]], [1.0])
    ev = evaluate(mu, nu, np.zeros(2))
    assert ev.trace.as_lists() == [[(0, 0.0, 0.5), (1, 0.5, 1.0)]]
    with pytest.warns(NearTangentCrossing):
        H = hessian(mu, nu, np.zeros(2), ev.trace)
    assert H.flagged == 1
    # clamped entry rho / (2 |dx| COS_FLOOR L) with |dx| = 1, L = 2
    np.testing.assert_allclose(H.toarray(), np.array([[-1, 1], [1, -1]]) / (4 * COS_FLOOR))


def test_gershgorin():
    mu, nu, phi = two_dirac()
    H = hessian(mu, nu, phi, evaluate(mu, nu, phi).trace)
    assert gershgorin_bound(H) == 0.5
    assert gershgorin_bound(np.zeros((3, 3))) == 0.0


def test_gershgorin_bounds_spectrum():
    mu, nu = random_instance(3, 200, 50)
    phi = np.zeros(200)
    H = hessian(mu, nu, phi, evaluate(mu, nu, phi).trace)
    # power iteration on the largest-magnitude eigenvalue
    v = np.random.default_rng(0).standard_normal(200)
    for _ in range(500):
        v = H.matrix @ v
        v /= np.linalg.norm(v)
    lam = abs(v @ (H.matrix @ v))
    assert gershgorin_bound(H) >= lam
    assert gershgorin_bound(SparseHessian(H.matrix)) == gershgorin_bound(H.matrix.toarray())
