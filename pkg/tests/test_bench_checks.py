import numpy as np

from polyot.bench import SOLVER_ORDER, benchmark_instance, compare_solvers, scaling
from polyot.checks import gradient_error, hessian_error, run_checks

from oracles import random_instance


def test_benchmark_instance_seeded():
    a = benchmark_instance(30, 5, 1)
    b = benchmark_instance(30, 5, 1)
    assert np.array_equal(a[0].positions, b[0].positions)
    assert np.array_equal(a[1].vertices, b[1].vertices)


def test_compare_solvers_rows_and_histories():
    hist = {}
    rows = compare_solvers(80, 10, seeds=(0,), iterations=30, histories=hist)
    assert [r.method for r in rows] == list(SOLVER_ORDER)
    assert set(hist) == {(r.method, 0) for r in rows}
    assert all(r.iterations <= 30 for r in rows)


def test_scaling_identical_across_threads():
    rows = scaling(300, 60, thread_counts=(1, 2, 3), repeats=1)
    assert [r.threads for r in rows] == [1, 2, 3]
    assert all(r.identical for r in rows)


def test_checks_pass_on_generic_instance():
    mu, nu = random_instance(11, 25, 4)
    phi = 0.01 * np.random.default_rng(0).standard_normal(25)
    assert gradient_error(mu, nu, phi) <= 1e-6
    assert hessian_error(mu, nu, phi) <= 1e-5
    rep = run_checks(mu, nu, phi)
    assert rep["genericity_violations"] == 0
    assert rep["shape_gradient_fd_rel_error"] <= 1e-4
