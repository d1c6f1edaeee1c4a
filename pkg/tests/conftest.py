import numpy as np
import pytest

from mpopf import formulation as fm
from mpopf.cases import load_bundled_partition, load_case, load_series
from mpopf.central import solve_centralized
from mpopf.model import build_admittance
from mpopf.partition import compute_affinity, make_partition, spectral_partition


@pytest.fixture(scope="session")
def case5():
    return load_case("case5_demo")


@pytest.fixture(scope="session")
def case14():
    return load_case("case14_like")


@pytest.fixture(scope="session")
def series5(case5):
    return load_series("case5_demo_series", case5)


@pytest.fixture(scope="session")
def series14(case14):
    return load_series("case14_like_series", case14)


@pytest.fixture(scope="session")
def valley5(case5):
    return load_series("case5_demo_valleypeak", case5)


@pytest.fixture(scope="session")
def case5_solved(case5, series5):
    """Centralized N=1 solve of case5_demo at interval 0 (shared)."""
    problem = fm.build_horizon_problem(case5, series5, 0, 1)
    report = solve_centralized(problem)
    assert report.converged
    return problem, report


@pytest.fixture(scope="session")
def case14_solved(case14, series14):
    problem = fm.build_horizon_problem(case14, series14, 0, 1)
    report = solve_centralized(problem)
    assert report.converged
    return problem, report


@pytest.fixture(scope="session")
def case14_partitions(case14, case14_solved):
    """SP (K=2, seed 7) and the committed arbitrary partition."""
    problem, report = case14_solved
    kkt = fm.assemble_hessian(problem, report.solution)
    aff = compute_affinity(kkt, build_admittance(case14), problem.layout)
    sp = spectral_partition(aff, 2, 7, system=case14)
    doc = load_bundled_partition("case14_like_arb_k2")
    arb = make_partition({int(b): r for b, r in doc["region_of"].items()},
                         K=doc["K"], system=case14)
    return {"sp": sp, "arb": arb, "affinity": aff}


def random_interior_point(problem, rng, spread=0.05):
    """A random iterate with positive slacks/multipliers for derivative checks."""
    L = problem.layout
    y = fm.flat_start(problem)
    y[L.x_all] += spread * rng.standard_normal(L.n_x)
    y[L.s_all] = np.abs(y[L.s_all]) + 0.05 + 0.2 * rng.random(L.n_s)
    y[L.eq_all] = rng.standard_normal(L.n_eq)
    y[L.ineq_all] = 0.1 + rng.random(L.n_ineq)
    return y
