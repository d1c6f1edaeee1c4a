import numpy as np
import pytest

from mpopf import formulation as fm
from mpopf.model import (
    Branch,
    Bus,
    Generator,
    PowerSystem,
    StorageDevice,
    TimeSeries,
)

from conftest import random_interior_point


def two_bus_system(p_load=0.5, q_load=0.1, r=0.02, x=0.1):
    return PowerSystem(
        buses=(
            Bus(1, "slack", 0.0, 0.0, 0.94, 1.06, 1.0),
            Bus(2, "load", p_load, q_load, 0.94, 1.06, None),
        ),
        branches=(Branch(1, 2, r, x, 0.0),),
        generators=(Generator(1, 10.0, 100.0, 5.0, 0.0, 2.0, -1.0, 1.0),),
        storages=(),
    )


def flat_series(n=8, interval=10):
    return TimeSeries(interval, np.ones(n), {})


def test_layout_counts_two_bus_n1():
    problem = fm.build_horizon_problem(two_bus_system(), flat_series(), 0, 1)
    L = problem.layout
    assert L.counts["theta"] == 2
    assert L.counts["v"] == 2
    assert L.counts["pg"] == 1
    assert L.counts["qg"] == 1
    assert L.counts["balance_eq"] == 4
    # slack angle and the slack bus voltage setpoint are registered equalities
    assert L.counts["slack_pins"] == 1
    assert L.counts["vset_pins"] == 1
    assert L.n_eq == 4 + 1 + 1


def test_layout_stacking_three_steps(case5, series5):
    one = fm.build_horizon_problem(case5, series5, 0, 1).layout
    three = fm.build_horizon_problem(case5, series5, 0, 3).layout
    S = len(case5.storages)
    step_local = one.step_local_primal()
    assert one.n_x == step_local + S
    assert three.n_x == 3 * step_local + 3 * S


def test_constraint_registry_against_enumerator(case5, series5):
    """Oracle: walk the formulation constraint-by-constraint for N=2."""
    N = 2
    problem = fm.build_horizon_problem(case5, series5, 0, N)
    L = problem.layout
    B = case5.n_buses
    G = len(case5.generators)
    S = len(case5.storages)
    n_lim = sum(1 for br in case5.branches if br.i_max is not None)
    pinned = sum(1 for b in case5.buses if b.kind in ("slack", "generator"))
    eq_expected = N * (2 * B + S + 1 + pinned)
    ineq_expected = N * (2 * B + 2 * G + 6 * S + n_lim)
    assert L.n_eq == eq_expected
    assert L.n_s == ineq_expected
    # variable accounting: primal + equality rows + slack/multiplier pairs
    assert L.size == L.n_x + eq_expected + 2 * ineq_expected


def test_power_balance_flat_start_symbolic():
    """Oracle: substitute the flat voltages into the bus-injection formula."""
    system = two_bus_system(p_load=0.5, q_load=0.0)
    problem = fm.build_horizon_problem(system, flat_series(), 0, 1)
    y = fm.flat_start(problem)
    y[problem.layout.pg] = 0.0  # zero all injections
    dP, dQ = fm.eval_power_balance(problem, y, 2, 0)
    y_series = 1.0 / complex(0.02, 0.1)
    g, b = y_series.real, y_series.imag
    # P_2(V, th) = V2^2*G22 + V2*V1*(G21*cos + B21*sin); flat: th=0, V=1
    p2_calc = g + 1.0 * 1.0 * (-g)
    q2_calc = -(-b) + 1.0 * 1.0 * (0 - b)
    assert dP == pytest.approx(-0.5 - p2_calc, abs=1e-12)
    assert dQ == pytest.approx(0.0 - q2_calc, abs=1e-12)


def test_power_balance_isolated_bus_zero():
    system = PowerSystem(
        buses=(Bus(1, "slack", 0.0, 0.0, 0.94, 1.06, 1.0),),
        branches=(),
        generators=(Generator(1, 1.0, 1.0, 0.0, -1.0, 1.0, -1.0, 1.0),),
        storages=(),
    )
    problem = fm.build_horizon_problem(system, flat_series(), 0, 1)
    y = fm.flat_start(problem)
    y[problem.layout.pg] = 0.0
    assert fm.eval_power_balance(problem, y, 1, 0) == (0.0, 0.0)


def test_power_balance_small_at_solution(case5_solved):
    problem, report = case5_solved
    for j in problem.system.bus_ids:
        dP, dQ = fm.eval_power_balance(problem, report.solution, j, 0)
        assert abs(dP) < 1e-3 and abs(dQ) < 1e-3


def test_storage_dynamics_examples():
    storage = StorageDevice(2, 0.0, 1.0, 0.2, 0.5, 0.5, 1.0, 1.0, 0.005)
    system = PowerSystem(
        buses=(
            Bus(1, "slack", 0.0, 0.0, 0.94, 1.06, 1.0),
            Bus(2, "load", 0.1, 0.0, 0.94, 1.06, None),
        ),
        branches=(Branch(1, 2, 0.02, 0.1, 0.0),),
        generators=(Generator(1, 1.0, 10.0, 0.0, 0.0, 2.0, -1.0, 1.0),),
        storages=(storage,),
    )
    problem = fm.build_horizon_problem(system, flat_series(), 0, 1)
    L = problem.layout
    y = fm.flat_start(problem)
    # stationary: P_in = P_out = 0, eps pretend 0 -> E(t+1)=E(t) gives eps residual
    y[L.pin] = 0.0
    y[L.pout] = 0.0
    y[L.e] = 0.2
    assert fm.eval_storage_dynamics(problem, y, 0, 0) == pytest.approx(0.005)
    # direct substitution: eta_c=1, P_in=0.5, eps=0.005, E(t)=0.2 -> E(t+1)=0.695
    y[L.pin] = 0.5
    y[L.e] = 0.695
    assert fm.eval_storage_dynamics(problem, y, 0, 0) == pytest.approx(0.0, abs=1e-15)


def test_storage_dynamics_matches_oracle_formula(case5, series5):
    problem = fm.build_horizon_problem(case5, series5, 0, 3)
    L = problem.layout
    rng = np.random.default_rng(11)
    y = random_interior_point(problem, rng)
    d = case5.storages[0]
    for t in range(3):
        e_prev = problem.e_start[0] if t == 0 else y[L.e[t - 1, 0]]
        expect = y[L.e[t, 0]] - (
            e_prev + d.eta_c * y[L.pin[t, 0]]
            - y[L.pout[t, 0]] / d.eta_d - d.eps_sbl
        )
        assert fm.eval_storage_dynamics(problem, y, 0, t) == pytest.approx(expect, abs=1e-14)


def test_line_current_zero_without_voltage_difference():
    system = two_bus_system()
    problem = fm.build_horizon_problem(system, flat_series(), 0, 1)
    L = problem.layout
    y = fm.flat_start(problem)
    y[L.v] = 1.0
    y[L.th] = 0.0
    assert fm.eval_line_current_sq(problem, y, 0, 0) == pytest.approx(0.0, abs=1e-15)


def test_line_current_quarter_turn():
    """|I|^2 = |(1 - e^{-i pi/2}) * (-i)|^2 = 2 for x=1, V=1."""
    system = two_bus_system(r=0.0, x=1.0)
    problem = fm.build_horizon_problem(system, flat_series(), 0, 1)
    L = problem.layout
    y = fm.flat_start(problem)
    y[L.v] = 1.0
    y[L.th[0, 0]] = np.pi / 2
    y[L.th[0, 1]] = 0.0
    assert fm.eval_line_current_sq(problem, y, 0, 0) == pytest.approx(2.0, abs=1e-12)


def test_line_limits_feasible_at_solution(case14_solved):
    problem, report = case14_solved
    for n, br in enumerate(problem.system.branches):
        if br.i_max is None:
            continue
        val = fm.eval_line_current_sq(problem, report.solution, n, 0)
        assert val <= br.i_max ** 2 + 1e-6


def test_objective_constant_term(case5, series5):
    problem = fm.build_horizon_problem(case5, series5, 0, 3)
    y = np.zeros(problem.layout.size)
    expect = 3 * sum(g.c for g in case5.generators)
    assert fm.eval_objective(problem, y) == pytest.approx(expect)


def test_objective_single_generator_value():
    system = two_bus_system()
    system = PowerSystem(
        buses=system.buses, branches=system.branches,
        generators=(Generator(1, 1.0, 2.0, 0.0, 0.0, 5.0, -1.0, 1.0),),
        storages=(),
    )
    problem = fm.build_horizon_problem(system, flat_series(), 0, 1)
    y = np.zeros(problem.layout.size)
    y[problem.layout.pg] = 3.0
    assert fm.eval_objective(problem, y) == pytest.approx(15.0)


def test_objective_matches_flat_reimplementation(case5, series5):
    problem = fm.build_horizon_problem(case5, series5, 0, 2)
    rng = np.random.default_rng(5)
    y = random_interior_point(problem, rng)
    total = 0.0
    for t in range(2):
        for i, g in enumerate(case5.generators):
            p = y[problem.layout.pg[t, i]]
            total += g.a * p * p + g.b * p + g.c
    assert fm.eval_objective(problem, y) == pytest.approx(total, rel=1e-14)


def test_objective_stacking_property(case5, series5):
    """N-step objective equals the sum of single-step objectives on slices."""
    N = 3
    problem = fm.build_horizon_problem(case5, series5, 0, N)
    rng = np.random.default_rng(7)
    y = random_interior_point(problem, rng)
    total = 0.0
    for t in range(N):
        single = fm.build_horizon_problem(case5, series5, t, 1)
        ys = np.zeros(single.layout.size)
        ys[single.layout.pg[0]] = y[problem.layout.pg[t]]
        total += fm.eval_objective(single, ys)
    assert fm.eval_objective(problem, y) == pytest.approx(total, rel=1e-12)


def test_kkt_residual_small_at_solution(case5_solved):
    problem, report = case5_solved
    res = fm.eval_kkt_residual(problem, report.solution)
    assert np.linalg.norm(res, np.inf) < 1e-3


def test_gradient_matches_finite_differences(case5, series5):
    """Acceptance 6(a): 20 random interior points, relative error < 1e-5."""
    problem = fm.build_horizon_problem(case5, series5, 0, 2)
    L = problem.layout
    rng = np.random.default_rng(123)
    for point in range(20):
        y = random_interior_point(problem, rng)
        problem.barrier_mu = 10 ** rng.uniform(-3, -1)
        res = fm.eval_kkt_residual(problem, y)
        cols = rng.choice(L.size, size=25, replace=False)
        for i in cols:
            h = 1e-6 * max(1.0, abs(y[i]))
            yp = y.copy(); yp[i] += h
            ym = y.copy(); ym[i] -= h
            fd = (fm.eval_lagrangian(problem, yp)
                  - fm.eval_lagrangian(problem, ym)) / (2 * h)
            scale = max(1.0, abs(res[i]), abs(fd))
            assert abs(res[i] - fd) / scale < 1e-5


def test_hessian_vector_matches_finite_differences(case5, series5):
    """Acceptance 6(b): Hessian-vector products vs directional differences."""
    problem = fm.build_horizon_problem(case5, series5, 0, 2)
    rng = np.random.default_rng(321)
    for point in range(20):
        y = random_interior_point(problem, rng)
        problem.barrier_mu = 10 ** rng.uniform(-3, -1)
        kkt = fm.assemble_hessian(problem, y)
        d = rng.standard_normal(problem.layout.size)
        h = 1e-6
        fd = (fm.eval_kkt_residual(problem, y + h * d)
              - fm.eval_kkt_residual(problem, y - h * d)) / (2 * h)
        Hd = kkt.hessian @ d
        err = np.linalg.norm(Hd - fd) / max(1.0, np.linalg.norm(Hd))
        assert err < 1e-4


def test_hessian_exactly_symmetric(case14, series14):
    problem = fm.build_horizon_problem(case14, series14, 0, 2)
    rng = np.random.default_rng(9)
    y = random_interior_point(problem, rng)
    H = fm.assemble_hessian(problem, y).hessian
    assert abs(H - H.T).max() == 0.0


def test_hessian_cost_diagonal(case5, series5):
    problem = fm.build_horizon_problem(case5, series5, 0, 1)
    L = problem.layout
    y = fm.flat_start(problem)
    H = fm.assemble_hessian(problem, y).hessian.toarray()
    for i, g in enumerate(case5.generators):
        assert H[L.pg[0, i], L.pg[0, i]] == pytest.approx(2.0 * g.a)


def test_hessian_storage_rows_constant_coefficients(case5, series5):
    problem = fm.build_horizon_problem(case5, series5, 0, 2)
    L = problem.layout
    rng = np.random.default_rng(2)
    y = random_interior_point(problem, rng)
    H = fm.assemble_hessian(problem, y).hessian.toarray()
    d = case5.storages[0]
    row = L.lam_sdyn[1, 0]
    assert H[row, L.e[1, 0]] == pytest.approx(1.0)
    assert H[row, L.e[0, 0]] == pytest.approx(-1.0)
    assert H[row, L.pin[1, 0]] == pytest.approx(-d.eta_c)
    assert H[row, L.pout[1, 0]] == pytest.approx(1.0 / d.eta_d)


def test_barrier_update_rule(case5, series5):
    problem = fm.build_horizon_problem(case5, series5, 0, 1)
    assert fm.barrier_rule(1e-2, 1e-5) == pytest.approx(2e-3)
    assert fm.barrier_rule(1e-9, 1e-12) == pytest.approx(1e-9)
    assert fm.barrier_rule(1e-2, 5.0) == pytest.approx(1e-2)  # not yet centered
    # the public operation reads the problem state
    problem.barrier_mu = 1e-2
    y = fm.flat_start(problem)
    assert fm.barrier_update(problem, y) == pytest.approx(1e-2)


def test_full_solve_barrier_floor_and_complementarity(case5_solved):
    """Frozen from the reference solve: final mu and complementarity."""
    problem, report = case5_solved
    L = problem.layout
    assert report.mu_final <= 1e-6
    s = report.solution[L.s_all]
    lam = report.solution[L.ineq_all]
    assert np.max(np.abs(s * lam)) <= 1e-5


def test_horizon_overrun_rejected(case5, series5):
    with pytest.raises(fm.LayoutError, match="overruns"):
        fm.build_horizon_problem(case5, series5, len(series5) - 1, 2)


def test_e_start_out_of_bounds_rejected(case5, series5):
    with pytest.raises(fm.LayoutError, match="e_start"):
        fm.build_horizon_problem(case5, series5, 0, 1, e_start=np.array([5.0]))


def test_storage_dynamics_stationary_without_standby_loss():
    storage = StorageDevice(2, 0.0, 1.0, 0.2, 0.5, 0.5, 0.9, 0.9, 0.0)
    system = PowerSystem(
        buses=(
            Bus(1, "slack", 0.0, 0.0, 0.94, 1.06, 1.0),
            Bus(2, "load", 0.1, 0.0, 0.94, 1.06, None),
        ),
        branches=(Branch(1, 2, 0.02, 0.1, 0.0),),
        generators=(Generator(1, 1.0, 10.0, 0.0, 0.0, 2.0, -1.0, 1.0),),
        storages=(storage,),
    )
    problem = fm.build_horizon_problem(system, flat_series(), 0, 1)
    L = problem.layout
    y = fm.flat_start(problem)
    y[L.pin] = 0.0
    y[L.pout] = 0.0
    y[L.e] = 0.2  # equal to e_start: stationary device
    assert fm.eval_storage_dynamics(problem, y, 0, 0) == 0.0


def test_recenter_barrier_consistency(case5, series5):
    """Recentred slacks match the constraint values (or the sqrt(mu) floor)
    and multipliers complement them to exactly mu."""
    problem = fm.build_horizon_problem(case5, series5, 0, 2)
    rng = np.random.default_rng(77)
    y = fm.flat_start(problem)
    y[problem.layout.x_all] += 0.03 * rng.standard_normal(problem.layout.n_x)
    mu0 = 1e-3
    out = fm.recenter_barrier(problem, y, mu0)
    L = problem.layout
    tr = problem._trig(out)
    ci = problem._inequality_values(out, tr)
    s = out[L.s_all]
    lam = out[L.ineq_all]
    assert np.all(s >= np.sqrt(mu0) - 1e-15)
    assert np.allclose(s * lam, mu0, rtol=1e-12)
    loose = ci < -np.sqrt(mu0)
    assert np.allclose(s[loose], -ci[loose], rtol=1e-12)
