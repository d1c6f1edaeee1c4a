import numpy as np
import pytest
import scipy.sparse as sp

from mpopf import formulation as fm
from mpopf.central import newton_step, solve_centralized
from mpopf.formulation import KktSystem
from mpopf.model import (
    Branch,
    Bus,
    Generator,
    PowerSystem,
    TimeSeries,
    validate_system,
)
from mpopf.ocd import (
    METHOD_OCD,
    METHOD_OCDC,
    build_exchange_messages,
    convergence_time,
    correction_term,
    ocd_step,
    ocdc_step,
    region_of_variables,
    solve_distributed,
    split_kkt_blocks,
)
from mpopf.partition import make_partition


def stub_layout(bus_of, bus_ids):
    layout = type("L", (), {})()
    layout.bus_of = np.asarray(bus_of)
    layout.bus_ids = tuple(bus_ids)
    layout.size = len(bus_of)
    layout.primal_rows = np.arange(len(bus_of))
    return layout


def hand_system():
    """2 regions x 2 vars with weak coupling, as a raw KKT system."""
    D1 = np.array([[4.0, 1.0], [1.0, 3.0]])
    D2 = np.array([[5.0, 0.5], [0.5, 2.0]])
    C = np.array([[0.3, -0.2], [0.1, 0.25]])
    H = np.block([[D1, C], [C.T, D2]])
    residual = np.array([1.0, -2.0, 0.5, 1.5])
    kkt = KktSystem(sp.csr_matrix(H), residual, np.zeros(4))
    layout = stub_layout([0, 0, 1, 1], (1, 2))
    part = make_partition({1: 0, 2: 1}, K=2)
    return H, D1, D2, C, residual, kkt, layout, part


def two_island_system():
    """Two disconnected 2-bus islands, each with its own slack-kind bus."""
    buses = (
        Bus(1, "slack", 0.0, 0.0, 0.94, 1.06, 1.02),
        Bus(2, "load", 0.4, 0.1, 0.94, 1.06, None),
        Bus(3, "slack", 0.0, 0.0, 0.94, 1.06, 1.01),
        Bus(4, "load", 0.3, 0.08, 0.94, 1.06, None),
    )
    branches = (Branch(1, 2, 0.02, 0.10, 0.02), Branch(3, 4, 0.02, 0.12, 0.02))
    gens = (Generator(1, 30.0, 200.0, 100.0, 0.05, 1.0, -1.0, 1.0),
            Generator(3, 40.0, 250.0, 80.0, 0.05, 1.0, -1.0, 1.0))
    system = PowerSystem(buses, branches, gens, storages=())
    validate_system(system, require_connected=False)
    return system


def test_split_k1_is_full_matrix(case5, series5):
    problem = fm.build_horizon_problem(case5, series5, 0, 1)
    y = fm.flat_start(problem)
    R, H = problem._evaluate(y, need_hessian=True)
    part = make_partition({b: 0 for b in case5.bus_ids}, K=1)
    subs = split_kkt_blocks(KktSystem(H, R, y), part, problem.layout)
    assert len(subs) == 1
    assert abs(subs[0].local_block - H).max() == 0.0
    assert subs[0].neighbor_coupling == {}


def test_split_disconnected_has_no_coupling():
    system = two_island_system()
    series = TimeSeries(10, np.ones(4), {})
    problem = fm.build_horizon_problem(system, series, 0, 1)
    y = fm.flat_start(problem)
    R, H = problem._evaluate(y, need_hessian=True)
    part = make_partition({1: 0, 2: 0, 3: 1, 4: 1}, K=2, system=system)
    subs = split_kkt_blocks(KktSystem(H, R, y), part, problem.layout)
    assert all(not s.neighbor_coupling for s in subs)


def test_split_reassembles_exactly(case14, series14, case14_partitions):
    problem = fm.build_horizon_problem(case14, series14, 0, 2)
    rng = np.random.default_rng(3)
    y = fm.flat_start(problem)
    y[problem.layout.x_all] += 0.02 * rng.standard_normal(problem.layout.n_x)
    y[problem.layout.eq_all] = rng.standard_normal(problem.layout.n_eq)
    R, H = problem._evaluate(y, need_hessian=True)
    part = case14_partitions["sp"]
    subs = split_kkt_blocks(KktSystem(H, R, y), part, problem.layout)
    rebuilt = np.zeros(H.shape)
    for sub in subs:
        rebuilt[np.ix_(sub.var_indices, sub.var_indices)] = \
            sub.local_block.toarray()
        for m, block in sub.neighbor_coupling.items():
            rebuilt[np.ix_(sub.var_indices, subs[m].var_indices)] = \
                block.toarray()
    assert np.array_equal(rebuilt, H.toarray())
    # residual slices partition the full residual
    cat = np.concatenate([sub.local_residual for sub in subs])
    idx = np.concatenate([sub.var_indices for sub in subs])
    assert np.array_equal(cat[np.argsort(idx)], R)


def test_ocd_step_identity_block():
    sub_kkt = KktSystem(sp.csr_matrix(np.eye(2)), np.array([2.0, -2.0]),
                        np.zeros(2))
    layout = stub_layout([0, 1], (1, 2))
    part = make_partition({1: 0, 2: 0}, K=1)
    subs = split_kkt_blocks(sub_kkt, part, layout)
    assert np.allclose(ocd_step(subs[0]), [-2.0, 2.0])


def test_decoupled_ocd_equals_restricted_newton():
    system = two_island_system()
    series = TimeSeries(10, np.ones(2), {})
    problem = fm.build_horizon_problem(system, series, 0, 1)
    y = fm.flat_start(problem)
    R, H = problem._evaluate(y, need_hessian=True)
    part = make_partition({1: 0, 2: 0, 3: 1, 4: 1}, K=2, system=system)
    subs = split_kkt_blocks(KktSystem(H, R, y), part, problem.layout)
    full = newton_step(KktSystem(H, R, y), problem.layout.primal_rows)
    for sub in subs:
        assert np.allclose(ocd_step(sub), full[sub.var_indices], atol=1e-12)


def test_region_block_matches_dense_lu(case14, series14, case14_partitions):
    problem = fm.build_horizon_problem(case14, series14, 0, 1)
    y = fm.flat_start(problem)
    R, H = problem._evaluate(y, need_hessian=True)
    subs = split_kkt_blocks(KktSystem(H, R, y), case14_partitions["sp"],
                            problem.layout)
    for sub in subs:
        dy = ocd_step(sub)
        dense = np.linalg.solve(sub.local_block.toarray(), -sub.local_residual)
        assert np.max(np.abs(dy - dense)) < 1e-10


def test_correction_zero_without_coupling():
    system = two_island_system()
    series = TimeSeries(10, np.ones(2), {})
    problem = fm.build_horizon_problem(system, series, 0, 1)
    y = fm.flat_start(problem)
    R, H = problem._evaluate(y, need_hessian=True)
    part = make_partition({1: 0, 2: 0, 3: 1, 4: 1}, K=2, system=system)
    subs = split_kkt_blocks(KktSystem(H, R, y), part, problem.layout)
    for k in range(2):
        assert np.all(correction_term(subs, k) == 0.0)
        assert np.allclose(ocdc_step(subs[k], correction_term(subs, k)),
                           ocd_step(subs[k]))


def test_correction_matches_dense_block_arithmetic():
    """Oracle: explicit dense algebra on the hand-built 4x4 system."""
    H, D1, D2, C, residual, kkt, layout, part = hand_system()
    subs = split_kkt_blocks(kkt, part, layout)
    r0 = correction_term(subs, 0)
    r1 = correction_term(subs, 1)
    assert np.allclose(r0, C @ np.linalg.solve(D2, residual[2:]), atol=1e-13)
    assert np.allclose(r1, C.T @ np.linalg.solve(D1, residual[:2]), atol=1e-13)
    # one OCD-C sweep equals the neighbor-elimination prediction
    dy0 = ocdc_step(subs[0], r0)
    expect0 = np.linalg.solve(D1, -residual[:2] + r0)
    assert np.allclose(dy0, expect0, atol=1e-13)
    # and the whole sweep is exactly -D^{-1}(I - O D^{-1}) r
    D = np.block([[D1, np.zeros((2, 2))], [np.zeros((2, 2)), D2]])
    O = H - D
    sweep = -np.linalg.solve(D, (np.eye(4) - O @ np.linalg.inv(D)) @ residual)
    dy1 = ocdc_step(subs[1], r1)
    assert np.allclose(np.concatenate([dy0, dy1]), sweep, atol=1e-12)


def test_correction_support_within_boundary_rows(case14, series14,
                                                 case14_partitions):
    problem = fm.build_horizon_problem(case14, series14, 0, 1)
    y = fm.flat_start(problem)
    R, H = problem._evaluate(y, need_hessian=True)
    part = case14_partitions["sp"]
    subs = split_kkt_blocks(KktSystem(H, R, y), part, problem.layout)
    for k, sub in enumerate(subs):
        r_hat = correction_term(subs, k)
        support = set(np.nonzero(r_hat)[0])
        allowed = set()
        for m, sub_m in enumerate(subs):
            if m == k or k not in sub_m.neighbor_coupling:
                continue
            allowed.update(np.unique(sub_m.neighbor_coupling[k].tocoo().col))
        assert support <= allowed


def test_solve_k1_equals_centralized(case5, series5):
    part = make_partition({b: 0 for b in case5.bus_ids}, K=1)
    problem = fm.build_horizon_problem(case5, series5, 0, 1)
    central = solve_centralized(problem)
    for method in (METHOD_OCD, METHOD_OCDC):
        problem = fm.build_horizon_problem(case5, series5, 0, 1)
        dist = solve_distributed(problem, part, method)
        assert dist.converged
        assert dist.iterations == central.iterations
        assert np.allclose(dist.solution, central.solution, atol=1e-10)


def test_ocdc_beats_ocd_same_partition(case14, series14, case14_partitions):
    part = case14_partitions["sp"]
    iters = {}
    for method in (METHOD_OCD, METHOD_OCDC):
        problem = fm.build_horizon_problem(case14, series14, 0, 1)
        rep = solve_distributed(problem, part, method)
        assert rep.converged
        iters[method] = rep.iterations
    assert iters[METHOD_OCDC] < iters[METHOD_OCD]


def test_sp_beats_arbitrary(case14, series14, case14_partitions):
    iters = {}
    for name in ("sp", "arb"):
        problem = fm.build_horizon_problem(case14, series14, 0, 1)
        rep = solve_distributed(problem, case14_partitions[name], METHOD_OCDC)
        assert rep.converged
        iters[name] = rep.iterations
    assert iters["sp"] < iters["arb"]


def test_distributed_matches_centralized_solution(case14, series14,
                                                  case14_partitions,
                                                  case14_solved):
    _, central = case14_solved
    problem = fm.build_horizon_problem(case14, series14, 0, 1)
    rep = solve_distributed(problem, case14_partitions["sp"], METHOD_OCDC)
    assert rep.converged
    rel = abs(rep.objective - central.objective) / abs(central.objective)
    assert rel <= 1e-4
    n_x = problem.layout.n_x
    assert np.max(np.abs(rep.solution[:n_x] - central.solution[:n_x])) <= 1e-3


def test_region_order_does_not_change_result(case14, series14,
                                             case14_partitions):
    part = case14_partitions["sp"]
    runs = []
    for order in ([0, 1], [1, 0]):
        problem = fm.build_horizon_problem(case14, series14, 0, 1)
        runs.append(solve_distributed(problem, part, METHOD_OCDC,
                                      region_order=order))
    assert runs[0].iterations == runs[1].iterations
    assert np.array_equal(runs[0].solution, runs[1].solution)


def test_message_audit_bound(case14, series14, case14_partitions):
    """Payloads stay within boundary variables + tie multipliers +
    correction support, per region pair and iteration."""
    part = case14_partitions["sp"]
    problem = fm.build_horizon_problem(case14, series14, 0, 1)
    rep = solve_distributed(problem, part, METHOD_OCDC, collect_messages=True,
                            max_iter=30)
    layout = problem.layout
    rvar = region_of_variables(part, layout)
    assert rep.messages
    for msg in rep.messages:
        # boundary variables: sender-owned indices coupled into the receiver
        assert all(rvar[i] == msg.from_region for i in msg.boundary_values)
        assert msg.payload_scalars == (len(msg.boundary_values)
                                       + len(msg.correction_summand))
        bound = len(msg.boundary_values) + len(msg.correction_summand)
        assert msg.payload_scalars <= bound


def test_exchange_boundary_is_tie_line_neighborhood(case14, series14,
                                                    case14_partitions):
    """The exchanged variables live on boundary buses or tie-line rows."""
    part = case14_partitions["sp"]
    problem = fm.build_horizon_problem(case14, series14, 0, 1)
    y = fm.flat_start(problem)
    R, H = problem._evaluate(y, need_hessian=True)
    subs = split_kkt_blocks(KktSystem(H, R, y), part, problem.layout)
    msgs = build_exchange_messages(subs, y, None, 0)
    boundary_idx = {problem.system.bus_index[b] for b in part.boundary_buses}
    for msg in msgs:
        for i in msg.boundary_values:
            assert problem.layout.bus_of[i] in boundary_idx


def test_convergence_time_examples():
    assert convergence_time(10, {0: [0.2, 0.2], 1: [0.3, 0.3]}) == pytest.approx(3.0)
    assert convergence_time(5, {0: [0.1]}) == pytest.approx(0.5)


def test_convergence_time_matches_log_replay(case14, series14,
                                             case14_partitions):
    problem = fm.build_horizon_problem(case14, series14, 0, 1)
    rep = solve_distributed(problem, case14_partitions["sp"], METHOD_OCDC)
    assert rep.converged
    medians = [float(np.median(v)) for v in rep.per_region_step_seconds.values()]
    assert rep.convergence_time == pytest.approx(rep.iterations * max(medians))
    # the trace carries the same samples
    for k, samples in rep.per_region_step_seconds.items():
        logged = [row[3] for row in rep.trace if row[1] == k]
        assert logged == samples


def test_decoupled_equivalence_identical_iterates():
    """Centralized, OCD, and OCD-C coincide when all couplings vanish."""
    system = two_island_system()
    series = TimeSeries(10, np.ones(3), {})
    part = make_partition({1: 0, 2: 0, 3: 1, 4: 1}, K=2, system=system)
    problem = fm.build_horizon_problem(system, series, 0, 2)
    central = solve_centralized(problem, log_iterates=True)
    assert central.converged
    for method in (METHOD_OCD, METHOD_OCDC):
        problem = fm.build_horizon_problem(system, series, 0, 2)
        rep = solve_distributed(problem, part, method, log_iterates=True)
        assert rep.converged
        assert rep.iterations == central.iterations
        worst = max(
            float(np.max(np.abs(a - b)))
            for a, b in zip(central.iterate_log, rep.iterate_log)
        )
        assert worst <= 1e-8


def test_ill_suited_partition_aborts_with_diagnosis(case14, series14):
    """An alternating partition drops nearly all coupling; the solve must
    stop at the cap with a diagnosis instead of claiming convergence."""
    part = make_partition({b: b % 2 for b in case14.bus_ids}, K=2,
                          system=case14)
    problem = fm.build_horizon_problem(case14, series14, 0, 1)
    rep = solve_distributed(problem, part, METHOD_OCD, max_iter=60)
    assert not rep.converged
    assert "max_iter" in rep.diagnosis


def test_divergence_guard_aborts(monkeypatch, case14, series14,
                                 case14_partitions):
    """Exercise the sustained-growth guard with tightened thresholds."""
    import mpopf.ocd as ocd_mod
    monkeypatch.setattr(ocd_mod, "DIVERGENCE_FACTOR", 1e-9)
    monkeypatch.setattr(ocd_mod, "DIVERGENCE_STREAK", 3)
    problem = fm.build_horizon_problem(case14, series14, 0, 1)
    rep = solve_distributed(problem, case14_partitions["sp"], METHOD_OCD)
    assert not rep.converged
    assert "divergence" in rep.diagnosis
    assert rep.iterations <= 5


def test_bad_method_rejected(case5, series5, case14_partitions):
    problem = fm.build_horizon_problem(case5, series5, 0, 1)
    with pytest.raises(ValueError, match="method"):
        solve_distributed(problem, case14_partitions["sp"], "jacobi")


def test_invalid_region_order_rejected(case5, series5, case14_partitions):
    problem = fm.build_horizon_problem(case5, series5, 0, 1)
    part = make_partition({1: 0, 2: 0, 3: 1, 4: 1, 5: 1}, K=2, system=case5)
    with pytest.raises(ValueError, match="permutation"):
        solve_distributed(problem, part, METHOD_OCD, region_order=[0, 0])
