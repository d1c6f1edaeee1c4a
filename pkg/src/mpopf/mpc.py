"""Receding-horizon driver: solve the N-step problem, apply the first step,
shift the window, carry storage energy forward, and accumulate metrics.

Steps are strictly sequential (each depends on the previous applied state);
the next solve warm-starts from the previous solution shifted by one
interval with the last step duplicated.  The applied storage trajectory is
recomputed from the energy-update formula, so it satisfies the dynamics
exactly rather than to solver tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import formulation as fm
from .central import DEFAULT_MAX_ITER, DEFAULT_TOL, solve_centralized
from .model import PowerSystem, TimeSeries
from .ocd import (
    METHOD_OCD,
    METHOD_OCDC,
    DistributedReport,
    convergence_time,
    solve_distributed,
)
from .partition import Partition

METHOD_CENTRALIZED = "centralized"
METHODS = (METHOD_CENTRALIZED, METHOD_OCD, METHOD_OCDC)

# families shifted one interval when warm-starting the next step
_SHIFT_FAMILIES = (
    "th", "v", "pg", "qg", "pin", "pout", "e",
    "s_v_lo", "s_v_hi", "s_pg_lo", "s_pg_hi", "s_pin_lo", "s_pin_hi",
    "s_pout_lo", "s_pout_hi", "s_e_lo", "s_e_hi", "s_line",
    "lam_p", "lam_q", "lam_sdyn", "lam_slack", "lam_vset",
    "m_v_lo", "m_v_hi", "m_pg_lo", "m_pg_hi", "m_pin_lo", "m_pin_hi",
    "m_pout_lo", "m_pout_hi", "m_e_lo", "m_e_hi", "m_line",
)


@dataclass
class MpcConfig:
    """One receding-horizon experiment configuration."""

    horizon: int
    method: str = METHOD_CENTRALIZED
    partition: Partition | None = None
    steps_to_run: int = 1
    tolerance: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    reference_interval: int = 0  # used by the partitioning front end
    warm_start: bool = True
    warm_mu0: float = 1e-3  # shifted near-optimal iterates need less centering

    def validate(self, series_len: int) -> None:
        if self.horizon < 1 or self.steps_to_run < 1:
            raise ValueError("horizon and steps_to_run must be >= 1")
        if self.steps_to_run + self.horizon > series_len + 1:
            raise ValueError(
                f"steps_to_run={self.steps_to_run} with horizon={self.horizon} "
                f"overruns the {series_len}-interval series"
            )
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.method != METHOD_CENTRALIZED and self.partition is None:
            raise ValueError(f"method {self.method} needs a partition")


@dataclass
class MpcResult:
    """Applied trajectories and per-step solver reports."""

    per_step: list
    applied_pg: np.ndarray
    applied_qg: np.ndarray
    applied_pin: np.ndarray
    applied_pout: np.ndarray
    applied_e: np.ndarray
    total_cost: float = 0.0
    total_ramping: float = 0.0
    e_start: np.ndarray = field(default_factory=lambda: np.empty(0))


class MpcRunError(RuntimeError):
    """A step failed to converge; carries the partial result."""

    def __init__(self, step_index: int, message: str, partial: MpcResult):
        super().__init__(f"MPC step {step_index}: {message}")
        self.step_index = step_index
        self.partial = partial


def total_cost(system: PowerSystem, pg: np.ndarray) -> float:
    """Generation cost ($) of an applied schedule, summed over steps."""
    a = np.array([g.a for g in system.generators])
    b = np.array([g.b for g in system.generators])
    c = np.array([g.c for g in system.generators])
    pg = np.atleast_2d(pg)
    return float((a * pg ** 2 + b * pg + c).sum())


def total_ramping(pg: np.ndarray) -> float:
    """Sum over generators and consecutive steps of |P(t+1) - P(t)| (p.u.)."""
    pg = np.atleast_2d(pg)
    if pg.shape[0] < 2:
        return 0.0
    return float(np.abs(np.diff(pg, axis=0)).sum())


def shift_solution(layout, y_prev: np.ndarray) -> np.ndarray:
    """Warm start: shift every per-step block one interval earlier and
    duplicate the final step."""
    y0 = y_prev.copy()
    for name in _SHIFT_FAMILIES:
        arr = getattr(layout, name)
        if arr.size == 0 or arr.shape[0] == 1:
            continue
        y0[arr[:-1].ravel()] = y_prev[arr[1:].ravel()]
        y0[arr[-1]] = y_prev[arr[-1]]
    return y0


def step_convergence_time(report) -> float:
    """Convergence-time metric t = n * max_k median(t_k) for either report kind."""
    if isinstance(report, DistributedReport):
        return report.convergence_time
    samples = {0: report.per_iteration_seconds}
    return convergence_time(report.iterations, samples) \
        if report.per_iteration_seconds else 0.0


def run_mpc(system: PowerSystem, series: TimeSeries, config: MpcConfig) -> MpcResult:
    """Run the receding-horizon loop and collect the applied schedule.

    Raises MpcRunError (with partial results attached) as soon as any step
    fails to converge.
    """
    config.validate(len(series))
    G = len(system.generators)
    S = len(system.storages)
    steps = config.steps_to_run
    pg = np.zeros((steps, G))
    qg = np.zeros((steps, G))
    pin = np.zeros((steps, S))
    pout = np.zeros((steps, S))
    e_applied = np.zeros((steps, S))
    reports: list = []

    e_start0 = np.array([d.e_init for d in system.storages])
    e_cur = e_start0.copy()
    eta_c = np.array([d.eta_c for d in system.storages])
    eta_d = np.array([d.eta_d for d in system.storages])
    eps = np.array([d.eps_sbl for d in system.storages])
    y_prev = None

    def partial(upto: int) -> MpcResult:
        res = MpcResult(
            per_step=reports,
            applied_pg=pg[:upto], applied_qg=qg[:upto],
            applied_pin=pin[:upto], applied_pout=pout[:upto],
            applied_e=e_applied[:upto], e_start=e_start0,
        )
        res.total_cost = total_cost(system, pg[:upto])
        res.total_ramping = total_ramping(pg[:upto])
        return res

    for step in range(steps):
        problem = fm.build_horizon_problem(
            system, series, step, config.horizon, e_cur
        )
        y0 = None
        mu0 = None
        if config.warm_start and y_prev is not None:
            y0 = fm.recenter_barrier(
                problem, shift_solution(problem.layout, y_prev), config.warm_mu0
            )
            mu0 = config.warm_mu0
        if config.method == METHOD_CENTRALIZED:
            rep = solve_centralized(
                problem, y0=y0, tolerance=config.tolerance,
                max_iter=config.max_iter, mu0=mu0,
            )
        else:
            rep = solve_distributed(
                problem, config.partition, config.method, y0=y0,
                tolerance=config.tolerance, max_iter=config.max_iter, mu0=mu0,
            )
        reports.append(rep)
        if not rep.converged:
            raise MpcRunError(step, rep.diagnosis or "did not converge",
                              partial(step))
        L = problem.layout
        y = rep.solution
        pg[step] = y[L.pg[0]]
        qg[step] = y[L.qg[0]]
        pin[step] = y[L.pin[0]]
        pout[step] = y[L.pout[0]]
        # exact energy update from the applied decisions
        e_cur = e_cur + eta_c * pin[step] - pout[step] / eta_d - eps
        e_applied[step] = e_cur
        y_prev = y

    return partial(steps)
