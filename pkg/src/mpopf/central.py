"""Centralized solve: full Newton-Raphson on the barrier KKT system.

One iteration evaluates the residual and exact Hessian at the current
iterate, factors the sparse symmetric-indefinite matrix (SuperLU; scipy has
no sparse LDL^T), and applies a fraction-to-boundary damped step.  The
barrier parameter shrinks whenever the residual has been driven under
10*mu.  Convergence requires the full KKT residual below the tolerance,
constraint rows below min(tolerance, 1e-6), and mu at its floor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import formulation as fm
from .formulation import HorizonProblem, KktSystem

DEFAULT_TOL = 1e-3
DEFAULT_MAX_ITER = 500
FEAS_TOL_CAP = 1e-6
REG_DELTA0 = 1e-8
REG_DELTA_MAX = 1e-2


class FactorizationError(RuntimeError):
    """KKT matrix stayed singular through the regularization ladder."""


@dataclass
class SolveReport:
    """Outcome of one centralized solve."""

    converged: bool
    iterations: int
    solution: np.ndarray
    objective: float
    residual_norm: float
    per_iteration_seconds: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0
    mu_final: float = float("nan")
    diagnosis: str | None = None
    iterate_log: list[np.ndarray] | None = None
    residual_history: list[float] = field(default_factory=list)


def factor_kkt(H: sp.spmatrix, primal_rows: np.ndarray | None = None):
    """Factor H, falling back to diagonal regularization of the primal block.

    Returns (solve_callable, delta_used).  A factor whose U diagonal carries
    zeros or non-finite values counts as singular.  Raises FactorizationError
    once delta exceeds REG_DELTA_MAX.
    """
    n = H.shape[0]
    if primal_rows is None:
        primal_rows = np.arange(n)
    delta = 0.0
    while True:
        Hd = H if delta == 0.0 else H + sp.coo_matrix(
            (np.full(len(primal_rows), delta), (primal_rows, primal_rows)),
            shape=H.shape,
        )
        try:
            lu = spla.splu(sp.csc_matrix(Hd))
            du = lu.U.diagonal()
            if np.all(np.isfinite(du)) and np.all(du != 0.0):
                return lu.solve, delta
        except RuntimeError:
            pass
        delta = REG_DELTA0 if delta == 0.0 else delta * 10.0
        if delta > REG_DELTA_MAX:
            raise FactorizationError(
                f"KKT matrix singular after regularization up to {REG_DELTA_MAX}"
            )


def newton_step(kkt: KktSystem, primal_rows: np.ndarray | None = None) -> np.ndarray:
    """Solve H dy = -residual by sparse factorization (with fallback)."""
    solve, _ = factor_kkt(kkt.hessian, primal_rows)
    dy = solve(-kkt.residual)
    if not np.all(np.isfinite(dy)):
        raise FactorizationError("non-finite Newton step")
    return dy


def _norms(layout, R: np.ndarray) -> tuple[float, float]:
    full = float(np.linalg.norm(R, np.inf))
    cons = float(np.linalg.norm(R[layout.constraint_rows], np.inf)) \
        if len(layout.constraint_rows) else 0.0
    return full, cons


def _apply_mu_change(problem: HorizonProblem, y, R, H, new_mu: float):
    """Shift the barrier rows of an already-assembled (R, H) to a new mu."""
    L = problem.layout
    delta = new_mu - problem.barrier_mu
    s = y[L.s_all]
    R[L.s_all] -= delta / s
    H = (H + sp.coo_matrix(
        (delta / s ** 2, (L.s_all, L.s_all)), shape=H.shape
    )).tocsr()
    problem.barrier_mu = new_mu
    return R, H


def solve_centralized(problem: HorizonProblem, y0: np.ndarray | None = None,
                      tolerance: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER,
                      mu0: float | None = None,
                      log_iterates: bool = False) -> SolveReport:
    """Newton-KKT interior-point solve of the stacked horizon problem.

    ``y0`` defaults to the flat start; passing ``mu0`` resumes at a given
    barrier value (the flat start's multiplier init uses it too).
    """
    L = problem.layout
    if mu0 is not None:
        problem.barrier_mu = mu0
    else:
        problem.barrier_mu = fm.BARRIER_MU0
    if y0 is None:
        y0 = fm.flat_start(problem, problem.barrier_mu)
    y = np.asarray(y0, dtype=float).copy()
    if y.shape != (L.size,):
        raise ValueError(f"y0 has shape {y.shape}, layout needs ({L.size},)")

    feas_tol = min(tolerance, FEAS_TOL_CAP)
    per_iter: list[float] = []
    res_hist: list[float] = []
    iterate_log: list[np.ndarray] | None = [] if log_iterates else None
    t_start = time.perf_counter()
    converged = False
    diagnosis = None
    res_inf = float("inf")

    for _ in range(max_iter):
        R, H = problem._evaluate(y, need_hessian=True)
        res_inf, cons_inf = _norms(L, R)
        if (res_inf < tolerance and cons_inf < feas_tol
                and problem.barrier_mu <= 10.0 * fm.BARRIER_MU_MIN):
            converged = True
            break
        res_hist.append(res_inf)
        new_mu = fm.barrier_rule(problem.barrier_mu, res_inf)
        if new_mu != problem.barrier_mu:
            R, H = _apply_mu_change(problem, y, R, H, new_mu)

        t0 = time.perf_counter()
        dy = newton_step(KktSystem(H, R, y), L.primal_rows)
        alpha = fm.fraction_to_boundary(L, y, dy)
        y = y + alpha * dy
        per_iter.append(time.perf_counter() - t0)
        if iterate_log is not None:
            iterate_log.append(y.copy())
    else:
        diagnosis = f"max_iter={max_iter} exceeded (residual {res_inf:.3e})"

    return SolveReport(
        converged=converged,
        iterations=len(per_iter),
        solution=y,
        objective=fm.eval_objective(problem, y),
        residual_norm=res_inf,
        per_iteration_seconds=per_iter,
        wall_seconds=time.perf_counter() - t_start,
        mu_final=problem.barrier_mu,
        diagnosis=diagnosis,
        iterate_log=iterate_log,
        residual_history=res_hist,
    )
