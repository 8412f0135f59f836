"""Solve contracts for the relaxation LP and the cut-generating programs.

Everything downstream talks to two entry points: `solve`, which handles a
generic inequality-form conic problem (nonnegative rows followed by
second-order cone blocks), and `solve_relaxation`, which solves the pooled
LP relaxation of an instance. LPs go to HiGHS through scipy; problems with
cone blocks go to cvxopt's conelp. Both paths report duals with the sign
convention c + G^T lambda = 0, lambda in the dual cone.

The default tolerance is 1e-8, overridable per call or via the
CPLOPT_SOLVER_TOL environment variable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .model import CutPool, ProblemInstance

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical_failure"


class RelaxationError(RuntimeError):
    """Raised when the pooled relaxation is infeasible or unbounded."""


def default_tol() -> float:
    value = os.environ.get("CPLOPT_SOLVER_TOL")
    return float(value) if value else 1e-8


@dataclass
class ConicProblem:
    """minimize c.y subject to h - G y in (R+^dim_l x Q^{q1} x ...)."""

    c: np.ndarray
    G: np.ndarray
    h: np.ndarray
    dim_l: int
    dims_q: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.h = np.asarray(self.h, dtype=float).ravel()
        rows = self.dim_l + sum(self.dims_q)
        if self.G.shape != (rows, len(self.c)) or self.h.shape != (rows,):
            raise ValueError(
                f"inconsistent conic data: G {self.G.shape}, h {self.h.shape}, "
                f"dim_l {self.dim_l}, dims_q {self.dims_q}"
            )


@dataclass
class ConicSolution:
    y: np.ndarray
    duals: np.ndarray
    objective: float
    status: str
    kkt_residual: float = np.nan

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _kkt_residual(problem: ConicProblem, y: np.ndarray, duals: np.ndarray) -> float:
    """Worst relative KKT violation: stationarity, cone feasibility, gap."""
    scale = 1.0 + max(np.abs(problem.c).max(initial=0.0),
                      np.abs(problem.h).max(initial=0.0))
    station = np.abs(problem.c + problem.G.T @ duals).max(initial=0.0)
    s = problem.h - problem.G @ y
    feas = max(0.0, -s[:problem.dim_l].min(initial=0.0))
    dual_feas = max(0.0, -duals[:problem.dim_l].min(initial=0.0))
    offset = problem.dim_l
    for q in problem.dims_q:
        blk = s[offset:offset + q]
        feas = max(feas, np.linalg.norm(blk[1:]) - blk[0])
        zblk = duals[offset:offset + q]
        dual_feas = max(dual_feas, np.linalg.norm(zblk[1:]) - zblk[0])
        offset += q
    gap = abs(float(s @ duals))
    return max(station, feas, dual_feas, gap) / scale


def solve(problem: ConicProblem, tol: float | None = None) -> ConicSolution:
    """Status-accurate solve; optimal solutions carry checked KKT residuals."""
    if tol is None:
        tol = default_tol()
    if not problem.dims_q:
        return _solve_lp(problem, tol)
    return _solve_socp(problem, tol)


def _solve_lp(problem: ConicProblem, tol: float) -> ConicSolution:
    res = linprog(problem.c, A_ub=problem.G, b_ub=problem.h,
                  bounds=[(None, None)] * len(problem.c), method="highs")
    if res.status == 2:
        return ConicSolution(np.array([]), np.array([]), np.nan, INFEASIBLE)
    if res.status == 3:
        return ConicSolution(np.array([]), np.array([]), np.nan, UNBOUNDED)
    if res.status != 0:
        return ConicSolution(np.array([]), np.array([]), np.nan, NUMERICAL_FAILURE)
    duals = -np.asarray(res.ineqlin.marginals)
    y = np.asarray(res.x)
    residual = _kkt_residual(problem, y, duals)
    status = OPTIMAL if residual <= tol else NUMERICAL_FAILURE
    return ConicSolution(y, duals, float(res.fun), status, residual)


def _solve_socp(problem: ConicProblem, tol: float) -> ConicSolution:
    from cvxopt import matrix
    from cvxopt.solvers import conelp

    options = {"show_progress": False, "abstol": 1e-10, "reltol": 1e-10,
               "feastol": 1e-9, "maxiters": 200}
    dims = {"l": problem.dim_l, "q": list(problem.dims_q), "s": []}
    try:
        sol = conelp(matrix(problem.c), matrix(problem.G), matrix(problem.h),
                     dims, options=options)
    except (ValueError, ArithmeticError, ZeroDivisionError):
        return ConicSolution(np.array([]), np.array([]), np.nan, NUMERICAL_FAILURE)
    if sol["status"] == "primal infeasible":
        return ConicSolution(np.array([]), np.array([]), np.nan, INFEASIBLE)
    if sol["status"] == "dual infeasible":
        return ConicSolution(np.array([]), np.array([]), np.nan, UNBOUNDED)
    if sol["status"] != "optimal" or sol["x"] is None:
        return ConicSolution(np.array([]), np.array([]), np.nan, NUMERICAL_FAILURE)
    y = np.array(sol["x"]).ravel()
    duals = np.array(sol["z"]).ravel()
    residual = _kkt_residual(problem, y, duals)
    status = OPTIMAL if residual <= tol else NUMERICAL_FAILURE
    return ConicSolution(y, duals, float(problem.c @ y), status, residual)


@dataclass
class RelaxationSolution:
    """LP optimum of Eq-style pooled relaxation with its dual certificates.

    row_duals covers the instance rows then the pool rows, in order;
    lower_duals are the reduced costs supporting x >= 0.
    """

    x: np.ndarray
    z: float
    row_duals: np.ndarray
    lower_duals: np.ndarray


def stacked_rows(instance: ProblemInstance,
                 pool: CutPool | None) -> tuple[np.ndarray, np.ndarray]:
    if pool is None or len(pool) == 0:
        return instance.A, instance.b
    G, h = pool.matrix()
    return np.vstack([instance.A, G]), np.concatenate([instance.b, h])


def solve_relaxation(instance: ProblemInstance, pool: CutPool | None = None,
                     tol: float | None = None) -> RelaxationSolution:
    """Solve min c.x s.t. A x <= b, G x <= h, x >= 0 with the pool stacked.

    Infeasibility is a hard error here: the base instance is assumed
    feasible, so an infeasible pooled relaxation means an invalid cut.
    Unboundedness violates the bounded-instance assumption.
    """
    if tol is None:
        tol = default_tol()
    M, q = stacked_rows(instance, pool)
    res = linprog(instance.c, A_ub=M, b_ub=q,
                  bounds=[(0, None)] * instance.n, method="highs")
    if res.status == 2:
        raise RelaxationError(
            f"pooled relaxation infeasible on {instance.name or 'instance'}: "
            "some pooled row is not a valid inequality"
        )
    if res.status == 3:
        raise RelaxationError("relaxation unbounded; instance violates the "
                              "boundedness assumption")
    if res.status != 0:
        raise RelaxationError(f"relaxation solve failed: {res.message}")
    x = np.asarray(res.x)
    row_duals = -np.asarray(res.ineqlin.marginals)
    lower_duals = np.asarray(res.lower.marginals)
    violation = float(np.max(M @ x - q, initial=0.0))
    if violation > 10 * tol:
        raise RelaxationError(f"relaxation primal violation {violation:.2e}")
    return RelaxationSolution(x=x, z=float(res.fun), row_duals=row_duals,
                              lower_duals=lower_duals)
