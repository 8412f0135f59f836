"""Implicit differentiation of the relaxation and separation solves.

Forward solves are exact LPs or SOCPs; the backward pass differentiates the
optimality conditions at the returned primal-dual pair. For LPs the adjoint
is the active-row system M_S^T w = cotangent, with S the rows whose
multipliers clear a strict-complementarity margin of 1e-7. Whenever that
system is not square, cannot be solved, or some binding row carries a zero
multiplier, the backward pass switches to the full KKT system of a
quadratically regularized model (1e-8 on the primal block) and flags the
switch in its diagnostics. Cone programs always go through the full KKT
system, with the same regularized retry. LP solutions are piecewise
constant in the objective, so the active-set path reports a zero gradient
for objective-side data; the cone path moves smoothly and does not.

A finite-difference oracle closes the loop: central differences per
coordinate, with coordinates whose one-sided quotients disagree flagged as
unreliable (a kink or an active-set change inside the stencil) rather than
counted as failures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cgp import CgpLayout
from .conic import ConicProblem, ConicSolution, stacked_rows
from .model import CutPool, ProblemInstance

logger = logging.getLogger("cplopt.autodiff")

ACTIVE_TOL = 1e-7
REGULARIZATION = 1e-8


@dataclass
class VjpRequest:
    """One backward request: a solved layer, a cotangent on its primal, and
    the names of the parameters the caller wants gradients for."""

    solution: object
    cotangent: np.ndarray
    wrt: tuple[str, ...] = ()

    def __post_init__(self):
        self.cotangent = np.asarray(self.cotangent, dtype=float).ravel()
        primal = getattr(self.solution, "x", None)
        if primal is None:
            primal = getattr(self.solution, "y", None)
        if primal is None:
            raise ValueError("solution carries no primal point")
        primal = np.asarray(primal)
        if primal.size == 0:
            raise ValueError("cannot differentiate a failed solve")
        if self.cotangent.shape != (primal.size,):
            raise ValueError(
                f"cotangent has length {self.cotangent.size}, primal has "
                f"{primal.size}"
            )


def _lp_adjoint(M: np.ndarray, d: np.ndarray, x: np.ndarray, lam: np.ndarray,
                cot: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Sensitivities of cot.x for min-form LP rows M x <= d at (x, lam).

    Returns (dM, dd, dc, diagnostics). Rows outside the active set get exact
    zeros on both paths: their multipliers vanish and every gradient entry
    carries a factor of the row's multiplier.
    """
    n = x.size
    slack = d - M @ x
    act = lam > ACTIVE_TOL
    # binding rows whose multipliers vanish break strict complementarity
    degenerate = int(np.count_nonzero(~act & (slack <= ACTIVE_TOL * (1.0 + np.abs(d)))))
    diag = {"active_rows": int(act.sum()), "rows": int(M.shape[0]),
            "degenerate_rows": degenerate}
    if act.sum() == n and degenerate == 0:
        Ms = M[act]
        try:
            w = np.linalg.solve(Ms.T, cot)
        except np.linalg.LinAlgError:
            w = None
        if w is not None and np.linalg.norm(Ms.T @ w - cot) <= 1e-6 * (1.0 + np.linalg.norm(cot)):
            dd = np.zeros(d.size)
            dd[act] = w
            dM = np.zeros_like(M)
            dM[act] = -np.outer(w, x)
            diag.update(path="active_set", adjoint_residual=0.0)
            return dM, dd, np.zeros(n), diag

    # backward model min c.x + (reg/2)|x|^2: differentiate stationarity and
    # complementarity jointly, least-squares on the transposed KKT system
    m = d.size
    KT = np.zeros((n + m, n + m))
    KT[:n, :n] = REGULARIZATION * np.eye(n)
    KT[:n, n:] = M.T * lam
    KT[n:, :n] = M
    KT[n:, n:] = -np.diag(slack)
    rhs = np.concatenate([cot, np.zeros(m)])
    dvec = np.linalg.lstsq(KT, rhs, rcond=None)[0]
    residual = float(np.linalg.norm(KT @ dvec - rhs))
    if residual > 1e-6 * (1.0 + np.linalg.norm(cot)):
        logger.warning("adjoint system inconsistent (residual %.2e); "
                       "returning the least-squares solution", residual)
    d_x, d_lam = dvec[:n], dvec[n:]
    dd = lam * d_lam
    dM = -np.outer(lam, d_x) - np.outer(dd, x)
    diag.update(path="regularized", adjoint_residual=residual)
    return dM, dd, -d_x, diag


def _arrow(x: np.ndarray) -> np.ndarray:
    out = x[0] * np.eye(x.size)
    out[0, :] = x
    out[:, 0] = x
    return out


def _socp_adjoint(problem: ConicProblem, solution: ConicSolution,
                  cot: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Full-KKT adjoint for one linear block plus one second-order cone."""
    if len(problem.dims_q) != 1:
        raise ValueError("expected exactly one cone block")
    ml, q = problem.dim_l, problem.dims_q[0]
    y = solution.y
    ny = y.size
    lam = np.maximum(solution.duals[:ml], 0.0)
    z = solution.duals[ml:]
    Gl, Gq = problem.G[:ml], problem.G[ml:]
    sl = problem.h[:ml] - Gl @ y
    sq = problem.h[ml:] - Gq @ y
    Az, As = _arrow(z), _arrow(sq)
    KT = np.zeros((ny + ml + q, ny + ml + q))
    KT[:ny, ny:ny + ml] = Gl.T * lam
    KT[:ny, ny + ml:] = -Gq.T @ Az
    KT[ny:ny + ml, :ny] = Gl
    KT[ny:ny + ml, ny:ny + ml] = -np.diag(sl)
    KT[ny + ml:, :ny] = Gq
    KT[ny + ml:, ny + ml:] = As
    rhs = np.concatenate([cot, np.zeros(ml + q)])
    path = "kkt"
    try:
        dvec = np.linalg.solve(KT, rhs)
    except np.linalg.LinAlgError:
        dvec = None
    if dvec is None or np.linalg.norm(KT @ dvec - rhs) > 1e-6 * (1.0 + np.linalg.norm(cot)):
        KT[:ny, :ny] += REGULARIZATION * np.eye(ny)
        dvec = np.linalg.lstsq(KT, rhs, rcond=None)[0]
        path = "regularized"
    residual = float(np.linalg.norm(KT @ dvec - rhs))
    d_y = dvec[:ny]
    d_lam = dvec[ny:ny + ml]
    d_z = dvec[ny + ml:]
    dd_l = lam * d_lam
    dM_l = -np.outer(lam, d_y) - np.outer(dd_l, y)
    Azd = Az @ d_z
    dd_q = -Azd
    dM_q = -np.outer(z, d_y) + np.outer(Azd, y)
    diag = {"path": path, "adjoint_residual": residual, "rows": ml + q,
            "active_rows": int(np.count_nonzero(lam > ACTIVE_TOL)),
            "degenerate_rows": 0}
    return np.vstack([dM_l, dM_q]), np.concatenate([dd_l, dd_q]), -d_y, diag


@dataclass
class RelaxationVjp:
    """Gradients of cot.x over the pooled rows, in pool order."""

    grad_G: np.ndarray
    grad_h: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def relaxation_vjp(instance: ProblemInstance, pool: CutPool | None,
                   solution, cotangent_x) -> RelaxationVjp:
    """Differentiate cot.x_tilde through the pooled relaxation's optimum.

    The adjoint runs over the full stacked system (instance rows, pool rows,
    then the x >= 0 bounds with their reduced costs); only the pool-row
    block is returned since those are the trainable coefficients. Inactive
    rows get exact zeros, and the diagnostics record whether the square
    active-set solve or the regularized fallback produced the result.
    """
    cot = np.asarray(cotangent_x, dtype=float).ravel()
    VjpRequest(solution, cot, ("pool_G", "pool_h"))
    n_pool = 0 if pool is None else len(pool)
    if n_pool == 0:
        return RelaxationVjp(np.zeros((0, instance.n)), np.zeros(0),
                             {"path": "empty_pool"})
    M, d = stacked_rows(instance, pool)
    M_full = np.vstack([M, -np.eye(instance.n)])
    d_full = np.concatenate([d, np.zeros(instance.n)])
    lam = np.concatenate([np.maximum(solution.row_duals, 0.0),
                          np.maximum(solution.lower_duals, 0.0)])
    dM, dd, _, diag = _lp_adjoint(M_full, d_full, solution.x, lam, cot)
    rows = slice(instance.m, instance.m + n_pool)
    return RelaxationVjp(dM[rows].copy(), dd[rows].copy(), diag)


@dataclass
class CgpVjp:
    """Gradients of cot.(g, h) through one separation solve.

    grad_D matches the shape of the normalization found in the program
    (a weight vector, or a full matrix when a dense p=2 normalization was
    assembled). grad_xbar covers the objective-side chain; it is zero on
    the LP active-set path because vertices do not move with the objective.
    """

    grad_pi: np.ndarray
    grad_eta: float
    grad_D: np.ndarray
    grad_xbar: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _infer_layout(problem: ConicProblem, n: int) -> CgpLayout:
    width = problem.c.size - (n + 1)
    m_hat = width // 2 - 1
    if width < 4 or width % 2 or m_hat < 1:
        raise ValueError(f"cotangent length {n + 1} does not fit the program")
    if problem.dims_q:
        lay = CgpLayout(n, m_hat, 2.0)
    else:
        norm_count = problem.dim_l - (2 * n + 2) - width
        if norm_count == 1:
            lay = CgpLayout(n, m_hat, 1.0)
        elif norm_count == width:
            lay = CgpLayout(n, m_hat, np.inf)
        else:
            raise ValueError(f"{norm_count} normalization rows do not match "
                             "any supported norm")
    if lay.dim_l + lay.soc_dim != problem.G.shape[0]:
        raise ValueError("program rows do not match the inferred layout")
    return lay


def cgp_vjp(problem: ConicProblem, solution: ConicSolution,
            cotangent_cut, n: int | None = None) -> CgpVjp:
    """Differentiate cot.(g, h) through a solved separation program.

    Gradients are reported for everything the parameters touch in the
    assembled data: the disjunction weights pi, the split level eta, the
    normalization D, and the point being separated (objective side).
    The cotangent covers (g, h) by default; passing n allows a full-length
    cotangent over [g, h, u, v], which the strengthening chain needs to
    reach the multiplier blocks.
    """
    cot_cut = np.asarray(cotangent_cut, dtype=float).ravel()
    if n is None:
        n = cot_cut.size - 1
    lay = _infer_layout(problem, n)
    if cot_cut.size == lay.num_y:
        cot_y = cot_cut.copy()
    elif cot_cut.size == n + 1:
        cot_y = np.zeros(lay.num_y)
        cot_y[:n] = cot_cut[:n]
        cot_y[lay.col_h] = cot_cut[n]
    else:
        raise ValueError(f"cotangent length {cot_cut.size} matches neither "
                         f"(g, h) ({n + 1}) nor the full stack ({lay.num_y})")
    VjpRequest(solution, cot_y, ("pi", "eta", "D_diag"))
    if problem.dims_q:
        dM, dd, dc, diag = _socp_adjoint(problem, solution, cot_y)
    else:
        dM, dd, dc, diag = _lp_adjoint(problem.G, problem.h, solution.y,
                                       np.maximum(solution.duals, 0.0), cot_y)
    col_u0 = lay.cols_u.stop - 1
    col_v0 = lay.num_y - 1
    grad_pi = -dM[lay.rows_gu, col_u0] + dM[lay.rows_gv, col_v0]
    grad_eta = float(dM[lay.row_hu, col_u0] - dM[lay.row_hv, col_v0])
    if lay.p == 1.0:
        grad_D = dM[lay.norm_rows.start, lay.cols_z].copy()
    elif np.isinf(lay.p):
        grad_D = np.diag(dM[lay.norm_rows, lay.cols_z]).copy()
    else:
        block = -dM[lay.dim_l + 1:, lay.cols_z]
        stored = -problem.G[lay.dim_l + 1:, lay.cols_z]
        off_diagonal = stored - np.diag(np.diag(stored))
        grad_D = block if np.any(off_diagonal) else np.diag(block).copy()
    return CgpVjp(grad_pi=grad_pi, grad_eta=grad_eta, grad_D=grad_D,
                  grad_xbar=-dc[:n], diagnostics=diag)


@dataclass
class FiniteDiffReport:
    """Per-coordinate comparison of an analytic gradient to central
    differences. Unreliable coordinates (one-sided quotients disagree,
    meaning a kink or a basis change inside the stencil) are excluded from
    the summary numbers instead of counting as failures."""

    analytic: np.ndarray
    central: np.ndarray
    rel_error: np.ndarray
    reliable: np.ndarray
    step: float

    @property
    def max_rel_error(self) -> float:
        checked = self.rel_error[self.reliable]
        return float(checked.max()) if checked.size else 0.0

    @property
    def num_unreliable(self) -> int:
        return int(np.count_nonzero(~self.reliable))

    def fraction_ok(self, tol: float = 1e-3) -> float:
        checked = self.rel_error[self.reliable]
        return float(np.mean(checked <= tol)) if checked.size else 1.0


def finite_diff_check(fun, grad, point, step: float = 1e-5) -> FiniteDiffReport:
    """Compare an analytic gradient against central differences.

    fun maps a point-shaped array to a scalar and must be deterministic;
    grad is the analytic gradient at point (array) or a callable producing
    it. A coordinate is unreliable when its forward and backward quotients
    disagree by more than a quarter of their size (with an absolute floor
    scaled to the gradient), the signature of a kink at the point.
    """
    point = np.asarray(point, dtype=float)
    g = np.asarray(grad(point) if callable(grad) else grad, dtype=float)
    if g.shape != point.shape:
        raise ValueError(f"gradient shape {g.shape} does not match point "
                         f"shape {point.shape}")
    f0 = float(fun(point))
    flat = point.ravel()
    analytic = g.ravel()
    central = np.empty(flat.size)
    reliable = np.ones(flat.size, dtype=bool)
    grad_scale = max(1.0, float(np.abs(analytic).max(initial=0.0)))
    kink_floor = 1e-3 * grad_scale
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        f_plus = float(fun(bumped.reshape(point.shape)))
        bumped[i] -= 2.0 * step
        f_minus = float(fun(bumped.reshape(point.shape)))
        forward = (f_plus - f0) / step
        backward = (f0 - f_minus) / step
        central[i] = 0.5 * (forward + backward)
        if abs(forward - backward) > 0.25 * max(abs(forward), abs(backward),
                                                kink_floor):
            reliable[i] = False
    floor = np.full(flat.size, 1e-6 * grad_scale)
    denom = np.maximum.reduce([np.abs(analytic), np.abs(central), floor])
    rel_error = np.abs(analytic - central) / denom
    # solver noise in fun shows up in the quotients scaled by 1/step; when
    # both sides sit inside that band the coordinate is a pair of agreeing
    # zeros, not a relative disagreement
    zero_band = 1e-4 * grad_scale
    rel_error[np.abs(analytic - central) <= zero_band] = 0.0
    return FiniteDiffReport(analytic=analytic, central=central,
                            rel_error=rel_error, reliable=reliable, step=step)
