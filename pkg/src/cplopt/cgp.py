"""Separating a fractional point with split cuts, via a conic program.

Given a relaxation optimum x_bar and a two-sided disjunction
(pi.x <= eta) or (pi.x >= eta + 1), the most violated inequality
g.x <= h valid on both sides of the split solves

    max  g.x_bar - h
    s.t. g_j <= A^_j.u' + pi_j u0      g_j <= A^_j.v' - pi_j v0
         h   >= b^.u' + eta u0        h   >= b^.v' - (eta + 1) v0
         ||D (u, v)||_p <= 1          u, v >= 0

with u = (u', u0) and v = (v', v0), and (A^, b^) the instance rows stacked
over the current cut pool. The normalization truncates the multiplier cone,
so the program has a finite optimum whenever x_bar satisfies every pooled
row; p in {1, inf} keeps it linear, p = 2 appends one second-order cone
block. A positive optimum certifies separation, and the optimal (u, v) feed
both the adjoint pass and the monoidal coefficient strengthening.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .conic import ConicProblem, solve, stacked_rows
from .model import EPS_CUT, Cut, CutPool, ProblemInstance
from .subadditive import SNAP, snapped_ceil, snapped_floor

logger = logging.getLogger(__name__)


@dataclass
class CutGenParams:
    """One head's split disjunction and multiplier normalization.

    pi and eta must be integral: a fractional offset would leave integer
    points strictly between the two sides. D_diag holds the nonnegative
    normalization weights for the stacked (u, v); a two-dimensional array is
    read as a dense D, which only combines with p = 2 (for p in {1, inf} the
    absolute values are resolved through the sign of z, so the weights must
    be a nonnegative diagonal).
    """

    pi: np.ndarray
    eta: float
    D_diag: np.ndarray
    p: float = 1.0

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float).ravel()
        self.eta = float(self.eta)
        self.D_diag = np.asarray(self.D_diag, dtype=float)
        self.p = float(self.p)
        if self.p not in (1.0, 2.0) and not np.isinf(self.p):
            raise ValueError(f"unsupported norm order {self.p}")
        if np.abs(self.pi - np.round(self.pi)).max(initial=0.0) > SNAP:
            raise ValueError("disjunction direction must be integral")
        if abs(self.eta - round(self.eta)) > SNAP:
            raise ValueError("disjunction offset must be integral")
        if self.D_diag.ndim == 1:
            if np.any(self.D_diag < 0.0) or not np.any(self.D_diag > 0.0):
                raise ValueError("normalization weights must be nonnegative "
                                 "with at least one positive entry")
        elif self.D_diag.ndim == 2:
            if self.p != 2.0:
                raise ValueError("dense normalization requires p = 2")
            if self.D_diag.shape[0] != self.D_diag.shape[1]:
                raise ValueError("dense normalization must be square")
        else:
            raise ValueError("D_diag must be a vector or a square matrix")


@dataclass
class CutCandidate:
    """A separating inequality together with its certifying multipliers.

    y and duals keep the raw primal/dual pair of the separation solve for
    the adjoint pass; g, h, u, v are the unpacked blocks, with tiny negative
    multiplier entries clipped to zero.
    """

    g: np.ndarray
    h: float
    u: np.ndarray
    v: np.ndarray
    violation: float
    y: np.ndarray | None = None
    duals: np.ndarray | None = None


@dataclass
class NoCut:
    """Marker for a separation attempt that produced nothing usable."""

    reason: str = "no separation"


@dataclass(frozen=True)
class CgpLayout:
    """Row and column offsets of one assembled separation program.

    Variables are ordered [g (n), h, u (m_hat+1), v (m_hat+1)]. Linear rows
    come as the n u-side column bounds, the n v-side column bounds, the two
    right-hand-side rows, the normalization rows (one for p = 1, one per
    weight for p = inf, none for p = 2), then the sign rows -(u, v) <= 0.
    For p = 2 a single cone block of width + 1 rows follows.
    """

    n: int
    m_hat: int
    p: float

    @property
    def width(self) -> int:
        return 2 * (self.m_hat + 1)

    @property
    def num_y(self) -> int:
        return self.n + 1 + self.width

    @property
    def col_h(self) -> int:
        return self.n

    @property
    def cols_u(self) -> slice:
        return slice(self.n + 1, self.n + 2 + self.m_hat)

    @property
    def cols_v(self) -> slice:
        return slice(self.n + 2 + self.m_hat, self.num_y)

    @property
    def cols_z(self) -> slice:
        return slice(self.n + 1, self.num_y)

    @property
    def rows_gu(self) -> slice:
        return slice(0, self.n)

    @property
    def rows_gv(self) -> slice:
        return slice(self.n, 2 * self.n)

    @property
    def row_hu(self) -> int:
        return 2 * self.n

    @property
    def row_hv(self) -> int:
        return 2 * self.n + 1

    @property
    def norm_rows(self) -> slice:
        start = 2 * self.n + 2
        if self.p == 1.0:
            return slice(start, start + 1)
        if np.isinf(self.p):
            return slice(start, start + self.width)
        return slice(start, start)

    @property
    def rows_nonneg(self) -> slice:
        start = self.norm_rows.stop
        return slice(start, start + self.width)

    @property
    def dim_l(self) -> int:
        return self.rows_nonneg.stop

    @property
    def soc_dim(self) -> int:
        return self.width + 1 if self.p == 2.0 else 0


def trivial_normalization(m_hat: int) -> np.ndarray:
    """Weights selecting only the disjunction multipliers: u0 + v0 <= 1 at p=1."""
    if m_hat < 1:
        raise ValueError("m_hat must be at least 1")
    D = np.zeros(2 * (m_hat + 1))
    D[m_hat] = 1.0
    D[-1] = 1.0
    return D


def standard_normalization(m_hat: int) -> np.ndarray:
    """All-ones weights: sum(u) + sum(v) <= 1 at p=1."""
    if m_hat < 1:
        raise ValueError("m_hat must be at least 1")
    return np.ones(2 * (m_hat + 1))


def build_cgp(instance: ProblemInstance, pool: CutPool | None,
              x_bar, params: CutGenParams) -> ConicProblem:
    """Assemble the separation program at x_bar under params.

    Pool rows stack under the instance rows, so each multiplier side has
    m + len(pool) + 1 entries. Raises on dimension mismatches and on a
    disjunction touching a continuous variable.
    """
    A_hat, b_hat = stacked_rows(instance, pool)
    m_hat = A_hat.shape[0]
    n = instance.n
    x_bar = np.asarray(x_bar, dtype=float).ravel()
    if x_bar.shape != (n,):
        raise ValueError(f"x_bar has shape {x_bar.shape}, expected ({n},)")
    if params.pi.shape != (n,):
        raise ValueError(f"pi has shape {params.pi.shape}, expected ({n},)")
    if np.any(params.pi[~instance.integer_mask()] != 0.0):
        raise ValueError("disjunction weight on a continuous variable")
    lay = CgpLayout(n, m_hat, params.p)
    D = params.D_diag
    if D.ndim == 1 and D.shape != (lay.width,):
        raise ValueError(f"D_diag has length {D.shape[0]}, expected {lay.width}")
    if D.ndim == 2 and D.shape != (lay.width, lay.width):
        raise ValueError(f"dense D has shape {D.shape}, expected "
                         f"({lay.width}, {lay.width})")

    c = np.zeros(lay.num_y)
    c[:n] = -x_bar
    c[lay.col_h] = 1.0
    G = np.zeros((lay.dim_l + lay.soc_dim, lay.num_y))
    h = np.zeros(lay.dim_l + lay.soc_dim)
    G[lay.rows_gu, :n] = np.eye(n)
    G[lay.rows_gu, lay.cols_u] = np.hstack([-A_hat.T, -params.pi[:, None]])
    G[lay.rows_gv, :n] = np.eye(n)
    G[lay.rows_gv, lay.cols_v] = np.hstack([-A_hat.T, params.pi[:, None]])
    G[lay.row_hu, lay.col_h] = -1.0
    G[lay.row_hu, lay.cols_u] = np.append(b_hat, params.eta)
    G[lay.row_hv, lay.col_h] = -1.0
    G[lay.row_hv, lay.cols_v] = np.append(b_hat, -(params.eta + 1.0))
    if params.p == 1.0:
        G[lay.norm_rows, lay.cols_z] = D
        h[lay.norm_rows] = 1.0
    elif np.isinf(params.p):
        G[lay.norm_rows, lay.cols_z] = np.diag(D)
        h[lay.norm_rows] = 1.0
    G[lay.rows_nonneg, lay.cols_z] = -np.eye(lay.width)
    if params.p == 2.0:
        h[lay.dim_l] = 1.0
        G[lay.dim_l + 1:, lay.cols_z] = -(np.diag(D) if D.ndim == 1 else D)
    dims_q = [lay.soc_dim] if lay.soc_dim else []
    return ConicProblem(c=c, G=G, h=h, dim_l=lay.dim_l, dims_q=dims_q)


def solve_cgp(problem: ConicProblem, x_bar, eps_cut: float = EPS_CUT,
              tol: float | None = None):
    """Solve an assembled separation program; keep the cut only if it cuts.

    Returns a CutCandidate when the optimum exceeds eps_cut, NoCut when x_bar
    is not separated under this disjunction and normalization. Anything other
    than a clean optimum (an unbounded program signals an x_bar violating
    some pooled row) demotes to NoCut with a warning, so multi-round runs
    keep going.
    """
    sol = solve(problem, tol=tol)
    if not sol.ok:
        logger.warning("separation solve ended with status %s; dropping "
                       "the candidate", sol.status)
        return NoCut(sol.status)
    x_bar = np.asarray(x_bar, dtype=float).ravel()
    n = x_bar.shape[0]
    half = (len(problem.c) - n - 1) // 2
    g = sol.y[:n].copy()
    h = float(sol.y[n])
    violation = float(g @ x_bar - h)
    if violation <= eps_cut:
        return NoCut()
    u = np.maximum(sol.y[n + 1:n + 1 + half], 0.0)
    v = np.maximum(sol.y[n + 1 + half:], 0.0)
    return CutCandidate(g=g, h=h, u=u, v=v, violation=violation,
                        y=sol.y, duals=sol.duals)


def monoidal_strengthen(candidate: CutCandidate, instance: ProblemInstance,
                        params: CutGenParams,
                        pool: CutPool | None = None) -> Cut:
    """Tighten integer coefficients of a candidate using its multipliers.

    For each integer column, the best valid coefficient over all integral
    shifts of the disjunction is attained at the floor or ceiling of the
    crossing point beta_j = (A^_j.v' - A^_j.u') / (u0 + v0):

        g~_j = max(A^_j.u' + u0 floor(beta_j), A^_j.v' - v0 ceil(beta_j)).

    The original disjunction only enters through the candidate itself, so
    g~_j >= g_j; continuous coefficients and h stay put. When u0 + v0
    vanishes, every shift gives the same bound and the candidate is
    returned unchanged.
    """
    u, v = candidate.u, candidate.v
    u0, v0 = float(u[-1]), float(v[-1])
    g = np.array(candidate.g, dtype=float, copy=True)
    if params.pi.shape != (instance.n,):
        raise ValueError(f"pi has shape {params.pi.shape}, expected ({instance.n},)")
    if u0 + v0 <= 1e-12:
        return Cut(g=g, h=candidate.h)
    A_hat, _ = stacked_rows(instance, pool)
    if A_hat.shape[0] != len(u) - 1:
        raise ValueError(f"multipliers cover {len(u) - 1} rows but the pooled "
                         f"instance has {A_hat.shape[0]}")
    a_u = A_hat.T @ u[:-1]
    a_v = A_hat.T @ v[:-1]
    beta = (a_v - a_u) / (u0 + v0)
    lifted = np.maximum(a_u + u0 * snapped_floor(beta),
                        a_v - v0 * snapped_ceil(beta))
    mask = instance.integer_mask()
    g[mask] = lifted[mask]
    return Cut(g=g, h=candidate.h)
