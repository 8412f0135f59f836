"""Split cuts written through an explicit subadditive value function.

A weight vector w on the rows of Ax <= b, together with a threshold
t in [0, 1), defines

    Phi_{w,t}(y) = min(frac(w.y), t/(1-t) (1 - frac(w.y)))
                   + max(-w, t/(1-t) w).y,

and on a pure-integer instance the inequality Phi(-A).x >= Phi(-b)
(columns through Phi, then the right-hand side) holds at every feasible
integer point. Multiplying by -(1-t) puts it in the <=-form the cut pool
uses. `theorem1_lift` re-expresses the inequality as an explicit feasible
point of the split separation program, with w split into its positive and
negative parts and the disjunction obtained by rounding -w.A columnwise;
`dominates` is the LP implication check between two cuts, used to confirm
that the canonical threshold t = frac(-b.w) beats every other choice; and
`corollary1_D` builds the rank-one p=2 normalization under which a given
violating w-cut prices out as a separation optimum.

frac, floor and ceil here all snap within 1e-9 of an integer, so nearly
integral data never produces a spurious fractional part.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .model import Cut, ProblemInstance

logger = logging.getLogger(__name__)

SNAP = 1e-9


def frac(y):
    """Fractional part, with values within SNAP of an integer snapped to 0."""
    y = np.asarray(y, dtype=float)
    f = y - np.floor(y)
    f = np.where(f > 1.0 - SNAP, 0.0, f)
    f = np.where(f < SNAP, 0.0, f)
    return float(f) if f.ndim == 0 else f


def snapped_floor(y):
    """floor() that forgives drift up to SNAP below an integer."""
    y = np.asarray(y, dtype=float)
    out = np.floor(y + SNAP)
    return float(out) if out.ndim == 0 else out


def snapped_ceil(y):
    """ceil() that forgives drift up to SNAP above an integer."""
    y = np.asarray(y, dtype=float)
    out = np.ceil(y - SNAP)
    return float(out) if out.ndim == 0 else out


@dataclass
class SubadditiveParams:
    """Row weights w and the threshold t steering the rounding term."""

    w: np.ndarray
    t: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).ravel()
        self.t = float(self.t)
        if not np.all(np.isfinite(self.w)) or not np.isfinite(self.t):
            raise ValueError("nonfinite subadditive parameters")
        if self.t < 0.0 or self.t >= 1.0 - 1e-12:
            raise ValueError(f"t must lie in [0, 1) away from 1, got {self.t}")


def phi(params: SubadditiveParams, y) -> float:
    """Evaluate Phi_{w,t} at one column y."""
    w, t = params.w, params.t
    y = np.asarray(y, dtype=float).ravel()
    s = t / (1.0 - t)
    f = frac(float(w @ y))
    return min(f, s * (1.0 - f)) + float(np.maximum(-w, s * w) @ y)


def subadditive_cut(instance: ProblemInstance, w) -> tuple[np.ndarray, float]:
    """The w-cut g.x <= h at the canonical threshold t = frac(-b.w).

    g_j = -(1-t) Phi(-A_j) and h = -(1-t) Phi(-b). Pure-integer instances
    only; the rounding argument behind validity needs every variable
    integral. w = 0 returns the vacuous 0 <= 0.
    """
    if not instance.is_pure_integer:
        raise ValueError("subadditive cuts need a pure-integer instance")
    w = np.asarray(w, dtype=float).ravel()
    if w.shape != (instance.m,):
        raise ValueError(f"w has shape {w.shape}, expected ({instance.m},)")
    t = frac(-float(instance.b @ w))
    params = SubadditiveParams(w, t)
    scale = -(1.0 - t)
    g = scale * np.array([phi(params, -instance.A[:, j])
                          for j in range(instance.n)])
    h = scale * phi(params, -instance.b)
    return g, float(h)


@dataclass
class Theorem1Lift:
    """A w-cut certified by split multipliers: a feasible separation point."""

    g: np.ndarray
    h: float
    u: np.ndarray
    v: np.ndarray
    pi: np.ndarray
    eta: float
    t: float


def theorem1_lift(instance: ProblemInstance, w) -> Theorem1Lift:
    """Lift the w-cut into the feasible set of the separation program.

    u carries the positive part of w, v the negative part, and the
    disjunction multipliers split the threshold as (1-t, t), so the trivial
    normalization is tight at u0 + v0 = 1. Columnwise, q_j = -w.A_j rounds
    down when frac(q_j) <= t and up otherwise; with eta = floor(-b.w) the
    resulting (g, h) matches subadditive_cut coefficient for coefficient.
    """
    if not instance.is_pure_integer:
        raise ValueError("the lift is defined for pure-integer instances")
    w = np.asarray(w, dtype=float).ravel()
    if w.shape != (instance.m,):
        raise ValueError(f"w has shape {w.shape}, expected ({instance.m},)")
    A, b = instance.A, instance.b
    q0 = -float(b @ w)
    t = frac(q0)
    eta = snapped_floor(q0)
    w_pos = np.maximum(w, 0.0)
    w_neg = np.maximum(-w, 0.0)
    u = np.append(w_pos, 1.0 - t)
    v = np.append(w_neg, t)
    q = -(w @ A)
    pi = np.where(frac(q) <= t + SNAP, snapped_floor(q), snapped_ceil(q))
    g = np.minimum(A.T @ w_pos + (1.0 - t) * pi, A.T @ w_neg - t * pi)
    h = float(b @ w_neg - t * (eta + 1.0))
    return Theorem1Lift(g=g, h=h, u=u, v=v, pi=pi, eta=eta, t=t)


def _coefficients(cut) -> tuple[np.ndarray, float]:
    if isinstance(cut, Cut):
        return cut.g, cut.h
    g, h = cut
    return np.asarray(g, dtype=float).ravel(), float(h)


def dominates(cut1, cut2, instance: ProblemInstance) -> bool:
    """True when cut1 implies cut2 over the instance relaxation.

    Maximizes cut2's left side over {Ax <= b, x >= 0, cut1}; implication
    means the maximum stays below cut2's right side, with 1e-8 slack. An
    empty region implies anything. An unbounded auxiliary LP certifies
    nothing and returns False with a warning.
    """
    g1, h1 = _coefficients(cut1)
    g2, h2 = _coefficients(cut2)
    res = linprog(-g2, A_ub=np.vstack([instance.A, g1]),
                  b_ub=np.append(instance.b, h1),
                  bounds=[(0, None)] * instance.n, method="highs")
    if res.status == 2:
        return True
    if res.status != 0:
        logger.warning("dominance LP did not solve cleanly (status %d)",
                       res.status)
        return False
    return bool(-res.fun <= h2 + 1e-8)


def corollary1_D(instance: ProblemInstance, x_bar, w) -> np.ndarray:
    """Rank-one p=2 normalization that prices the violating w-cut as optimal.

    Evaluates the four bilinear branches of the separation objective at the
    lifted multipliers u~ = (u, v), keeps the branch attaining the minimum
    (ties toward the lower index), and returns

        D = q5 q5^T / ((u~.q5) ||q5||_2),

    the scaled square root of the attaining branch's rank-one quadratic.
    By construction ||D u~||_2 = 1: u~ sits exactly on the normalization
    sphere, and the w-cut's violation bounds the p=2 separation value from
    above, with equality whenever the attaining branch is uniform over the
    support of x_bar.
    """
    lift = theorem1_lift(instance, w)
    x_bar = np.asarray(x_bar, dtype=float).ravel()
    if x_bar.shape != (instance.n,):
        raise ValueError(f"x_bar has shape {x_bar.shape}, expected ({instance.n},)")
    A, b = instance.A, instance.b
    px = float(lift.pi @ x_bar)
    q1 = np.append(A @ x_bar, px)
    q2 = np.append(A @ x_bar, -px)
    # negated right-hand-side bounds: the u-side row carries +eta, the v-side
    # row carries -(eta+1), so only the eta entry flips sign under negation
    q3 = np.append(-b, -lift.eta)
    q4 = np.append(-b, lift.eta + 1.0)
    u, v = lift.u, lift.v
    branches = np.array([(q1 + q3) @ u, (q2 + q4) @ v,
                         q1 @ u + q4 @ v, q3 @ u + q2 @ v])
    k = int(np.argmin(branches))
    zero = np.zeros(instance.m + 1)
    q5 = [np.concatenate([q1 + q3, zero]),
          np.concatenate([zero, q2 + q4]),
          np.concatenate([q1, q4]),
          np.concatenate([q3, q2])][k]
    u_tilde = np.concatenate([u, v])
    denom = float(u_tilde @ q5)
    scale = float(np.linalg.norm(q5))
    if denom <= 1e-9:
        raise ValueError("w-cut does not violate x_bar: branch value "
                         f"{denom:.2e} at the lifted multipliers")
    if scale <= 1e-12:
        raise ValueError("degenerate branch vector q5")
    return np.outer(q5, q5) / (denom * scale)
