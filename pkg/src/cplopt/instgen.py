"""Generators for the two parametric MILP families.

gen_matching builds a minimum-cost 2-factor problem on a random graph:
one binary variable per edge, paired rows per node fixing its degree to
exactly 2, unit bound rows, and theta replacing the full objective
(normal draws rounded to 3 decimals). Degree equalities are what give
these instances fractional root optima (half-integral odd-cycle
structure); with slack degrees the relaxation is integral on essentially
every draw.

gen_control builds a finite-horizon commitment problem for a storage
buffer fed by a switchable generator. The state recursions for the buffer
level E_tau and the switch count are unrolled into rows, so only
(P, zeta, xi, psi) remain as decision variables and theta moves nothing
but the right-hand side. The step psi in {-1, 0, 1} is stored shifted by
one (psi_tilde = psi + 1) because every variable is nonnegative here.

Both generators are seed-deterministic and embed exact optima (branch
and bound for matching, on/off-pattern enumeration with a lazy-production
schedule for control).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .model import ModelError, ParametricFamily

logger = logging.getLogger(__name__)

MAX_GRAPH_DRAWS = 100_000
MAX_THETA_DRAWS = 100_000
BNB_NODE_CAP = 100_000
SPLIT_NAMES = ("train", "validation", "test")


@dataclass(frozen=True)
class MatchingSpec:
    """2-factor family; the graph is drawn by independent edge coin flips
    and redrawn until it has exactly `edges` edges, minimum degree 2, and
    at least one 2-factor (a spanning disjoint union of cycles)."""

    nodes: int = 16
    edges: int = 35
    edge_probability: float | None = None
    obj_mean: float = 30.0
    obj_std: float = 50.0
    counts: tuple = (40, 15, 15)
    seed: int = 0
    embed_optima: bool = True

    def __post_init__(self):
        pairs = self.nodes * (self.nodes - 1) // 2
        if self.nodes < 3:
            raise ValueError("need at least 3 nodes")
        if not self.nodes <= self.edges <= pairs:
            raise ValueError(f"edge count must lie in [{self.nodes}, {pairs}]"
                             " for a 2-factor to exist")
        if self.obj_std <= 0:
            raise ValueError("objective spread must be positive")
        if len(self.counts) != 3 or any(k < 1 for k in self.counts):
            raise ValueError("counts must be three positive integers")
        p = self.probability
        if not 0.0 < p < 1.0:
            raise ValueError("edge probability must lie in (0, 1)")

    @property
    def probability(self) -> float:
        if self.edge_probability is not None:
            return self.edge_probability
        return self.edges / (self.nodes * (self.nodes - 1) / 2.0)


@dataclass(frozen=True)
class ControlSpec:
    """Storage/generator commitment family over a fixed horizon.

    upsilon converts power to stored energy per step, omega and delta
    weight the affine stage cost omega P + delta zeta, n_switch caps the
    switch count over a sliding window covering the recorded history
    (xi_past) plus a carry-in count s_init. The published experiment does
    not state the physics constants; these defaults leave capacity slack
    (load_max < p_max) so the root relaxation shaves the on-state cost
    with fractional zeta on most draws, and keep the buffer tight
    (e_max - e_min small) so production must track the load profile
    instead of wandering between equal-cost schedules.
    """

    horizon: int = 10
    upsilon: float = 1.0
    omega: float = 1.0
    delta: float = 1.0
    e_min: float = 0.0
    e_max: float = 1.5
    p_max: float = 4.0
    load_max: float = 2.0
    n_switch: int = 3
    counts: tuple = (50, 25, 25)
    seed: int = 0
    embed_optima: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.e_min >= self.e_max:
            raise ValueError("need e_min < e_max")
        if self.p_max <= 0:
            raise ValueError("p_max must be positive")
        if self.load_max <= 0:
            raise ValueError("load_max must be positive")
        if self.n_switch < 0:
            raise ValueError("n_switch must be nonnegative")
        if self.upsilon <= 0:
            raise ValueError("upsilon must be positive")
        if len(self.counts) != 3 or any(k < 1 for k in self.counts):
            raise ValueError("counts must be three positive integers")

    @property
    def theta_dim(self) -> int:
        # (E_init, zeta_init, s_init, xi_past[H], P_load[H])
        return 3 + 2 * self.horizon


def _split_labels(counts) -> list[str]:
    labels = []
    for name, k in zip(SPLIT_NAMES, counts):
        labels.extend([name] * k)
    return labels


def _binary_branch_and_bound(A, b, c, node_cap: int = BNB_NODE_CAP,
                             tol: float = 1e-9) -> float | None:
    """Exact optimum of min c.x s.t. A x <= b, x in {0, 1}^n.

    Depth-first search over LP relaxations, branching the most fractional
    coordinate with the 1-branch explored first. Returns None when no
    integer point is feasible.
    """
    n = A.shape[1]
    best = np.inf
    visited = 0
    stack = [(np.zeros(n), np.ones(n))]
    while stack:
        lo, hi = stack.pop()
        visited += 1
        if visited > node_cap:
            raise ModelError("branch-and-bound node cap exceeded")
        res = linprog(c, A_ub=A, b_ub=b, bounds=list(zip(lo, hi)),
                      method="highs")
        if res.status != 0 or res.fun >= best - tol:
            continue
        frac = np.abs(res.x - np.round(res.x))
        j = int(np.argmax(frac))
        if frac[j] <= tol:
            best = float(res.fun)
            continue
        for v in (0.0, 1.0):  # stack order: the 1-branch pops first
            lo2, hi2 = lo.copy(), hi.copy()
            lo2[j] = hi2[j] = v
            stack.append((lo2, hi2))
    return float(best) if np.isfinite(best) else None


def _factor_system(incidence: np.ndarray):
    """Paired <= rows encoding incidence @ x == 2 plus unit bound rows."""
    nodes, n = incidence.shape
    A = np.vstack([incidence, -incidence, np.eye(n)])
    b = np.concatenate([np.full(nodes, 2.0), np.full(nodes, -2.0),
                        np.ones(n)])
    return A, b


def _incidence(nodes: int, edges: list[tuple[int, int]]) -> np.ndarray:
    incidence = np.zeros((nodes, len(edges)))
    for e, (u, v) in enumerate(edges):
        incidence[u, e] = 1.0
        incidence[v, e] = 1.0
    return incidence


def _draw_graph(rng, spec: MatchingSpec) -> list[tuple[int, int]]:
    pairs = list(itertools.combinations(range(spec.nodes), 2))
    p = spec.probability
    for _ in range(MAX_GRAPH_DRAWS):
        mask = rng.random(len(pairs)) < p
        if int(mask.sum()) != spec.edges:
            continue
        chosen = [pairs[i] for i in np.flatnonzero(mask)]
        incidence = _incidence(spec.nodes, chosen)
        if incidence.sum(axis=1).min() < 2:
            continue  # a degree-1 node admits no 2-factor
        # min degree 2 is necessary but not sufficient (two triangles
        # sharing a vertex have none), so certify by solving with c = 0
        A, b = _factor_system(incidence)
        if _binary_branch_and_bound(A, b, np.zeros(spec.edges)) is not None:
            return chosen
    raise ModelError("could not draw a graph carrying a 2-factor")


def gen_matching(spec: MatchingSpec) -> ParametricFamily:
    rng = np.random.default_rng(spec.seed)
    edges = _draw_graph(rng, spec)
    n = spec.edges
    incidence = _incidence(spec.nodes, edges)
    A, b = _factor_system(incidence)
    total = sum(spec.counts)
    thetas = [np.round(rng.normal(spec.obj_mean, spec.obj_std, size=n), 3)
              for _ in range(total)]
    z_star: list[float | None] = []
    if spec.embed_optima:
        z_star = [_binary_branch_and_bound(A, b, theta) for theta in thetas]
    return ParametricFamily(
        A=A, b=b, c=np.full(n, spec.obj_mean),
        integer_indices=np.arange(n),
        theta_map={"mode": "replace_c"},
        theta_samples=thetas, splits=_split_labels(spec.counts),
        z_star=z_star, name="matching",
        config={"nodes": spec.nodes, "edges": spec.edges,
                "edge_probability": spec.probability,
                "edge_list": [list(e) for e in edges],
                "obj_mean": spec.obj_mean, "obj_std": spec.obj_std,
                "structural_rows": 2 * spec.nodes, "seed": spec.seed})


def _control_matrices(spec: ControlSpec):
    """Rows (H each): energy ceiling, energy floor, capacity, explicit
    P >= 0, link pairs zeta_t = zeta_{t-1} + psi_tilde_t - 1, switch
    window, logic pairs |psi_tilde - 1| <= xi; then bound rows for all
    four variable blocks. b(theta) = b0 + T theta."""
    H = spec.horizon
    n = 4 * H
    P, Z, XI, PS = 0, H, 2 * H, 3 * H
    E0, Z0, S0, XP, PL = 0, 1, 2, 3, 3 + H
    m = 9 * H + 4 * H
    A = np.zeros((m, n))
    b0 = np.zeros(m)
    T = np.zeros((m, spec.theta_dim))
    r = 0
    for tau in range(H):
        A[r, P:P + tau + 1] = spec.upsilon
        b0[r] = spec.e_max
        T[r, E0] = -1.0
        T[r, PL:PL + tau + 1] = spec.upsilon
        r += 1
    for tau in range(H):
        A[r, P:P + tau + 1] = -spec.upsilon
        b0[r] = -spec.e_min
        T[r, E0] = 1.0
        T[r, PL:PL + tau + 1] = -spec.upsilon
        r += 1
    for tau in range(H):
        A[r, P + tau] = 1.0
        A[r, Z + tau] = -spec.p_max
        r += 1
    for tau in range(H):
        A[r, P + tau] = -1.0
        r += 1
    for tau in range(H):
        A[r, Z + tau] = 1.0
        A[r, PS + tau] = -1.0
        b0[r] = -1.0
        if tau > 0:
            A[r, Z + tau - 1] = -1.0
        else:
            T[r, Z0] = 1.0
        r += 1
    for tau in range(H):
        A[r, Z + tau] = -1.0
        A[r, PS + tau] = 1.0
        b0[r] = 1.0
        if tau > 0:
            A[r, Z + tau - 1] = 1.0
        else:
            T[r, Z0] = -1.0
        r += 1
    for tau in range(H):
        # sliding window of H+2 steps: the oldest history entry ages out
        # one row at a time and the carry-in s_init counts only at tau=0
        A[r, XI:XI + tau + 1] = 1.0
        b0[r] = float(spec.n_switch)
        if tau == 0:
            T[r, S0] = -1.0
        T[r, XP + max(0, tau - 1):XP + H] = -1.0
        r += 1
    for tau in range(H):
        A[r, PS + tau] = 1.0
        A[r, XI + tau] = -1.0
        b0[r] = 1.0
        r += 1
    for tau in range(H):
        A[r, PS + tau] = -1.0
        A[r, XI + tau] = -1.0
        b0[r] = -1.0
        r += 1
    for tau in range(H):
        A[r, P + tau] = 1.0
        b0[r] = spec.p_max
        r += 1
    for tau in range(H):
        A[r, Z + tau] = 1.0
        b0[r] = 1.0
        r += 1
    for tau in range(H):
        A[r, XI + tau] = 1.0
        b0[r] = 1.0
        r += 1
    for tau in range(H):
        A[r, PS + tau] = 1.0
        b0[r] = 2.0
        r += 1
    c = np.concatenate([np.full(H, spec.omega), np.full(H, spec.delta),
                        np.zeros(2 * H)])
    return A, b0, T, c, np.arange(H, 4 * H)


def _min_final_cumulative(lower, upper, cap, tol=1e-9):
    """Least final cumulative production S_{H-1} subject to
    S nondecreasing, per-step increments in [0, cap_tau], and
    lower_tau <= S_tau <= upper_tau; None when infeasible.

    The backward pass propagates each lower bound through the available
    later capacity; the forward pass then produces as late as possible.
    """
    H = len(lower)
    required = np.maximum(np.asarray(lower, dtype=float), 0.0)
    for tau in range(H - 2, -1, -1):
        required[tau] = max(required[tau], required[tau + 1] - cap[tau + 1])
    s = 0.0
    for tau in range(H):
        target = max(s, required[tau])
        if target > s + cap[tau] + tol or target > upper[tau] + tol:
            return None
        s = target
    return s


def _unpack_theta(spec: ControlSpec, theta):
    H = spec.horizon
    theta = np.asarray(theta, dtype=float).ravel()
    return (theta[0], theta[1], theta[2], theta[3:3 + H],
            theta[3 + H:3 + 2 * H])


def _control_optimum(spec: ControlSpec, theta) -> float | None:
    """Exact optimum by enumerating on/off patterns.

    For a fixed zeta pattern the rows force psi_tilde = diff(zeta) + 1
    exactly and the cheapest admissible xi is |psi|; what remains is the
    lazy-production schedule for P. Returns None when no pattern is
    feasible (the draw is then resampled).
    """
    H = spec.horizon
    e_init, zeta_init, s_init, xi_past, p_load = _unpack_theta(spec, theta)
    load_cum = np.cumsum(p_load)
    lower = (spec.e_min - e_init) / spec.upsilon + load_cum
    upper = (spec.e_max - e_init) / spec.upsilon + load_cum
    codes = np.arange(1 << H, dtype=np.int64)
    patterns = (codes[:, None] >> np.arange(H)) & 1
    prev = np.hstack([np.full((1 << H, 1), round(zeta_init), dtype=np.int64),
                      patterns[:, :-1]])
    xi = np.abs(patterns - prev)
    tail = np.concatenate([np.cumsum(xi_past[::-1])[::-1], [0.0]])
    window_used = np.array([tail[max(0, tau - 1)] for tau in range(H)])
    window_used[0] += s_init
    budget = spec.n_switch - window_used
    admissible = np.all(np.cumsum(xi, axis=1) <= budget + 1e-9, axis=1)
    best = None
    for pattern in patterns[admissible]:
        production = _min_final_cumulative(lower, upper,
                                           spec.p_max * pattern.astype(float))
        if production is None:
            continue
        value = spec.omega * production + spec.delta * float(pattern.sum())
        if best is None or value < best:
            best = value
    return best


def _draw_control_theta(rng, spec: ControlSpec) -> np.ndarray:
    H = spec.horizon
    mid = 0.5 * (spec.e_min + spec.e_max)
    spread = 0.25 * (spec.e_max - spec.e_min)
    e_init = float(np.clip(rng.normal(mid, spread), spec.e_min, spec.e_max))
    zeta_init = float(rng.integers(0, 2))
    s_init = float(rng.integers(0, 2))
    xi_past = rng.integers(0, 2, size=H).astype(float)
    # wide load spread: heterogeneous periods keep the root optimum from
    # sliding its fractional on-periods between equal-cost placements
    p_load = np.clip(rng.normal(0.5 * spec.load_max, 0.5 * spec.load_max,
                                size=H), 0.0, spec.load_max)
    return np.concatenate([[e_init, zeta_init, s_init], xi_past, p_load])


def gen_control(spec: ControlSpec) -> ParametricFamily:
    rng = np.random.default_rng(spec.seed)
    A, b0, T, c, integer_indices = _control_matrices(spec)
    total = sum(spec.counts)
    thetas: list[np.ndarray] = []
    optima: list[float | None] = []
    resampled = 0
    while len(thetas) < total:
        if resampled + len(thetas) > MAX_THETA_DRAWS:
            raise ModelError("theta sampling keeps drawing infeasible points")
        theta = _draw_control_theta(rng, spec)
        z = _control_optimum(spec, theta)
        if z is None:
            resampled += 1
            continue
        thetas.append(theta)
        optima.append(z)
    if resampled:
        logger.info("control family: resampled %d infeasible theta draws",
                    resampled)
    H = spec.horizon
    return ParametricFamily(
        A=A, b=b0, c=c, integer_indices=integer_indices,
        theta_map={"mode": "affine_b", "matrix": T},
        theta_samples=thetas, splits=_split_labels(spec.counts),
        z_star=optima if spec.embed_optima else [], name="control",
        config={"horizon": H, "upsilon": spec.upsilon, "omega": spec.omega,
                "delta": spec.delta, "e_min": spec.e_min,
                "e_max": spec.e_max, "p_max": spec.p_max,
                "load_max": spec.load_max,
                "n_switch": spec.n_switch, "structural_rows": 9 * H,
                "bound_rows": 4 * H, "resampled": resampled,
                "seed": spec.seed,
                "theta_layout": ["e_init", "zeta_init", "s_init",
                                 f"xi_past[{H}]", f"p_load[{H}]"]})


def reconstruct_energy(spec_or_config, theta, x) -> np.ndarray:
    """Buffer levels E_1..E_H implied by a decision vector; the explicit
    rows must be equivalent to keeping these inside [e_min, e_max]."""
    if isinstance(spec_or_config, ControlSpec):
        H, upsilon = spec_or_config.horizon, spec_or_config.upsilon
    else:
        H, upsilon = spec_or_config["horizon"], spec_or_config["upsilon"]
    theta = np.asarray(theta, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    e_init = theta[0]
    p_load = theta[3 + H:3 + 2 * H]
    return e_init + upsilon * (np.cumsum(x[:H]) - np.cumsum(p_load))


