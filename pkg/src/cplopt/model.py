"""Problem data for parametric mixed-integer linear programs.

An instance is

    min  c.x   s.t.  A x <= b,  x >= 0,  x_i integer for i in I,

with every variable's finite upper bound written as an explicit row of
(A, b). A parametric family fixes the sparsity/shape and maps a parameter
vector theta onto (A, b, c); here theta either replaces c outright or
shifts b affinely, which covers both bundled generators.

Cut pools collect rows (g, h) meaning g.x <= h. Rows are stored normalized
by max(||g||_2, 1e-12) and near-duplicates (inf-norm distance < 1e-8 on the
stacked (g, h) vector) are dropped.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

FAMILY_FORMAT = "cplopt-family-v1"

#: integrality tolerance used for rounding checks and early exit
EPS_INT = 1e-6

#: violation threshold below which a candidate cut is not worth pooling
EPS_CUT = 1e-6

#: cuts closer than this (inf-norm, after normalization) count as duplicates
DUP_TOL = 1e-8

#: norm floor used when normalizing cut rows
NORM_FLOOR = 1e-12


class ModelError(ValueError):
    """Raised for malformed instances, families, or file payloads."""


@dataclass
class ProblemInstance:
    """One realized MILP in <= row form with x >= 0 implicit."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    integer_indices: np.ndarray
    name: str = ""
    z_star: float | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.integer_indices = np.asarray(self.integer_indices, dtype=int).ravel()
        m, n = self.A.shape
        if self.b.shape != (m,) or self.c.shape != (n,):
            raise ModelError(
                f"shape mismatch: A {self.A.shape}, b {self.b.shape}, c {self.c.shape}"
            )
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b))
                and np.all(np.isfinite(self.c))):
            raise ModelError("instance data must be finite")
        if len(self.integer_indices) != len(set(self.integer_indices.tolist())):
            raise ModelError("integer_indices contains duplicates")
        if np.any(self.integer_indices < 0) or np.any(self.integer_indices >= n):
            raise ModelError("integer_indices out of range")

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def is_pure_integer(self) -> bool:
        return len(self.integer_indices) == self.n

    def integer_mask(self) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        mask[self.integer_indices] = True
        return mask

    def upper_bounds(self) -> np.ndarray:
        """Per-variable upper bounds read off the explicit bound rows.

        A bound row for variable j is a row whose only nonzero is a positive
        coefficient on j. Raises if some variable has no such row, since the
        enumeration oracle and the policy encoding both rely on a finite box.
        """
        ub = np.full(self.n, np.inf)
        nz_counts = np.count_nonzero(self.A, axis=1)
        for i in np.flatnonzero(nz_counts == 1):
            j = int(np.flatnonzero(self.A[i])[0])
            if self.A[i, j] > 0:
                ub[j] = min(ub[j], self.b[i] / self.A[i, j])
        if not np.all(np.isfinite(ub)):
            missing = np.flatnonzero(~np.isfinite(ub)).tolist()
            raise ModelError(f"variables without an upper-bound row: {missing}")
        return ub


@dataclass
class Cut:
    """A pooled inequality g.x <= h with provenance for the backward pass.

    violation_at_birth is g.x_bar - h at the point the cut separated;
    multipliers holds the CGP (u, v) pair that produced it, when known.
    """

    g: np.ndarray
    h: float
    round_index: int = 0
    head_index: int = 0
    violation_at_birth: float = 0.0
    multipliers: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).ravel()
        self.h = float(self.h)

    def normalized(self) -> "Cut":
        scale = max(float(np.linalg.norm(self.g)), NORM_FLOOR)
        return Cut(self.g / scale, self.h / scale, self.round_index,
                   self.head_index, self.violation_at_birth, self.multipliers)


class CutPool:
    """Ordered pool of normalized cut rows with duplicate suppression.

    Rows are only appended, never mutated; capacity (R*K in the engine)
    is enforced when given.
    """

    def __init__(self, n: int, capacity: int | None = None):
        self.n = int(n)
        self.capacity = capacity
        self.cuts: list[Cut] = []

    def __len__(self) -> int:
        return len(self.cuts)

    def add(self, cut: Cut) -> bool:
        """Normalize and append; returns False when a near-duplicate exists."""
        if cut.g.shape != (self.n,):
            raise ModelError(f"cut length {cut.g.shape} does not match n={self.n}")
        if self.capacity is not None and len(self.cuts) >= self.capacity:
            raise ModelError(f"pool capacity {self.capacity} exceeded")
        cut = cut.normalized()
        row = np.append(cut.g, cut.h)
        for old in self.cuts:
            if np.max(np.abs(np.append(old.g, old.h) - row)) < DUP_TOL:
                return False
        self.cuts.append(cut)
        return True

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (G, h); empty pool gives (0, n) and (0,) arrays."""
        if not self.cuts:
            return np.zeros((0, self.n)), np.zeros(0)
        G = np.array([c.g for c in self.cuts])
        h = np.array([c.h for c in self.cuts])
        return G, h

    def copy(self) -> "CutPool":
        out = CutPool(self.n, self.capacity)
        out.cuts = list(self.cuts)
        return out


@dataclass
class AlgoState:
    """Snapshot after one cutting round: bound, candidate, and pool rows."""

    round_index: int
    objective: float
    candidate: np.ndarray
    pool_G: np.ndarray
    pool_h: np.ndarray

    def __post_init__(self):
        self.candidate = np.asarray(self.candidate, dtype=float).ravel()
        self.pool_G = np.atleast_2d(np.asarray(self.pool_G, dtype=float))
        self.pool_h = np.asarray(self.pool_h, dtype=float).ravel()
        if self.pool_G.size == 0:
            self.pool_G = self.pool_G.reshape(0, len(self.candidate))


@dataclass
class QualityReport:
    """Per-instance solution quality: percent gap, integrality residual, and
    the worst clamped violation of the final round's cuts at the previous
    candidate (how much the last cuts actually cut off)."""

    gap: float | None
    infeas: float
    max_viol: float
    z_tilde: float
    z_star: float | None


@dataclass
class ParametricFamily:
    """Shared MILP structure plus sampled parameter vectors.

    theta_map is one of
      {"mode": "replace_c"}                      c(theta) = theta
      {"mode": "affine_b", "matrix": T}          b(theta) = b0 + T theta
    A and integer structure never vary within a family.
    """

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    integer_indices: np.ndarray
    theta_map: dict
    theta_samples: list[np.ndarray] = field(default_factory=list)
    splits: list[str] = field(default_factory=list)
    z_star: list[float | None] = field(default_factory=list)
    name: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.integer_indices = np.asarray(self.integer_indices, dtype=int).ravel()
        self.theta_samples = [np.asarray(t, dtype=float).ravel() for t in self.theta_samples]
        if self.theta_map.get("mode") not in ("replace_c", "affine_b"):
            raise ModelError(f"unknown theta_map mode: {self.theta_map.get('mode')!r}")
        if self.splits and len(self.splits) != len(self.theta_samples):
            raise ModelError("splits length must match theta_samples")
        if self.z_star and len(self.z_star) != len(self.theta_samples):
            raise ModelError("z_star length must match theta_samples")

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def indices(self, split: str | None = None) -> list[int]:
        if split is None:
            return list(range(len(self.theta_samples)))
        return [i for i, s in enumerate(self.splits) if s == split]


def realize(family: ParametricFamily, theta: np.ndarray, index: int | None = None) -> ProblemInstance:
    """Instantiate (A, b, c) for one parameter vector."""
    theta = np.asarray(theta, dtype=float).ravel()
    if not np.all(np.isfinite(theta)):
        raise ModelError("theta contains non-finite entries")
    mode = family.theta_map["mode"]
    if mode == "replace_c":
        if theta.shape != family.c.shape:
            raise ModelError(f"theta length {theta.shape[0]} != n {family.n}")
        A, b, c = family.A, family.b, theta
    else:
        T = np.asarray(family.theta_map["matrix"], dtype=float)
        if T.shape != (family.m, theta.shape[0]):
            raise ModelError(f"theta_map matrix {T.shape} incompatible with theta {theta.shape}")
        A, c = family.A, family.c
        b = family.b + T @ theta
    z_star = None
    name = family.name
    if index is not None:
        name = f"{family.name}[{index}]"
        if family.z_star:
            z_star = family.z_star[index]
    return ProblemInstance(A.copy(), np.array(b), c.copy(),
                           family.integer_indices.copy(), name=name, z_star=z_star)


def realize_split(family: ParametricFamily, split: str | None = None) -> list[ProblemInstance]:
    return [realize(family, family.theta_samples[i], index=i) for i in family.indices(split)]


def brute_force_optimum(instance: ProblemInstance, box: list | None = None,
                        cap: int = 20, tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Exact optimum (x_star, z_star) by enumerating the integer box.

    box gives one integer range per integer variable; by default it is read
    off the explicit bound rows. Pure-integer instances are enumerated with
    vectorized feasibility checks; mixed instances solve one LP in the
    continuous variables per assignment. Refuses more than `cap` integer
    variables. Raises ModelError when no integer-feasible point exists.
    """
    idx = instance.integer_indices
    if len(idx) > cap:
        raise ModelError(f"{len(idx)} integer variables exceeds cap {cap}")
    if box is None:
        ub = instance.upper_bounds()
        box = [range(int(np.floor(ub[j] + tol)) + 1) for j in idx]
    if len(box) != len(idx):
        raise ModelError("box must give one range per integer variable")
    if instance.is_pure_integer:
        best_z, best_x = np.inf, None
        chunk = 200_000
        grid = itertools.product(*box)
        while True:
            block = list(itertools.islice(grid, chunk))
            if not block:
                break
            X = np.array(block, dtype=float)
            feas = np.all(instance.A @ X.T <= instance.b[:, None] + tol, axis=0)
            if np.any(feas):
                vals = X[feas] @ instance.c
                k = int(np.argmin(vals))
                if vals[k] < best_z:
                    best_z, best_x = float(vals[k]), X[feas][k]
        if best_x is None:
            raise ModelError("no integer-feasible point")
        return best_x, best_z

    from scipy.optimize import linprog

    cont = np.setdiff1d(np.arange(instance.n), idx)
    best_z, best_x = np.inf, None
    for assign in itertools.product(*box):
        fixed = np.zeros(instance.n)
        fixed[idx] = assign
        rhs = instance.b - instance.A[:, idx] @ fixed[idx]
        res = linprog(instance.c[cont], A_ub=instance.A[:, cont], b_ub=rhs,
                      bounds=[(0, None)] * len(cont), method="highs")
        if res.status == 0:
            z = float(res.fun + instance.c[idx] @ fixed[idx])
            if z < best_z:
                x = fixed.copy()
                x[cont] = res.x
                best_z, best_x = z, x
    if best_x is None:
        raise ModelError("no integer-feasible point")
    return best_x, best_z


def integer_feasible_points(instance: ProblemInstance, cap: int = 20,
                            tol: float = 1e-9) -> np.ndarray:
    """All feasible points of a pure-integer instance, one per row.

    Backs the validity checks: a cut g.x <= h must hold on every row.
    """
    if not instance.is_pure_integer:
        raise ModelError("feasible-point enumeration needs a pure-integer instance")
    if instance.n > cap:
        raise ModelError(f"{instance.n} integer variables exceeds cap {cap}")
    ub = instance.upper_bounds()
    ranges = [np.arange(int(np.floor(ub[j] + tol)) + 1) for j in range(instance.n)]
    pts = []
    grid = itertools.product(*ranges)
    while True:
        block = list(itertools.islice(grid, 200_000))
        if not block:
            break
        X = np.array(block, dtype=float)
        feas = np.all(instance.A @ X.T <= instance.b[:, None] + tol, axis=0)
        pts.append(X[feas])
    return np.vstack(pts) if pts else np.zeros((0, instance.n))


def quality(instance: ProblemInstance, candidate: np.ndarray,
            z_star: float | None = None,
            last_cuts: list[Cut] | None = None,
            prev_candidate: np.ndarray | None = None) -> QualityReport:
    """Gap/Infeas/MaxViol triple for one relaxation candidate.

    gap      100 (z* - c.x) / max(|z*|, 1), None when z* is unknown
    infeas   mean |x_i - round(x_i)| over integer variables
    max_viol max over last-round cuts of (g.x_prev - h)/max(||g||_2, 1), >= 0
    """
    candidate = np.asarray(candidate, dtype=float).ravel()
    z_tilde = float(instance.c @ candidate)
    if z_star is None:
        z_star = instance.z_star
    gap = None
    if z_star is not None:
        gap = 100.0 * (z_star - z_tilde) / max(abs(z_star), 1.0)
    idx = instance.integer_indices
    infeas = float(np.mean(np.abs(candidate[idx] - np.round(candidate[idx])))) if len(idx) else 0.0
    max_viol = 0.0
    if last_cuts and prev_candidate is not None:
        prev = np.asarray(prev_candidate, dtype=float).ravel()
        for cut in last_cuts:
            v = (float(cut.g @ prev) - cut.h) / max(float(np.linalg.norm(cut.g)), 1.0)
            max_viol = max(max_viol, v)
    return QualityReport(gap=gap, infeas=infeas, max_viol=max(max_viol, 0.0),
                         z_tilde=z_tilde, z_star=z_star)


def save_family(family: ParametricFamily, path: str) -> None:
    payload = {
        "format": FAMILY_FORMAT,
        "name": family.name,
        "n": family.n,
        "m": family.m,
        "A": family.A.tolist(),
        "b": family.b.tolist(),
        "c": family.c.tolist(),
        "integer_indices": family.integer_indices.tolist(),
        "theta_map": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                      for k, v in family.theta_map.items()},
        "theta_samples": [t.tolist() for t in family.theta_samples],
        "splits": family.splits,
        "z_star": family.z_star,
        "config": family.config,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_family(path: str) -> ParametricFamily:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != FAMILY_FORMAT:
        raise ModelError(f"unsupported family format: {payload.get('format')!r}")
    A = np.array(payload["A"], dtype=float)
    if A.shape != (payload["m"], payload["n"]):
        raise ModelError("A shape disagrees with declared (m, n)")
    theta_map = dict(payload["theta_map"])
    if "matrix" in theta_map:
        theta_map["matrix"] = np.array(theta_map["matrix"], dtype=float)
    return ParametricFamily(
        A=A,
        b=np.array(payload["b"], dtype=float),
        c=np.array(payload["c"], dtype=float),
        integer_indices=np.array(payload["integer_indices"], dtype=int),
        theta_map=theta_map,
        theta_samples=[np.array(t, dtype=float) for t in payload["theta_samples"]],
        splits=list(payload.get("splits", [])),
        z_star=list(payload.get("z_star", [])),
        name=payload.get("name", ""),
        config=dict(payload.get("config", {})),
    )
