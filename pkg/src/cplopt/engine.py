"""Unrolled cutting-plane runs and the reverse sweep through them.

A run starts from the cut-free relaxation, then repeats for R rounds:
encode the state history, ask the policy (or the fixed baseline rule) for
K cut parameter sets, solve one separation program per head against the
round-start candidate and pool, optionally strengthen integer coefficients,
pool the accepted cuts, and re-solve the relaxation. The loss discounts
per-round bound improvements by gamma. Runs exit early once the candidate
is integral; remaining states repeat the final one so shapes and the loss
are unchanged.

The backward pass walks rounds in reverse. Loss cotangents land on the
candidates; each candidate's cotangent flows through the pooled relaxation
to the cut rows active there, then per cut through the pooling
normalization, the optional strengthening (argmax branch selection, with
the floor and ceiling held fixed), and the separation program down to the
normalization weights and the separated point. The point cotangent feeds
the previous round; the weight cotangents feed the policy. Two chains are
deliberately cut: pool rows appearing inside later separation programs are
treated as constants, and the state encoding is not differentiated. Both
truncations are exact for the final round and keep single-round gradient
checks clean.

Baseline runs use p = 1, the all-ones normalization, and one head per
most-fractional integer variable, with ties toward the lower index.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import cgp_vjp, relaxation_vjp
from .cgp import (
    CgpLayout,
    CutGenParams,
    NoCut,
    build_cgp,
    monoidal_strengthen,
    solve_cgp,
    standard_normalization,
)
from .conic import OPTIMAL, ConicSolution, RelaxationError, solve_relaxation
from .model import EPS_CUT, EPS_INT, NORM_FLOOR, AlgoState, Cut, CutPool, ProblemInstance
from .policy import NoParams, PolicyParams, act, most_fractional_indices, policy_backward, trainable_arrays
from .subadditive import snapped_ceil, snapped_floor

logger = logging.getLogger(__name__)

TRAJ_FORMAT = "cplopt-traj-v1"


class EngineError(RuntimeError):
    """A run aborted; the message carries the offending cuts serialized."""


@dataclass(frozen=True)
class RunConfig:
    """Shape of one unrolled run; gamma only weighs the loss."""

    rounds: int
    heads: int
    p: float = 1.0
    gamma: float = 0.9
    eps_cut: float = EPS_CUT
    history: int = 1
    strengthen: bool = False
    mode: str = "policy"

    def __post_init__(self):
        if self.rounds < 1 or self.heads < 1:
            raise ValueError("rounds and heads must be at least 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie strictly between 0 and 1")
        if self.p not in (1.0, 2.0) and not np.isinf(self.p):
            raise ValueError(f"unsupported norm order {self.p}")
        if self.history < 1:
            raise ValueError("history window must be at least 1")
        if self.mode not in ("policy", "baseline"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class CutRecord:
    """Everything the reverse sweep needs about one accepted cut: the solved
    separation program, its raw (pre-normalization) coefficients, and the
    pool size it was built against."""

    round_index: int
    head_index: int
    sigma: CutGenParams
    problem: object
    candidate: object
    g_raw: np.ndarray
    h_raw: float
    strengthened: bool
    pool_size_at_birth: int


@dataclass
class Trajectory:
    """One recorded run: states s_0..s_R plus the solver artifacts the
    backward pass replays. Serialization keeps states, parameters, cuts,
    loss, and diagnostics; the solver internals stay in memory only."""

    instance: ProblemInstance | None
    config: RunConfig
    states: list[AlgoState]
    sigmas: list[list]
    cuts: list[list[Cut]]
    loss: float
    diagnostics: dict = field(default_factory=dict)
    relaxations: list = field(default_factory=list)
    records: list[CutRecord] = field(default_factory=list)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([s.objective for s in self.states])


def loss(trajectory: Trajectory, gamma: float) -> float:
    """Discounted sum of bound improvements, negated: nonpositive whenever
    the bound is monotone, and zero exactly when it never moves."""
    z = trajectory.objectives
    rounds = np.arange(1, len(z))
    return float(-np.sum(gamma ** rounds * np.diff(z)))


def _is_integral(x: np.ndarray, integer_indices) -> bool:
    idx = np.asarray(integer_indices, dtype=int)
    if idx.size == 0:
        return True
    frac = np.abs(x[idx] - np.round(x[idx]))
    return float(frac.max()) <= EPS_INT


def _snapshot(round_index: int, sol, pool: CutPool) -> AlgoState:
    G, h = pool.matrix()
    return AlgoState(round_index=round_index, objective=sol.z,
                     candidate=sol.x, pool_G=G, pool_h=h)


def _baseline_sigmas(x_bar, instance: ProblemInstance, heads: int,
                     m_hat: int) -> list:
    ranked = most_fractional_indices(x_bar, instance.integer_indices, heads)
    sigmas = []
    for k in range(heads):
        if k >= len(ranked):
            sigmas.append(NoParams())
            continue
        j = ranked[k]
        pi = np.zeros(instance.n)
        pi[j] = 1.0
        sigmas.append(CutGenParams(pi=pi, eta=float(np.floor(x_bar[j])),
                                   D_diag=standard_normalization(m_hat),
                                   p=1.0))
    return sigmas


def _check_policy(policy: PolicyParams, instance: ProblemInstance,
                  config: RunConfig) -> None:
    s = policy.sizes
    problems = []
    if s.n != instance.n or s.m != instance.m:
        problems.append(f"policy sized for n={s.n}, m={s.m} but the instance "
                        f"has n={instance.n}, m={instance.m}")
    if s.rounds != config.rounds or s.heads != config.heads:
        problems.append(f"policy sized for {s.rounds} rounds x {s.heads} "
                        f"heads but the run wants {config.rounds} x "
                        f"{config.heads}")
    if s.history != config.history:
        problems.append(f"policy history {s.history} != run history "
                        f"{config.history}")
    if s.p != config.p:
        problems.append(f"policy norm order {s.p} != run norm order {config.p}")
    if problems:
        raise ValueError("; ".join(problems))


def _serialize_cuts(cuts: list[Cut]) -> str:
    return json.dumps([{"g": [float(v) for v in c.g], "h": float(c.h),
                        "round": c.round_index, "head": c.head_index}
                       for c in cuts])


def run_forward(instance: ProblemInstance, policy: PolicyParams,
                config: RunConfig) -> Trajectory:
    """Unroll R rounds of policy-driven separation; see the module notes."""
    _check_policy(policy, instance, config)
    return _run(instance, config, policy)


def run_baseline(instance: ProblemInstance, config: RunConfig) -> Trajectory:
    """Unroll with the fixed rule instead of a policy (p = 1, all-ones
    normalization, most-fractional disjunctions)."""
    return _run(instance, replace(config, mode="baseline"), None)


def _run(instance: ProblemInstance, config: RunConfig,
         policy: PolicyParams | None) -> Trajectory:
    pool = CutPool(instance.n, capacity=config.rounds * config.heads)
    sol = solve_relaxation(instance, pool)
    states = [_snapshot(0, sol, pool)]
    relaxations = [sol]
    sigmas: list[list] = []
    round_cuts: list[list[Cut]] = []
    records: list[CutRecord] = []
    diagnostics = {"no_cut": 0, "rejected": 0, "duplicates": 0,
                   "solver_failures": 0, "early_exit_round": None}

    for r in range(1, config.rounds + 1):
        if diagnostics["early_exit_round"] is None and _is_integral(
                states[-1].candidate, instance.integer_indices):
            diagnostics["early_exit_round"] = r - 1
        if diagnostics["early_exit_round"] is not None:
            states.append(AlgoState(r, states[-1].objective,
                                    states[-1].candidate,
                                    states[-1].pool_G, states[-1].pool_h))
            relaxations.append(relaxations[-1])
            sigmas.append([])
            round_cuts.append([])
            continue

        x_bar = states[-1].candidate
        birth_pool = pool.copy()
        m_hat = instance.m + len(birth_pool)
        if policy is None:
            sigma_list = _baseline_sigmas(x_bar, instance, config.heads, m_hat)
        else:
            sigma_list = act(policy, states, x_bar, instance.integer_indices,
                             m_hat)
        sigmas.append(sigma_list)

        accepted: list[Cut] = []
        for k, sigma in enumerate(sigma_list):
            if isinstance(sigma, NoParams):
                diagnostics["no_cut"] += 1
                continue
            problem = build_cgp(instance, birth_pool, x_bar, sigma)
            candidate = solve_cgp(problem, x_bar, eps_cut=config.eps_cut)
            if isinstance(candidate, NoCut):
                diagnostics["no_cut"] += 1
                if candidate.reason != "no separation":
                    diagnostics["solver_failures"] += 1
                continue
            if config.strengthen:
                lifted = monoidal_strengthen(candidate, instance, sigma,
                                             birth_pool)
                g_raw, h_raw = lifted.g, lifted.h
            else:
                g_raw, h_raw = candidate.g.copy(), candidate.h
            violation = float(g_raw @ x_bar - h_raw)
            if violation <= config.eps_cut:
                diagnostics["rejected"] += 1
                continue
            cut = Cut(g=g_raw, h=h_raw, round_index=r, head_index=k,
                      violation_at_birth=violation,
                      multipliers=(candidate.u, candidate.v))
            if not pool.add(cut):
                diagnostics["duplicates"] += 1
                continue
            accepted.append(pool.cuts[-1])
            records.append(CutRecord(round_index=r, head_index=k, sigma=sigma,
                                     problem=problem, candidate=candidate,
                                     g_raw=np.asarray(g_raw, dtype=float),
                                     h_raw=float(h_raw),
                                     strengthened=config.strengthen,
                                     pool_size_at_birth=len(birth_pool)))
        round_cuts.append(accepted)

        if accepted:
            try:
                sol = solve_relaxation(instance, pool)
            except RelaxationError as err:
                raise EngineError(
                    f"relaxation infeasible after round {r}; a pooled cut is "
                    f"invalid: {_serialize_cuts(accepted)}") from err
        relaxations.append(sol)
        states.append(_snapshot(r, sol, pool))

    traj = Trajectory(instance=instance, config=config, states=states,
                      sigmas=sigmas, cuts=round_cuts, loss=0.0,
                      diagnostics=diagnostics, relaxations=relaxations,
                      records=records)
    traj.loss = loss(traj, config.gamma)
    return traj


def _normalization_vjp(g: np.ndarray, h: float, cot_gbar: np.ndarray,
                       cot_hbar: float) -> tuple[np.ndarray, float]:
    """Pull a cotangent back through (g, h) -> (g, h) / max(|g|, floor)."""
    s = float(np.linalg.norm(g))
    if s <= NORM_FLOOR:
        return cot_gbar / NORM_FLOOR, cot_hbar / NORM_FLOOR
    g_bar = g / s
    h_bar = h / s
    mixed = float(cot_gbar @ g_bar + cot_hbar * h_bar)
    return cot_gbar / s - g_bar * (mixed / s), cot_hbar / s


def _strengthen_vjp(record: CutRecord, instance: ProblemInstance,
                    pool_rows: tuple[np.ndarray, np.ndarray],
                    cot_g: np.ndarray, cot_h: float,
                    lay: CgpLayout) -> np.ndarray:
    """Map a cut cotangent to a full-stack [g, h, u, v] cotangent through
    the strengthening's active branches; floor and ceiling are constants."""
    cand = record.candidate
    u, v = cand.u, cand.v
    u0, v0 = float(u[-1]), float(v[-1])
    full = np.zeros(lay.num_y)
    full[lay.col_h] = cot_h
    mask = instance.integer_mask()
    full[:instance.n][~mask] = cot_g[~mask]
    if u0 + v0 <= 1e-12:
        # strengthening was a no-op; the whole cut cotangent passes through
        full[:instance.n][mask] = cot_g[mask]
        return full
    G_pool, h_pool = pool_rows
    A_hat = np.vstack([instance.A, G_pool])
    a_u = A_hat.T @ u[:-1]
    a_v = A_hat.T @ v[:-1]
    beta = (a_v - a_u) / (u0 + v0)
    fl = snapped_floor(beta)
    ce = snapped_ceil(beta)
    on_u = (a_u + u0 * fl) >= (a_v - v0 * ce)
    sel_u = np.where(mask & on_u, cot_g, 0.0)
    sel_v = np.where(mask & ~on_u, cot_g, 0.0)
    cot_u = np.append(A_hat @ sel_u, float(fl @ sel_u))
    cot_v = np.append(A_hat @ sel_v, -float(ce @ sel_v))
    # the multipliers were clipped at zero before strengthening
    y = cand.y
    cot_u[y[lay.cols_u] <= 0.0] = 0.0
    cot_v[y[lay.cols_v] <= 0.0] = 0.0
    full[lay.cols_u] = cot_u
    full[lay.cols_v] = cot_v
    return full


def backward(trajectory: Trajectory, policy: PolicyParams,
             config: RunConfig) -> dict[str, np.ndarray]:
    """Gradient of the trajectory loss with respect to the policy arrays.

    Only the normalization weights carry gradient into the policy; the
    disjunction choice is piecewise constant. Regularized adjoint solves are
    counted under diagnostics["backward_fallbacks"] on the trajectory.
    """
    if trajectory.config.mode == "baseline":
        raise ValueError("baseline trajectories carry no trainable parameters")
    if trajectory.instance is None or not trajectory.relaxations:
        raise ValueError("backward needs a live trajectory from run_forward")
    instance = trajectory.instance
    n = instance.n
    gamma = config.gamma
    grads = {key: np.zeros_like(arr)
             for key, arr in trainable_arrays(policy).items()}
    exit_round = trajectory.diagnostics.get("early_exit_round")
    last = config.rounds if exit_round is None else exit_round
    fallbacks = 0
    if last == 0:
        trajectory.diagnostics["backward_fallbacks"] = fallbacks
        return grads

    cot_x = [np.zeros(n) for _ in range(last + 1)]
    for r in range(1, last + 1):
        w = gamma ** r
        cot_x[r] -= w * instance.c
        cot_x[r - 1] += w * instance.c

    pool_G, pool_h = trajectory.states[last].pool_G, trajectory.states[last].pool_h
    sizes = np.cumsum([0] + [len(c) for c in trajectory.cuts])
    cut_cot_g = [np.zeros(n) for _ in trajectory.records]
    cut_cot_h = [0.0 for _ in trajectory.records]

    for r in range(last, 0, -1):
        live = int(sizes[r])
        if live and np.any(cot_x[r]):
            prefix = CutPool(n)
            prefix.cuts = [Cut(pool_G[i], pool_h[i]) for i in range(live)]
            rvjp = relaxation_vjp(instance, prefix, trajectory.relaxations[r],
                                  cot_x[r])
            if rvjp.diagnostics.get("path") == "regularized":
                fallbacks += 1
            for i in range(live):
                cut_cot_g[i] += rvjp.grad_G[i]
                cut_cot_h[i] += rvjp.grad_h[i]

        cot_D: dict[int, np.ndarray] = {}
        for i in range(int(sizes[r - 1]), live):
            record = trajectory.records[i]
            if not np.any(cut_cot_g[i]) and cut_cot_h[i] == 0.0:
                continue
            cot_g, cot_h = _normalization_vjp(record.g_raw, record.h_raw,
                                              cut_cot_g[i], cut_cot_h[i])
            birth = record.pool_size_at_birth
            lay = CgpLayout(n, instance.m + birth, record.sigma.p)
            if record.strengthened:
                cot_full = _strengthen_vjp(
                    record, instance, (pool_G[:birth], pool_h[:birth]),
                    cot_g, cot_h, lay)
            else:
                cot_full = np.zeros(lay.num_y)
                cot_full[:n] = cot_g
                cot_full[lay.col_h] = cot_h
            cand = record.candidate
            solution = ConicSolution(y=cand.y, duals=cand.duals,
                                     objective=float(record.problem.c @ cand.y),
                                     status=OPTIMAL, kkt_residual=0.0)
            vjp = cgp_vjp(record.problem, solution, cot_full, n=n)
            if vjp.diagnostics.get("path") == "regularized":
                fallbacks += 1
            cot_x[r - 1] += vjp.grad_xbar
            grad_D = vjp.grad_D
            if grad_D.ndim == 2:
                grad_D = np.diag(grad_D).copy()
            if record.head_index in cot_D:
                cot_D[record.head_index] += grad_D
            else:
                cot_D[record.head_index] = grad_D

        if cot_D:
            head_cots = [cot_D.get(k) for k in range(config.heads)]
            m_hat = instance.m + int(sizes[r - 1])
            step = policy_backward(policy, trajectory.states[:r],
                                   trajectory.states[r - 1].candidate,
                                   instance.integer_indices, m_hat, head_cots)
            for key in grads:
                grads[key] += step[key]

    trajectory.diagnostics["backward_fallbacks"] = fallbacks
    if fallbacks:
        logger.warning("%d adjoint solves fell back to regularization",
                       fallbacks)
    return grads


def _sigma_json(sigma) -> dict:
    if isinstance(sigma, NoParams):
        return {"no_params": sigma.reason}
    return {"pi": [float(v) for v in sigma.pi], "eta": float(sigma.eta),
            "D_diag": np.asarray(sigma.D_diag).tolist(),
            "p": "inf" if np.isinf(sigma.p) else float(sigma.p)}


def _sigma_from_json(rec) -> CutGenParams | NoParams:
    if "no_params" in rec:
        return NoParams(rec["no_params"])
    p = np.inf if rec["p"] == "inf" else float(rec["p"])
    return CutGenParams(pi=np.asarray(rec["pi"], dtype=float),
                        eta=rec["eta"],
                        D_diag=np.asarray(rec["D_diag"], dtype=float), p=p)


def save_trajectory(trajectory: Trajectory, path) -> None:
    """Write the inspectable part of a trajectory; solver records and the
    instance stay behind, so a reloaded trajectory cannot drive backward."""
    cfg = trajectory.config
    payload = {
        "format": TRAJ_FORMAT,
        "config": {
            "rounds": cfg.rounds, "heads": cfg.heads,
            "p": "inf" if np.isinf(cfg.p) else cfg.p,
            "gamma": cfg.gamma, "eps_cut": cfg.eps_cut,
            "history": cfg.history, "strengthen": cfg.strengthen,
            "mode": cfg.mode,
        },
        "loss": trajectory.loss,
        "states": [
            {"round": s.round_index, "objective": s.objective,
             "candidate": s.candidate.tolist(),
             "pool_G": s.pool_G.tolist(), "pool_h": s.pool_h.tolist()}
            for s in trajectory.states
        ],
        "sigmas": [[_sigma_json(sig) for sig in round_sigmas]
                   for round_sigmas in trajectory.sigmas],
        "cuts": [
            [{"g": c.g.tolist(), "h": c.h, "round": c.round_index,
              "head": c.head_index,
              "violation_at_birth": c.violation_at_birth}
             for c in round_cuts]
            for round_cuts in trajectory.cuts
        ],
        "diagnostics": trajectory.diagnostics,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_trajectory(path) -> Trajectory:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != TRAJ_FORMAT:
        raise ValueError(f"not a {TRAJ_FORMAT} file: {payload.get('format')!r}")
    cfg = payload["config"]
    config = RunConfig(rounds=cfg["rounds"], heads=cfg["heads"],
                       p=np.inf if cfg["p"] == "inf" else float(cfg["p"]),
                       gamma=cfg["gamma"], eps_cut=cfg["eps_cut"],
                       history=cfg["history"], strengthen=cfg["strengthen"],
                       mode=cfg["mode"])
    states = [AlgoState(round_index=s["round"], objective=s["objective"],
                        candidate=np.asarray(s["candidate"]),
                        pool_G=np.asarray(s["pool_G"]),
                        pool_h=np.asarray(s["pool_h"]))
              for s in payload["states"]]
    sigmas = [[_sigma_from_json(rec) for rec in round_sigmas]
              for round_sigmas in payload["sigmas"]]
    cuts = [[Cut(g=np.asarray(c["g"]), h=c["h"], round_index=c["round"],
                 head_index=c["head"],
                 violation_at_birth=c["violation_at_birth"])
             for c in round_cuts]
            for round_cuts in payload["cuts"]]
    return Trajectory(instance=None, config=config, states=states,
                      sigmas=sigmas, cuts=cuts, loss=payload["loss"],
                      diagnostics=payload["diagnostics"])
