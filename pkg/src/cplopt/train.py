"""Offline training of cut policies and checkpoint evaluation.

fit() runs minibatch stochastic gradient with classical momentum and a
1/(1 + kappa t) learning-rate decay over a family's training split,
evaluates the validation split after every epoch, keeps the checkpoint
with the best validation mean gap, and stops once the gap has not
improved for `patience` epochs. Batch gradients are means of per-instance
gradients. A non-finite batch gradient skips the update and halves the
base learning rate; three in a row abort the fit.

evaluate() replays a checkpoint (or the baseline when given None) over a
list of parameter vectors and aggregates per-instance gap, integrality
residual, last-round cut violation, and loss. Optima come from the values
embedded in the family file when present, else from the brute-force
oracle when the instance is small enough; instances without an optimum
are excluded from the mean gap and counted.

Every piece is deterministic at fixed seeds and solver settings, so two
identical fits produce byte-identical metric tables.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .engine import RunConfig, backward, run_baseline, run_forward
from .model import (
    ModelError,
    ParametricFamily,
    QualityReport,
    brute_force_optimum,
    quality,
    realize,
)
from .policy import PolicyParams, PolicySizes, init_params, trainable_arrays

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
BRUTE_FORCE_CAP = 20


class TrainError(RuntimeError):
    """Training aborted (repeated non-finite gradients)."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings; decay gives lr_t = learning_rate / (1 + decay*t)
    with t counting completed epochs, so the first epoch runs at the base
    rate. learning_rate 0 is allowed for no-update runs."""

    learning_rate: float
    momentum: float = 0.9
    decay: float = 0.01
    batch_size: int = 10
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience must be >= 1")
        if self.decay < 0:
            raise ValueError("decay must be nonnegative")


@dataclass
class DatasetSplit:
    """Parameter vectors by role; the same theta may not appear twice."""

    training: list[np.ndarray]
    validation: list[np.ndarray]
    test: list[np.ndarray]

    def __post_init__(self):
        self.training = [np.asarray(t, dtype=float).ravel() for t in self.training]
        self.validation = [np.asarray(t, dtype=float).ravel() for t in self.validation]
        self.test = [np.asarray(t, dtype=float).ravel() for t in self.test]
        seen = set()
        for theta in self.training + self.validation + self.test:
            key = theta.tobytes()
            if key in seen:
                raise ValueError("splits are not disjoint")
            seen.add(key)

    @classmethod
    def from_family(cls, family: ParametricFamily) -> "DatasetSplit":
        by = {s: [family.theta_samples[i] for i in family.indices(s)]
              for s in SPLITS}
        return cls(training=by["train"], validation=by["validation"],
                   test=by["test"])


@dataclass
class EvalResult:
    """Aggregate quality over one theta list; mean_gap is None when no
    instance had a known optimum, and `missing` counts the exclusions."""

    mean_gap: float | None
    mean_infeas: float
    mean_max_viol: float
    mean_loss: float
    missing: int
    reports: list[QualityReport] = field(default_factory=list)


@dataclass
class FitResult:
    params: PolicyParams
    metrics: list[dict]
    csv: str
    best_epoch: int
    epochs_run: int


def _theta_index(family: ParametricFamily) -> dict[bytes, int]:
    return {np.asarray(t, dtype=float).ravel().tobytes(): i
            for i, t in enumerate(family.theta_samples)}


def _resolve_z_star(instance, cache: dict, key: bytes) -> float | None:
    if instance.z_star is not None:
        return instance.z_star
    if key in cache:
        return cache[key]
    z = None
    if len(instance.integer_indices) <= BRUTE_FORCE_CAP:
        try:
            z = brute_force_optimum(instance)[1]
        except ModelError:
            z = None
    cache[key] = z
    return z


def evaluate(params: PolicyParams | None, family: ParametricFamily,
             thetas, run_config: RunConfig,
             z_cache: dict | None = None) -> EvalResult:
    """Run the policy (or the baseline for params=None) on each theta."""
    if z_cache is None:
        z_cache = {}
    lookup = _theta_index(family)
    reports = []
    losses = []
    missing = 0
    for theta in thetas:
        theta = np.asarray(theta, dtype=float).ravel()
        key = theta.tobytes()
        instance = realize(family, theta, index=lookup.get(key))
        if params is None:
            traj = run_baseline(instance, run_config)
        else:
            traj = run_forward(instance, params, run_config)
        z_star = _resolve_z_star(instance, z_cache, key)
        report = quality(instance, traj.states[-1].candidate, z_star,
                         last_cuts=traj.cuts[-1],
                         prev_candidate=traj.states[-2].candidate)
        if report.gap is None:
            missing += 1
        reports.append(report)
        losses.append(traj.loss)
    gaps = [r.gap for r in reports if r.gap is not None]
    return EvalResult(
        mean_gap=float(np.mean(gaps)) if gaps else None,
        mean_infeas=float(np.mean([r.infeas for r in reports])),
        mean_max_viol=float(np.mean([r.max_viol for r in reports])),
        mean_loss=float(np.mean(losses)),
        missing=missing,
        reports=reports,
    )


def _fmt(value: float | None) -> str:
    return "nan" if value is None else f"{value:.10f}"


def metrics_csv(rows: list[dict]) -> str:
    lines = ["epoch,split,mean_gap,mean_infeas,mean_maxviol,mean_loss"]
    for row in rows:
        lines.append(",".join([str(row["epoch"]), row["split"],
                               _fmt(row["mean_gap"]), _fmt(row["mean_infeas"]),
                               _fmt(row["mean_maxviol"]),
                               _fmt(row["mean_loss"])]))
    return "\n".join(lines) + "\n"


def _metric_rows(epoch: int, split: str, result: EvalResult) -> dict:
    return {"epoch": epoch, "split": split, "mean_gap": result.mean_gap,
            "mean_infeas": result.mean_infeas,
            "mean_maxviol": result.mean_max_viol,
            "mean_loss": result.mean_loss}


def _early_stop_metric(result: EvalResult) -> float:
    # validation gap when optima are known, validation loss otherwise
    return result.mean_loss if result.mean_gap is None else result.mean_gap


def fit(family: ParametricFamily, splits: DatasetSplit,
        run_config: RunConfig, train_config: TrainConfig,
        params: PolicyParams | None = None) -> FitResult:
    """Train on splits.training, early-stop on splits.validation."""
    if not splits.training:
        raise ValueError("training split is empty")
    if params is None:
        sizes = PolicySizes(n=family.n, m=family.m, rounds=run_config.rounds,
                            heads=run_config.heads, history=run_config.history,
                            p=run_config.p)
        params = init_params(train_config.seed, sizes)
    params = copy.deepcopy(params)
    arrays = trainable_arrays(params)
    velocity = {key: np.zeros_like(arr) for key, arr in arrays.items()}
    lookup = _theta_index(family)
    z_cache: dict = {}
    rng = np.random.default_rng(train_config.seed)
    lr0 = train_config.learning_rate
    consecutive_bad = 0

    def run_eval(epoch: int) -> EvalResult:
        train_res = evaluate(params, family, splits.training, run_config,
                             z_cache)
        val_res = evaluate(params, family, splits.validation, run_config,
                           z_cache)
        rows.append(_metric_rows(epoch, "train", train_res))
        rows.append(_metric_rows(epoch, "validation", val_res))
        return val_res

    rows: list[dict] = []
    val = run_eval(0)
    best_metric = _early_stop_metric(val)
    best_epoch = 0
    best_params = copy.deepcopy(params)
    bad_epochs = 0
    epochs_run = 0

    for epoch in range(1, train_config.max_epochs + 1):
        epochs_run = epoch
        order = rng.permutation(len(splits.training))
        for start in range(0, len(order), train_config.batch_size):
            # recomputed per batch so a NaN halving acts immediately
            lr_t = lr0 / (1.0 + train_config.decay * (epoch - 1))
            batch = order[start:start + train_config.batch_size]
            total = {key: np.zeros_like(arr) for key, arr in arrays.items()}
            for i in batch:
                theta = splits.training[i]
                instance = realize(family, theta,
                                   index=lookup.get(theta.tobytes()))
                traj = run_forward(instance, params, run_config)
                grad = backward(traj, params, run_config)
                for key in total:
                    total[key] += grad[key]
            bad = any(not np.all(np.isfinite(g)) for g in total.values())
            if bad:
                consecutive_bad += 1
                lr0 *= 0.5
                logger.warning("non-finite batch gradient at epoch %d; "
                               "skipping update and halving the rate to %g",
                               epoch, lr0)
                if consecutive_bad >= 3:
                    raise TrainError("three consecutive non-finite batch "
                                     "gradients")
                continue
            consecutive_bad = 0
            scale = lr_t / len(batch)
            for key, arr in arrays.items():
                velocity[key] = (train_config.momentum * velocity[key]
                                 - scale * total[key])
                arr += velocity[key]
            if params.mode == "static":
                np.maximum(arrays["D_table"], 0.0, out=arrays["D_table"])

        val = run_eval(epoch)
        metric = _early_stop_metric(val)
        if metric < best_metric:
            best_metric = metric
            best_epoch = epoch
            best_params = copy.deepcopy(params)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_config.patience:
                break

    return FitResult(params=best_params, metrics=rows, csv=metrics_csv(rows),
                     best_epoch=best_epoch, epochs_run=epochs_run)
