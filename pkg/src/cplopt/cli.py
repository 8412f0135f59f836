"""Command-line entry point.

Subcommands: generate (emit a family file), train (fit a policy and write
the best checkpoint plus a metrics table), evaluate (replay a checkpoint
over splits), baseline (same without a checkpoint), solve (one instance,
trajectory JSON plus a printed quality line), gradcheck (compare the
analytic gradient of one unrolled run against central differences).

Every command writes its outputs under --out next to a manifest JSON that
records the package version, the resolved options, the active solver
tolerance, and an argv list that reproduces the run; outputs carry no
timestamps, so reruns are byte-identical. Exit codes: 0 on success, 1 on
usage errors or malformed input files, 2 on numerical aborts.
"""

from __future__ import annotations

import argparse
import copy
import importlib.metadata
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import finite_diff_check
from .conic import RelaxationError, default_tol
from .engine import (EngineError, RunConfig, backward, run_baseline,
                     run_forward, save_trajectory)
from .instgen import ControlSpec, MatchingSpec, gen_control, gen_matching
from .model import ModelError, load_family, quality, realize, save_family
from .policy import PolicySizes, init_params, load_policy, save_policy
from .train import (SPLITS, DatasetSplit, TrainConfig, TrainError, _fmt,
                    _resolve_z_star, evaluate, fit)

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "cplopt-manifest-v1"
EVAL_COLUMNS = ("split", "count", "missing", "mean_gap", "mean_infeas",
                "mean_maxviol", "mean_loss")
TRAIN_COLUMNS = ("epoch", "split", "mean_gap", "mean_infeas", "mean_maxviol",
                 "mean_loss")
GRADCHECK_TOL = 1e-3


@dataclass
class CliConfig:
    """Resolved invocation: the command plus its option dict (flag names
    with dashes, values JSON-ready). Paths are checked here so every
    command fails the same way on missing inputs."""

    command: str
    options: dict = field(default_factory=dict)

    def validate(self) -> None:
        for key in ("family", "checkpoint"):
            path = self.options.get(key)
            if path is not None and not Path(path).is_file():
                raise ValueError(f"--{key} file not found: {path}")

    def rerun_argv(self) -> list[str]:
        argv = [self.command]
        for key in sorted(self.options):
            value = self.options[key]
            if value is None or value is False:
                continue
            flag = "--" + key.replace("_", "-")
            if value is True:
                argv.append(flag)
            elif isinstance(value, (list, tuple)):
                argv.append(flag)
                argv.extend(str(v) for v in value)
            else:
                argv.extend([flag, str(value)])
        return argv


def _version() -> str:
    try:
        return importlib.metadata.version("cplopt")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


def _write_manifest(out: Path, config: CliConfig, outputs: dict,
                    csv_schemas: dict | None = None) -> None:
    payload = {
        "format": MANIFEST_FORMAT,
        "package": "cplopt",
        "version": _version(),
        "command": config.command,
        "options": config.options,
        "solver_tol": default_tol(),
        "rerun": config.rerun_argv(),
        "outputs": outputs,
        "csv_schemas": csv_schemas or {},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _options(args, keys) -> dict:
    return {key: getattr(args, key) for key in keys}


def _run_config(args, mode: str = "policy") -> RunConfig:
    return RunConfig(rounds=args.rounds, heads=args.heads, p=args.p,
                     gamma=args.gamma, history=args.history,
                     strengthen=args.strengthen, mode=mode)


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--rounds", "--R", type=int, default=2, dest="rounds",
                        help="separation rounds R (default 2)")
    parser.add_argument("--heads", "--K", type=int, default=1, dest="heads",
                        help="cuts per round K (default 1)")
    parser.add_argument("--p", type=float, default=2.0,
                        help="normalization norm order, 1 or 2 (default 2)")
    parser.add_argument("--gamma", type=float, default=0.9,
                        help="loss discount (default 0.9)")
    parser.add_argument("--history", type=int, default=1,
                        help="policy state-encoding window (default 1)")
    parser.add_argument("--strengthen", action="store_true",
                        help="apply integral lifting to accepted cuts")


def _add_jobs_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker count; 1 (the default) is the only "
                             "deterministic setting")


def _check_jobs(args) -> None:
    if args.jobs < 1:
        raise ValueError("--jobs must be at least 1")
    if args.jobs > 1:
        logger.warning("running sequentially; --jobs %d ignored", args.jobs)


def _split_thetas(family, split: str):
    if split == "all":
        names = SPLITS
    else:
        names = (split,)
    rows = []
    for name in names:
        idx = family.indices(name)
        rows.append((name, [family.theta_samples[i] for i in idx]))
    return rows


def _eval_csv(rows) -> str:
    lines = [",".join(EVAL_COLUMNS)]
    for name, count, result in rows:
        lines.append(",".join([
            name, str(count), str(result.missing), _fmt(result.mean_gap),
            _fmt(result.mean_infeas), _fmt(result.mean_max_viol),
            _fmt(result.mean_loss)]))
    return "\n".join(lines) + "\n"


def cmd_generate(args) -> int:
    out = _out_dir(args)
    counts = tuple(args.counts)
    if args.family == "matching":
        spec = MatchingSpec(nodes=args.nodes, edges=args.edges,
                            obj_mean=args.obj_mean, obj_std=args.obj_std,
                            counts=counts, seed=args.seed,
                            embed_optima=not args.no_embed_optima)
        family = gen_matching(spec)
    else:
        spec = ControlSpec(horizon=args.horizon, counts=counts,
                           seed=args.seed,
                           embed_optima=not args.no_embed_optima)
        family = gen_control(spec)
    save_family(family, str(out / "family.json"))
    config = CliConfig("generate", _options(args, (
        "family", "seed", "counts", "nodes", "edges", "obj_mean", "obj_std",
        "horizon", "no_embed_optima", "out")))
    _write_manifest(out, config, {"family": "family.json"})
    print(f"{family.name}: {family.m} x {family.n}, "
          f"{len(family.theta_samples)} theta samples "
          f"({'/'.join(str(c) for c in counts)})")
    return 0


def _policy_params(args, family, run_config):
    sizes = PolicySizes(n=family.n, m=family.m, rounds=run_config.rounds,
                        heads=run_config.heads, hidden=args.hidden,
                        history=run_config.history, p=run_config.p,
                        mode=args.policy_mode)
    return init_params(args.init_seed, sizes)


def cmd_train(args) -> int:
    out = _out_dir(args)
    _check_jobs(args)
    family = load_family(args.family)
    run_config = _run_config(args)
    train_config = TrainConfig(learning_rate=args.lr, momentum=args.momentum,
                               decay=args.decay, batch_size=args.batch_size,
                               max_epochs=args.max_epochs,
                               patience=args.patience, seed=args.seed)
    params = _policy_params(args, family, run_config)
    result = fit(family, DatasetSplit.from_family(family), run_config,
                 train_config, params=params)
    save_policy(result.params, out / "checkpoint.json")
    (out / "metrics.csv").write_text(result.csv)
    config = CliConfig("train", _options(args, (
        "family", "rounds", "heads", "p", "gamma", "history", "strengthen",
        "policy_mode", "hidden", "init_seed", "lr", "momentum", "decay",
        "batch_size", "max_epochs", "patience", "seed", "jobs", "out")))
    _write_manifest(out, config,
                    {"checkpoint": "checkpoint.json",
                     "metrics": "metrics.csv"},
                    {"metrics.csv": list(TRAIN_COLUMNS)})
    last_val = [r for r in result.metrics if r["split"] == "validation"][-1]
    print(f"trained {result.epochs_run} epochs; best epoch "
          f"{result.best_epoch}; final validation gap "
          f"{_fmt(last_val['mean_gap'])}")
    return 0


def _cmd_eval_common(args, params) -> int:
    out = _out_dir(args)
    _check_jobs(args)
    family = load_family(args.family)
    run_config = _run_config(args)
    rows = []
    for name, thetas in _split_thetas(family, args.split):
        result = evaluate(params, family, thetas, run_config)
        rows.append((name, len(thetas), result))
        print(f"{name}: mean gap {_fmt(result.mean_gap)} over "
              f"{len(thetas)} instances ({result.missing} without optima)")
    (out / "metrics.csv").write_text(_eval_csv(rows))
    return 0


def cmd_evaluate(args) -> int:
    params = load_policy(args.checkpoint)
    code = _cmd_eval_common(args, params)
    config = CliConfig("evaluate", _options(args, (
        "family", "checkpoint", "split", "rounds", "heads", "p", "gamma",
        "history", "strengthen", "jobs", "out")))
    _write_manifest(_out_dir(args), config, {"metrics": "metrics.csv"},
                    {"metrics.csv": list(EVAL_COLUMNS)})
    return code


def cmd_baseline(args) -> int:
    code = _cmd_eval_common(args, None)
    config = CliConfig("baseline", _options(args, (
        "family", "split", "rounds", "heads", "p", "gamma", "history",
        "strengthen", "jobs", "out")))
    _write_manifest(_out_dir(args), config, {"metrics": "metrics.csv"},
                    {"metrics.csv": list(EVAL_COLUMNS)})
    return code


def _realized(args, family):
    total = len(family.theta_samples)
    if not 0 <= args.theta_index < total:
        raise ValueError(f"--theta-index {args.theta_index} outside the "
                         f"family's {total} samples")
    theta = family.theta_samples[args.theta_index]
    return realize(family, theta, index=args.theta_index), theta


def cmd_solve(args) -> int:
    out = _out_dir(args)
    family = load_family(args.family)
    instance, theta = _realized(args, family)
    if args.mode == "baseline":
        run_config = _run_config(args, mode="baseline")
        traj = run_baseline(instance, run_config)
    else:
        if args.checkpoint is None:
            raise ValueError("--mode policy requires --checkpoint")
        params = load_policy(args.checkpoint)
        traj = run_forward(instance, params, _run_config(args))
    save_trajectory(traj, out / "trajectory.json")
    z_star = _resolve_z_star(instance, {}, theta.tobytes())
    report = quality(instance, traj.states[-1].candidate, z_star,
                     last_cuts=traj.cuts[-1],
                     prev_candidate=traj.states[-2].candidate)
    gap = "n/a" if report.gap is None else f"{report.gap:.6f}"
    print(f"Gap {gap}  Infeas {report.infeas:.6f}  "
          f"MaxViol {report.max_viol:.6f}")
    config = CliConfig("solve", _options(args, (
        "family", "theta_index", "mode", "checkpoint", "rounds", "heads",
        "p", "gamma", "history", "strengthen", "out")))
    _write_manifest(out, config, {"trajectory": "trajectory.json"})
    return 0


def cmd_gradcheck(args) -> int:
    out = _out_dir(args)
    family = load_family(args.family)
    instance, _ = _realized(args, family)
    run_config = _run_config(args)
    sizes = PolicySizes(n=instance.n, m=instance.m, rounds=run_config.rounds,
                        heads=run_config.heads, history=run_config.history,
                        p=run_config.p, mode="static")
    params = init_params(0, sizes)
    table = params.arrays["D_table"]
    # jitter keeps every entry strictly positive, away from the table's
    # clamp at zero where the loss has a kink
    rng = np.random.default_rng(args.seed)
    table += rng.uniform(0.05, 0.15, size=table.shape)

    def loss_of_table(flat):
        trial = copy.deepcopy(params)
        trial.arrays["D_table"][...] = flat.reshape(table.shape)
        return run_forward(instance, trial, run_config).loss

    traj = run_forward(instance, params, run_config)
    grad = backward(traj, params, run_config)["D_table"].ravel()
    report = finite_diff_check(loss_of_table, grad, table.ravel().copy(),
                               step=args.step)
    ok = report.fraction_ok(GRADCHECK_TOL)
    passed = ok >= 0.95
    checked = int(report.reliable.sum())
    print(f"max rel error {report.max_rel_error:.3e} over {checked} "
          f"reliable coordinates ({report.num_unreliable} unreliable); "
          f"{'PASS' if passed else 'FAIL'} at {GRADCHECK_TOL:g}")
    payload = {
        "analytic": report.analytic.tolist(),
        "central": report.central.tolist(),
        "rel_error": report.rel_error.tolist(),
        "reliable": report.reliable.tolist(),
        "step": report.step,
        "max_rel_error": report.max_rel_error,
        "fraction_ok": ok,
        "passed": passed,
    }
    with open(out / "gradcheck.json", "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
    config = CliConfig("gradcheck", _options(args, (
        "family", "theta_index", "rounds", "heads", "p", "gamma", "history",
        "strengthen", "seed", "step", "out")))
    _write_manifest(out, config, {"report": "gradcheck.json"})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cplopt",
        description="cut-policy training and evaluation over parametric "
                    "MILP families")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="emit a family file")
    gen.add_argument("--family", choices=("matching", "control"),
                     required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--counts", type=int, nargs=3, default=None,
                     metavar=("TRAIN", "VAL", "TEST"))
    gen.add_argument("--nodes", type=int, default=16)
    gen.add_argument("--edges", type=int, default=35)
    gen.add_argument("--obj-mean", type=float, default=30.0)
    gen.add_argument("--obj-std", type=float, default=50.0)
    gen.add_argument("--horizon", type=int, default=10)
    gen.add_argument("--no-embed-optima", action="store_true")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="fit a policy on a family's splits")
    tr.add_argument("--family", required=True, help="family JSON path")
    tr.add_argument("--out", required=True)
    _add_run_flags(tr)
    tr.add_argument("--policy-mode", choices=("recurrent", "static"),
                    default="recurrent")
    tr.add_argument("--hidden", type=int, default=64)
    tr.add_argument("--init-seed", type=int, default=0)
    tr.add_argument("--lr", type=float, default=0.01)
    tr.add_argument("--momentum", type=float, default=0.9)
    tr.add_argument("--decay", type=float, default=0.01)
    tr.add_argument("--batch-size", type=int, default=10)
    tr.add_argument("--max-epochs", type=int, default=50)
    tr.add_argument("--patience", type=int, default=5)
    tr.add_argument("--seed", type=int, default=0)
    _add_jobs_flag(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="replay a checkpoint over splits")
    ev.add_argument("--family", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", choices=SPLITS + ("all",), default="test")
    ev.add_argument("--out", required=True)
    _add_run_flags(ev)
    _add_jobs_flag(ev)
    ev.set_defaults(func=cmd_evaluate)

    ba = sub.add_parser("baseline", help="evaluate the fixed separation rule")
    ba.add_argument("--family", required=True)
    ba.add_argument("--split", choices=SPLITS + ("all",), default="test")
    ba.add_argument("--out", required=True)
    _add_run_flags(ba)
    _add_jobs_flag(ba)
    ba.set_defaults(func=cmd_baseline)

    so = sub.add_parser("solve", help="run one instance and keep the "
                                      "trajectory")
    so.add_argument("--family", required=True)
    so.add_argument("--theta-index", type=int, default=0)
    so.add_argument("--mode", choices=("baseline", "policy"),
                    default="baseline")
    so.add_argument("--checkpoint", default=None)
    so.add_argument("--out", required=True)
    _add_run_flags(so)
    so.set_defaults(func=cmd_solve)

    gc = sub.add_parser("gradcheck", help="finite-difference check of one "
                                          "unrolled run")
    gc.add_argument("--family", required=True)
    gc.add_argument("--theta-index", type=int, default=0)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--step", type=float, default=1e-5)
    gc.add_argument("--out", required=True)
    _add_run_flags(gc)
    gc.set_defaults(func=cmd_gradcheck)

    return parser


def _default_counts(args) -> None:
    if getattr(args, "counts", None) is None and hasattr(args, "counts"):
        args.counts = [40, 15, 15] if args.family == "matching" \
            else [50, 25, 25]


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors; usage is 1 here
        return 0 if exc.code == 0 else 1
    if args.command == "generate":
        _default_counts(args)
    try:
        paths = {key: getattr(args, key, None)
                 for key in ("family", "checkpoint")}
        if args.command != "generate":
            CliConfig(args.command, {k: v for k, v in paths.items()
                                     if v is not None}).validate()
        return args.func(args)
    except (OSError, json.JSONDecodeError, ModelError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (EngineError, TrainError, RelaxationError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
