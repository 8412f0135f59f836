"""Tests for the training loop and checkpoint evaluation."""

import numpy as np
import pytest

import cplopt.train as train_mod
from cplopt.engine import RunConfig, run_baseline
from cplopt.model import ModelError, ParametricFamily
from cplopt.policy import PolicySizes, init_params, trainable_arrays
from cplopt.train import (DatasetSplit, EvalResult, TrainConfig, TrainError,
                          evaluate, fit, metrics_csv)

A_TOY = np.array([[2.0, 2.0], [1.0, 0.0], [0.0, 1.0]])
B_TOY = np.array([3.0, 1.0, 1.0])


def make_family(n_samples=6):
    # objective draws near (-1, -1); integer-feasible points are (0,0),
    # (1,0), (0,1), so z* = min(theta) and brute force is instant
    rng = np.random.default_rng(7)
    thetas = [np.array([-1.0, -1.0]) + rng.uniform(-0.15, 0.15, size=2)
              for _ in range(n_samples)]
    splits = ["train"] * 3 + ["validation"] * 2 + ["test"] * (n_samples - 5)
    return ParametricFamily(A=A_TOY, b=B_TOY, c=np.array([-1.0, -1.0]),
                            integer_indices=[0, 1],
                            theta_map={"mode": "replace_c"},
                            theta_samples=thetas, splits=splits,
                            name="toyfam")


def small_run_config(rounds=1, heads=1):
    return RunConfig(rounds=rounds, heads=heads, p=2.0)


def recurrent_params(family, config, hidden=3, seed=0):
    sizes = PolicySizes(n=family.n, m=family.m, rounds=config.rounds,
                        heads=config.heads, hidden=hidden, p=config.p)
    return init_params(seed, sizes)


def constant_grad_backward(fill_fn, calls=None):
    # stand-in gradient: every array filled with fill_fn(trajectory)
    def fake(trajectory, params, config):
        value = fill_fn(trajectory)
        if calls is not None:
            calls.append(value)
        return {key: np.full_like(arr, value)
                for key, arr in trainable_arrays(params).items()}
    return fake


def scripted_evaluate(val_gaps):
    # run_eval calls evaluate twice per epoch: train first, validation
    # second; feed the validation gaps from a script
    state = {"calls": 0, "gaps": list(val_gaps)}

    def fake(params, family, thetas, run_config, z_cache=None):
        is_validation = state["calls"] % 2 == 1
        state["calls"] += 1
        gap = state["gaps"].pop(0) if is_validation else 0.0
        return EvalResult(mean_gap=gap, mean_infeas=0.0, mean_max_viol=0.0,
                          mean_loss=0.0, missing=0)
    return fake


class TestTrainConfig:
    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": -0.1},
        {"learning_rate": 0.1, "momentum": 1.0},
        {"learning_rate": 0.1, "momentum": -0.1},
        {"learning_rate": 0.1, "batch_size": 0},
        {"learning_rate": 0.1, "max_epochs": 0},
        {"learning_rate": 0.1, "patience": 0},
        {"learning_rate": 0.1, "decay": -0.01},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_zero_learning_rate_allowed(self):
        assert TrainConfig(learning_rate=0.0).learning_rate == 0.0


class TestDatasetSplit:
    def test_from_family_partitions(self):
        family = make_family()
        splits = DatasetSplit.from_family(family)
        assert len(splits.training) == 3
        assert len(splits.validation) == 2
        assert len(splits.test) == 1
        for i, theta in zip(family.indices("train"), splits.training):
            assert np.array_equal(theta, family.theta_samples[i])

    def test_rejects_overlap_across_splits(self):
        theta = np.array([-1.0, -1.0])
        with pytest.raises(ValueError, match="disjoint"):
            DatasetSplit(training=[theta], validation=[theta.copy()], test=[])

    def test_rejects_duplicate_within_split(self):
        theta = np.array([-1.0, -0.5])
        with pytest.raises(ValueError, match="disjoint"):
            DatasetSplit(training=[theta, theta.copy()], validation=[],
                         test=[])


class TestEvaluate:
    def test_baseline_aggregates_match_direct_runs(self):
        family = make_family()
        config = RunConfig(rounds=2, heads=1, p=1.0)
        thetas = [family.theta_samples[i] for i in family.indices("train")]
        result = evaluate(None, family, thetas, config)
        assert len(result.reports) == 3
        assert result.missing == 0
        losses = []
        for i in family.indices("train"):
            inst = train_mod.realize(family, family.theta_samples[i], index=i)
            losses.append(run_baseline(inst, config).loss)
        assert result.mean_loss == pytest.approx(np.mean(losses), abs=1e-12)
        assert result.mean_gap is not None
        assert result.mean_gap >= 0.0

    def test_deterministic(self):
        family = make_family()
        config = small_run_config()
        thetas = [family.theta_samples[i] for i in family.indices("train")]
        a = evaluate(None, family, thetas, config)
        b = evaluate(None, family, thetas, config)
        assert a.mean_gap == b.mean_gap
        assert a.mean_loss == b.mean_loss
        assert a.mean_infeas == b.mean_infeas

    def test_uses_embedded_optima(self, monkeypatch):
        family = make_family()
        family.z_star = [float(min(t)) for t in family.theta_samples]

        def forbid(*args, **kwargs):
            raise AssertionError("brute force should not run")
        monkeypatch.setattr(train_mod, "brute_force_optimum", forbid)
        thetas = [family.theta_samples[i] for i in family.indices("train")]
        result = evaluate(None, family, thetas, small_run_config())
        assert result.missing == 0
        assert result.mean_gap is not None

    def test_missing_optima_excluded_and_counted(self, monkeypatch):
        family = make_family()

        def fail(*args, **kwargs):
            raise ModelError("no box")
        monkeypatch.setattr(train_mod, "brute_force_optimum", fail)
        thetas = [family.theta_samples[i] for i in family.indices("train")]
        result = evaluate(None, family, thetas, small_run_config())
        assert result.mean_gap is None
        assert result.missing == 3
        assert np.isfinite(result.mean_loss)
        assert all(r.gap is None for r in result.reports)

    def test_policy_checkpoint_runs(self):
        family = make_family()
        config = small_run_config()
        params = recurrent_params(family, config)
        thetas = [family.theta_samples[i] for i in family.indices("validation")]
        result = evaluate(params, family, thetas, config)
        assert len(result.reports) == 2
        assert np.isfinite(result.mean_infeas)
        assert np.isfinite(result.mean_max_viol)


class TestMetricsCsv:
    def test_format(self):
        rows = [{"epoch": 0, "split": "train", "mean_gap": 1.25,
                 "mean_infeas": 0.5, "mean_maxviol": 0.0,
                 "mean_loss": -0.125},
                {"epoch": 0, "split": "validation", "mean_gap": None,
                 "mean_infeas": 0.0, "mean_maxviol": 0.0, "mean_loss": 0.0}]
        text = metrics_csv(rows)
        lines = text.splitlines()
        assert lines[0] == "epoch,split,mean_gap,mean_infeas,mean_maxviol,mean_loss"
        assert lines[1] == ("0,train,1.2500000000,0.5000000000,"
                            "0.0000000000,-0.1250000000")
        assert lines[2].startswith("0,validation,nan,")
        assert text.endswith("\n")


class TestFitMechanics:
    def test_batch_gradient_is_mean_of_instance_gradients(self, monkeypatch):
        family = make_family()
        config = small_run_config()
        params = recurrent_params(family, config)
        init = {k: v.copy() for k, v in trainable_arrays(params).items()}
        calls = []
        monkeypatch.setattr(train_mod, "backward", constant_grad_backward(
            lambda traj: float(traj.instance.c[0]), calls))
        monkeypatch.setattr(train_mod, "evaluate",
                            scripted_evaluate([5.0, 1.0]))
        lr = 0.01
        result = fit(family, DatasetSplit.from_family(family), config,
                     TrainConfig(learning_rate=lr, momentum=0.9, decay=0.0,
                                 batch_size=10, max_epochs=1), params=params)
        assert len(calls) == 3
        # first step with zero velocity: delta = -(lr/B) * sum of grads
        scale = lr / 3.0
        total = 0.0
        for value in calls:
            total += value
        for key, arr in trainable_arrays(result.params).items():
            expected = init[key] - scale * total
            assert np.allclose(arr, expected, rtol=0.0, atol=1e-16)

    def test_momentum_zero_is_plain_sgd_over_two_epochs(self, monkeypatch):
        family = make_family()
        config = small_run_config()
        params = recurrent_params(family, config)
        init = {k: v.copy() for k, v in trainable_arrays(params).items()}
        monkeypatch.setattr(train_mod, "backward",
                            constant_grad_backward(lambda traj: 1.0))
        monkeypatch.setattr(train_mod, "evaluate",
                            scripted_evaluate([5.0, 4.0, 3.0]))
        lr, decay = 0.02, 0.5
        result = fit(family, DatasetSplit.from_family(family), config,
                     TrainConfig(learning_rate=lr, momentum=0.0, decay=decay,
                                 batch_size=10, max_epochs=2), params=params)
        # constant unit gradient: epoch t applies -lr/(1 + decay (t-1))
        step = lr / (1.0 + decay * 0.0) + lr / (1.0 + decay * 1.0)
        for key, arr in trainable_arrays(result.params).items():
            assert np.allclose(arr, init[key] - step, atol=1e-15)

    def test_momentum_accumulates(self, monkeypatch):
        family = make_family()
        config = small_run_config()
        params = recurrent_params(family, config)
        init = {k: v.copy() for k, v in trainable_arrays(params).items()}
        monkeypatch.setattr(train_mod, "backward",
                            constant_grad_backward(lambda traj: 1.0))
        monkeypatch.setattr(train_mod, "evaluate",
                            scripted_evaluate([5.0, 4.0, 3.0]))
        lr, mu = 0.02, 0.5
        result = fit(family, DatasetSplit.from_family(family), config,
                     TrainConfig(learning_rate=lr, momentum=mu, decay=0.0,
                                 batch_size=10, max_epochs=2), params=params)
        # v1 = -lr, v2 = -mu lr - lr, delta = v1 + v2
        delta = -lr + (-mu * lr - lr)
        for key, arr in trainable_arrays(result.params).items():
            assert np.allclose(arr, init[key] + delta, atol=1e-15)

    def test_zero_learning_rate_leaves_params_and_metrics_constant(self):
        family = make_family()
        config = small_run_config()
        params = recurrent_params(family, config)
        init = {k: v.copy() for k, v in trainable_arrays(params).items()}
        result = fit(family, DatasetSplit.from_family(family), config,
                     TrainConfig(learning_rate=0.0, momentum=0.9,
                                 max_epochs=3, patience=5), params=params)
        for key, arr in trainable_arrays(result.params).items():
            assert np.array_equal(arr, init[key])
        train_rows = [r for r in result.metrics if r["split"] == "train"]
        assert len(train_rows) == 4
        for row in train_rows[1:]:
            for col in ("mean_gap", "mean_infeas", "mean_maxviol",
                        "mean_loss"):
                assert row[col] == train_rows[0][col]
        assert result.best_epoch == 0

    def test_patience_stops_early(self):
        family = make_family()
        config = small_run_config()
        params = recurrent_params(family, config)
        result = fit(family, DatasetSplit.from_family(family), config,
                     TrainConfig(learning_rate=0.0, max_epochs=10,
                                 patience=2), params=params)
        # zero rate never improves validation, so exactly patience epochs run
        assert result.epochs_run == 2
        assert result.best_epoch == 0

    def test_best_validation_checkpoint_returned(self, monkeypatch):
        family = make_family()
        config = small_run_config()
        params = recurrent_params(family, config)
        init = {k: v.copy() for k, v in trainable_arrays(params).items()}
        monkeypatch.setattr(train_mod, "backward",
                            constant_grad_backward(lambda traj: 1.0))
        monkeypatch.setattr(train_mod, "evaluate",
                            scripted_evaluate([5.0, 3.0, 4.0, 4.5]))
        lr = 0.01
        result = fit(family, DatasetSplit.from_family(family), config,
                     TrainConfig(learning_rate=lr, momentum=0.0, decay=0.0,
                                 batch_size=10, max_epochs=3, patience=5),
                     params=params)
        assert result.best_epoch == 1
        assert result.epochs_run == 3
        # epoch 1 snapshot is exactly one unit-gradient step from the start
        for key, arr in trainable_arrays(result.params).items():
            assert np.allclose(arr, init[key] - lr, atol=1e-15)

    def test_nan_gradients_abort_after_three_batches(self, monkeypatch,
                                                     caplog):
        family = make_family()
        config = small_run_config()
        params = recurrent_params(family, config)
        monkeypatch.setattr(train_mod, "backward",
                            constant_grad_backward(lambda traj: np.nan))
        monkeypatch.setattr(train_mod, "evaluate",
                            scripted_evaluate([5.0] * 10))
        with caplog.at_level("WARNING", logger="cplopt.train"):
            with pytest.raises(TrainError, match="non-finite"):
                fit(family, DatasetSplit.from_family(family), config,
                    TrainConfig(learning_rate=0.1, batch_size=1,
                                max_epochs=4), params=params)
        warned = [r for r in caplog.records if "non-finite" in r.message]
        assert len(warned) == 3

    def test_nan_batch_skipped_and_rate_halved(self, monkeypatch):
        family = make_family()
        config = small_run_config()
        params = recurrent_params(family, config)
        init = {k: v.copy() for k, v in trainable_arrays(params).items()}
        state = {"calls": 0}

        def flaky(trajectory, policy, run_config):
            state["calls"] += 1
            value = np.nan if state["calls"] == 1 else 1.0
            return {key: np.full_like(arr, value)
                    for key, arr in trainable_arrays(policy).items()}
        monkeypatch.setattr(train_mod, "backward", flaky)
        monkeypatch.setattr(train_mod, "evaluate",
                            scripted_evaluate([5.0, 4.0]))
        lr = 0.08
        result = fit(family, DatasetSplit.from_family(family), config,
                     TrainConfig(learning_rate=lr, momentum=0.0, decay=0.0,
                                 batch_size=1, max_epochs=1), params=params)
        # batch 1 skipped and rate halved; batches 2 and 3 step at lr/2
        for key, arr in trainable_arrays(result.params).items():
            assert np.allclose(arr, init[key] - 2 * (lr / 2), atol=1e-15)

    def test_static_table_projected_nonnegative(self, monkeypatch):
        family = make_family()
        config = small_run_config()
        sizes = PolicySizes(n=family.n, m=family.m, rounds=1, heads=1,
                            p=2.0, mode="static")
        params = init_params(0, sizes)
        monkeypatch.setattr(train_mod, "backward",
                            constant_grad_backward(lambda traj: 1.0))
        monkeypatch.setattr(train_mod, "evaluate",
                            scripted_evaluate([5.0, 4.0]))
        lr = 0.05
        result = fit(family, DatasetSplit.from_family(family), config,
                     TrainConfig(learning_rate=lr, momentum=0.0, decay=0.0,
                                 batch_size=10, max_epochs=1), params=params)
        table = result.params.arrays["D_table"]
        assert np.all(table >= 0.0)
        # trivial-init zeros would go negative without the projection
        row = table[0, 0]
        m_hat_max = sizes.m_hat_max
        assert row[m_hat_max] == pytest.approx(1.0 - lr)
        assert row[2 * m_hat_max + 1] == pytest.approx(1.0 - lr)
        mask = np.ones(row.size, dtype=bool)
        mask[[m_hat_max, 2 * m_hat_max + 1]] = False
        assert np.all(row[mask] == 0.0)

    def test_rejects_empty_training_split(self):
        family = make_family()
        splits = DatasetSplit(training=[],
                              validation=[family.theta_samples[0]], test=[])
        with pytest.raises(ValueError, match="training split"):
            fit(family, splits, small_run_config(),
                TrainConfig(learning_rate=0.1))

    def test_caller_params_not_mutated(self, monkeypatch):
        family = make_family()
        config = small_run_config()
        params = recurrent_params(family, config)
        init = {k: v.copy() for k, v in trainable_arrays(params).items()}
        monkeypatch.setattr(train_mod, "backward",
                            constant_grad_backward(lambda traj: 1.0))
        monkeypatch.setattr(train_mod, "evaluate",
                            scripted_evaluate([5.0, 4.0]))
        fit(family, DatasetSplit.from_family(family), config,
            TrainConfig(learning_rate=0.1, max_epochs=1), params=params)
        for key, arr in trainable_arrays(params).items():
            assert np.array_equal(arr, init[key])


class TestFitPipeline:
    def test_reproducible_bit_for_bit(self):
        family = make_family()
        config = small_run_config()
        tc = TrainConfig(learning_rate=0.02, max_epochs=2, seed=3)
        splits = DatasetSplit.from_family(family)
        a = fit(family, splits, config, tc)
        b = fit(family, splits, config, tc)
        assert a.csv == b.csv
        for key, arr in trainable_arrays(a.params).items():
            assert np.array_equal(arr, trainable_arrays(b.params)[key])

    def test_default_init_and_metrics_shape(self):
        family = make_family()
        config = small_run_config()
        result = fit(family, DatasetSplit.from_family(family), config,
                     TrainConfig(learning_rate=0.02, max_epochs=2, seed=1))
        assert result.params.sizes.n == family.n
        assert result.params.sizes.rounds == config.rounds
        assert len(result.metrics) == 2 * (result.epochs_run + 1)
        assert result.csv.count("\n") == len(result.metrics) + 1
        for row in result.metrics:
            assert np.isfinite(row["mean_loss"])
            assert row["mean_gap"] is not None
