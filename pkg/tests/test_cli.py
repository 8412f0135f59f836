"""End-to-end tests for the command-line interface."""

import json

import numpy as np
import pytest

from cplopt.cli import main
from cplopt.model import ParametricFamily, load_family, save_family
from cplopt.policy import load_policy

A_TOY = np.array([[2.0, 2.0], [1.0, 0.0], [0.0, 1.0]])
B_TOY = np.array([3.0, 1.0, 1.0])


def toy_family_file(tmp_path, n_samples=6):
    rng = np.random.default_rng(7)
    thetas = [np.array([-1.0, -1.0]) + rng.uniform(-0.15, 0.15, size=2)
              for _ in range(n_samples)]
    splits = (["train"] * 3 + ["validation"] * 2
              + ["test"] * (n_samples - 5))
    fam = ParametricFamily(A=A_TOY, b=B_TOY, c=np.array([-1.0, -1.0]),
                           integer_indices=[0, 1],
                           theta_map={"mode": "replace_c"},
                           theta_samples=thetas, splits=splits,
                           name="toyfam")
    path = tmp_path / "toy.json"
    save_family(fam, str(path))
    return path


def matching_family_file(tmp_path):
    assert main(["generate", "--family", "matching", "--nodes", "6",
                 "--edges", "10", "--counts", "6", "2", "2", "--seed", "5",
                 "--out", str(tmp_path / "gen")]) == 0
    return tmp_path / "gen" / "family.json"


class TestUsageErrors:
    def test_no_command(self):
        assert main([]) == 1

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert main(["generate", "--family", "matching"]) == 1

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "generate" in capsys.readouterr().out

    def test_missing_family_file(self, tmp_path, capsys):
        code = main(["baseline", "--family", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")])
        assert code == 1
        assert "not found" in capsys.readouterr().err

    def test_malformed_family_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"format": "wrong"}')
        code = main(["baseline", "--family", str(bad),
                     "--out", str(tmp_path / "o")])
        assert code == 1
        assert "family format" in capsys.readouterr().err

    def test_malformed_checkpoint(self, tmp_path, capsys):
        fam = toy_family_file(tmp_path)
        ckpt = tmp_path / "ckpt.json"
        ckpt.write_text('{"format": "wrong"}')
        code = main(["evaluate", "--family", str(fam),
                     "--checkpoint", str(ckpt),
                     "--out", str(tmp_path / "o")])
        assert code == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_jobs_must_be_positive(self, tmp_path):
        fam = toy_family_file(tmp_path)
        assert main(["baseline", "--family", str(fam), "--jobs", "0",
                     "--out", str(tmp_path / "o")]) == 1

    def test_theta_index_out_of_range(self, tmp_path, capsys):
        fam = toy_family_file(tmp_path)
        code = main(["solve", "--family", str(fam), "--theta-index", "99",
                     "--out", str(tmp_path / "o")])
        assert code == 1
        assert "theta-index" in capsys.readouterr().err

    def test_policy_mode_needs_checkpoint(self, tmp_path, capsys):
        fam = toy_family_file(tmp_path)
        code = main(["solve", "--family", str(fam), "--mode", "policy",
                     "--out", str(tmp_path / "o")])
        assert code == 1
        assert "checkpoint" in capsys.readouterr().err


class TestGenerate:
    def test_matching_family(self, tmp_path):
        out = tmp_path / "gen"
        assert main(["generate", "--family", "matching", "--nodes", "6",
                     "--edges", "10", "--counts", "4", "2", "2",
                     "--seed", "3", "--out", str(out)]) == 0
        fam = load_family(str(out / "family.json"))
        assert fam.name == "matching"
        assert len(fam.theta_samples) == 8
        assert fam.config["nodes"] == 6

    def test_control_family(self, tmp_path):
        out = tmp_path / "gen"
        assert main(["generate", "--family", "control", "--horizon", "2",
                     "--counts", "3", "1", "1", "--out", str(out)]) == 0
        fam = load_family(str(out / "family.json"))
        assert fam.name == "control"
        assert fam.A.shape == (26, 8)

    def test_default_counts_follow_family(self, tmp_path):
        out = tmp_path / "gen"
        assert main(["generate", "--family", "matching", "--nodes", "6",
                     "--edges", "10", "--seed", "5", "--out", str(out)]) == 0
        fam = load_family(str(out / "family.json"))
        assert len(fam.theta_samples) == 70
        assert len(fam.indices("train")) == 40

    def test_manifest_reconstructs_the_run(self, tmp_path):
        out = tmp_path / "gen"
        assert main(["generate", "--family", "matching", "--nodes", "6",
                     "--edges", "10", "--counts", "4", "2", "2",
                     "--seed", "3", "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["format"] == "cplopt-manifest-v1"
        assert manifest["command"] == "generate"
        assert manifest["outputs"] == {"family": "family.json"}
        rerun = manifest["rerun"]
        rerun[rerun.index("--out") + 1] = str(tmp_path / "gen2")
        assert main(rerun) == 0
        first = (out / "family.json").read_bytes()
        second = (tmp_path / "gen2" / "family.json").read_bytes()
        assert first == second

    def test_manifest_carries_no_timestamps(self, tmp_path):
        out = tmp_path / "gen"
        main(["generate", "--family", "matching", "--nodes", "6",
              "--edges", "10", "--counts", "4", "2", "2", "--out", str(out)])
        manifest = json.loads((out / "manifest.json").read_text())

        def keys_of(obj):
            if isinstance(obj, dict):
                for k, v in obj.items():
                    yield k.lower()
                    yield from keys_of(v)

        for key in keys_of(manifest):
            for word in ("time", "date", "clock"):
                assert word not in key


class TestBaselineAndEvaluate:
    def test_baseline_writes_metrics(self, tmp_path, capsys):
        fam = toy_family_file(tmp_path)
        out = tmp_path / "base"
        assert main(["baseline", "--family", str(fam), "--split", "all",
                     "--rounds", "2", "--out", str(out)]) == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == ("split,count,missing,mean_gap,mean_infeas,"
                            "mean_maxviol,mean_loss")
        assert len(lines) == 4
        assert lines[1].startswith("train,3,0,")
        assert "mean gap" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, tmp_path):
        fam = toy_family_file(tmp_path)
        out = tmp_path / "b1"
        assert main(["baseline", "--family", str(fam), "--split", "train",
                     "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        rerun = manifest["rerun"]
        rerun[rerun.index("--out") + 1] = str(tmp_path / "b2")
        assert main(rerun) == 0
        assert ((out / "metrics.csv").read_bytes()
                == (tmp_path / "b2" / "metrics.csv").read_bytes())

    def test_train_then_evaluate(self, tmp_path):
        fam = toy_family_file(tmp_path)
        out = tmp_path / "run"
        assert main(["train", "--family", str(fam), "--rounds", "1",
                     "--hidden", "3", "--lr", "0.05", "--max-epochs", "2",
                     "--patience", "2", "--out", str(out)]) == 0
        params = load_policy(out / "checkpoint.json")
        assert params.sizes.hidden == 3
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == ("epoch,split,mean_gap,mean_infeas,mean_maxviol,"
                            "mean_loss")
        assert lines[1].startswith("0,train,")
        ev = tmp_path / "ev"
        assert main(["evaluate", "--family", str(fam),
                     "--checkpoint", str(out / "checkpoint.json"),
                     "--split", "validation", "--rounds", "1",
                     "--out", str(ev)]) == 0
        assert (ev / "metrics.csv").exists()
        manifest = json.loads((ev / "manifest.json").read_text())
        assert manifest["csv_schemas"]["metrics.csv"][0] == "split"

    def test_static_mode_training(self, tmp_path):
        fam = toy_family_file(tmp_path)
        out = tmp_path / "run"
        assert main(["train", "--family", str(fam), "--rounds", "1",
                     "--policy-mode", "static", "--lr", "0.1",
                     "--max-epochs", "1", "--out", str(out)]) == 0
        assert load_policy(out / "checkpoint.json").mode == "static"


class TestSolve:
    def test_baseline_trajectory_and_quality_line(self, tmp_path, capsys):
        fam = matching_family_file(tmp_path)
        out = tmp_path / "solve"
        assert main(["solve", "--family", str(fam), "--theta-index", "2",
                     "--mode", "baseline", "--rounds", "2", "--heads", "1",
                     "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "Gap " in printed and "MaxViol" in printed
        traj = json.loads((out / "trajectory.json").read_text())
        assert traj["format"] == "cplopt-traj-v1"
        assert len(traj["states"]) == 3


class TestGradcheck:
    def test_report_written_and_passes(self, tmp_path, capsys):
        fam = matching_family_file(tmp_path)
        out = tmp_path / "gc"
        assert main(["gradcheck", "--family", str(fam), "--theta-index",
                     "2", "--rounds", "1", "--heads", "1",
                     "--out", str(out)]) == 0
        report = json.loads((out / "gradcheck.json").read_text())
        assert report["passed"] is True
        assert 0.0 <= report["fraction_ok"] <= 1.0
        assert "PASS" in capsys.readouterr().out
