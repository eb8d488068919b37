"""CLI contract: exit codes, artifacts, overrides, determinism."""

import json
import math
import os

import pytest

from fedquant.cli import main
from fedquant.config import (DEFAULTS, apply_overrides, build_bit_configs,
                             load_config, validate_config)
from fedquant.errors import ConfigError
from fedquant.theory import BoundInputs, compute_bound

SMOKE = {
    "seed": 3,
    "data": {"num_classes": 3, "dim": 6, "samples_per_class": 20,
             "class_separation": 3.0, "alpha": 1.0},
    "model": {"hidden": [8]},
    "federation": {"total_rounds": 2, "num_clients": 4, "clients_per_round": 2,
                   "eta_s": 1.0, "eta_c": 0.05, "batch_size": 8,
                   "server_opt": "sgd", "eval_every": 1},
    "strategy": {"kind": "mqat", "bit_set": [2, 4, 32]},
    "eval": {"weight_bits": [32, 2]},
}


def write_config(tmp_path, doc=SMOKE, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


class TestConfigDocument:
    def test_defaults_fill_missing_sections(self):
        doc = validate_config({"seed": 9})
        assert doc["federation"]["total_rounds"] == \
            DEFAULTS["federation"]["total_rounds"]
        assert doc["seed"] == 9

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            validate_config({"tpyo": 1})
        with pytest.raises(ConfigError, match="federation.rounds"):
            validate_config({"federation": {"rounds": 5}})

    def test_overrides_parse_json_values(self):
        doc = apply_overrides({"seed": 0}, ["seed=4", "federation.eta_c=0.5",
                                            "strategy.bit_set=[2,8]"])
        assert doc["seed"] == 4
        assert doc["federation"]["eta_c"] == 0.5
        assert doc["strategy"]["bit_set"] == [2, 8]

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["no_equals_sign"])

    def test_env_seed_is_weaker_than_config(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FEDQUANT_SEED", "777")
        with_seed = load_config(write_config(tmp_path))
        assert with_seed["seed"] == 3
        unseeded = {k: v for k, v in SMOKE.items() if k != "seed"}
        no_seed = load_config(write_config(tmp_path, unseeded, "no_seed.json"))
        assert no_seed["seed"] == 777

    def test_eval_section_builds_configs(self):
        doc = validate_config({"eval": {"weight_bits": [8], "act_bits": [4],
                                        "wa_bits": [2]}})
        configs = build_bit_configs(doc)
        labels = [c.label() for c in configs]
        assert labels == ["W-8", "A-4", "WA-2/2"]


class TestRunCommand:
    def test_smoke_run_emits_artifacts(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg, "--out", out]) == 0
        for name in ("history.csv", "eval.csv", "eval.json", "checkpoint.json",
                     "run.json"):
            assert os.path.exists(os.path.join(out, name)), name
        stdout = capsys.readouterr().out
        assert "round 1/2" in stdout
        assert "eval mqat" in stdout
        meta = json.loads((tmp_path / "out" / "run.json").read_text())
        assert meta["config"]["seed"] == 3
        assert meta["rounds_completed"] == 2

    def test_missing_config_exits_2_and_names_path(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.json")
        assert main(["run", "--config", missing]) == 2
        assert missing in capsys.readouterr().err

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {**SMOKE, "bogus": True}, "bad.json")
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_seed_override_changes_outputs_and_repeats_bitwise(self, tmp_path):
        cfg = write_config(tmp_path)
        outs = {}
        for tag, args in (("a", []), ("b", ["--set", "seed=1"]),
                          ("b2", ["--set", "seed=1"])):
            out = str(tmp_path / tag)
            assert main(["run", "--config", cfg, "--out", out, "--quiet",
                         *args]) == 0
            outs[tag] = (tmp_path / tag / "history.csv").read_bytes()
        assert outs["a"] != outs["b"]
        assert outs["b"] == outs["b2"]

    def test_thread_count_is_invisible_in_artifacts(self, tmp_path):
        cfg = write_config(tmp_path)
        for tag, threads in (("t1", "1"), ("t4", "4")):
            out = str(tmp_path / tag)
            assert main(["run", "--config", cfg, "--out", out, "--quiet",
                         "--threads", threads]) == 0
        for name in ("history.csv", "eval.csv", "eval.json"):
            assert (tmp_path / "t1" / name).read_bytes() == \
                (tmp_path / "t4" / name).read_bytes(), name

    def test_divergent_run_exits_3(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "div")
        code = main(["run", "--config", cfg, "--out", out, "--quiet",
                     "--set", "federation.eta_c=1e300"])
        assert code == 3
        assert "diverged" in capsys.readouterr().err


class TestBoundCommand:
    FLAGS = ["--smoothness", "1", "--sigma-local", "1", "--sigma-global", "1",
             "--dim", "100", "--local-steps", "10", "--rounds", "1000",
             "--eta-server", "1"]

    def test_matches_library_call(self, capsys):
        code = main(["bound", *self.FLAGS, "--eta-client", "0.01",
                     "--method", "qat", "--step", "0.12",
                     "--initial-gap", "1"])
        assert code == 0
        got = json.loads(capsys.readouterr().out)
        want = compute_bound(BoundInputs(
            L=1.0, sigma_l=1.0, sigma_g=1.0, D=100, K=10, T=1000, eta_c=0.01,
            eta_s=1.0, method="qat", steps=(0.12,), initial_gap=1.0)).to_dict()
        assert got == want

    def test_condition_violation_exits_5_with_report(self, capsys):
        code = main(["bound", *self.FLAGS, "--eta-client", "0.02",
                     "--method", "qat", "--step", "0.12", "--initial-gap", "1"])
        assert code == 5
        got = json.loads(capsys.readouterr().out)
        assert got["conditions_ok"] is False
        assert got["bound"] is None

    def test_missing_inputs_exit_2(self, capsys):
        assert main(["bound", "--smoothness", "1"]) == 2
        assert "missing bound inputs" in capsys.readouterr().err

    def test_config_file_with_flag_overrides(self, tmp_path, capsys):
        doc = {"L": 1.0, "sigma_l": 1.0, "sigma_g": 1.0, "D": 100, "K": 10,
               "T": 1000, "eta_c": 0.01, "eta_s": 1.0, "method": "qat",
               "steps": [0.12], "initial_gap": 1.0}
        path = tmp_path / "bound.json"
        path.write_text(json.dumps(doc))
        assert main(["bound", "--config", str(path)]) == 0
        base = json.loads(capsys.readouterr().out)
        assert main(["bound", "--config", str(path), "--rounds", "100"]) == 0
        fewer_rounds = json.loads(capsys.readouterr().out)
        assert fewer_rounds["bound"] > base["bound"]

    def test_help_lists_units(self, capsys):
        with pytest.raises(SystemExit):
            main(["bound", "--help"])
        text = capsys.readouterr().out
        for flag in ("--smoothness", "--sigma-local", "--sigma-global", "--dim",
                     "--local-steps", "--rounds", "--eta-client", "--eta-server",
                     "--method", "--step", "--initial-gap"):
            assert flag in text
        assert "units" in text


class TestPartitionStats:
    def test_counts_sum_to_train_size(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["partition-stats", "--config", cfg]) == 0
        stats = json.loads(capsys.readouterr().out)
        # 3 classes * 20 samples/class, minus the 20% holdout stride
        assert stats["total_samples"] == 3 * 16
        assert sum(stats["client_sizes"]) == stats["total_samples"]

    def test_single_client_entropy_equals_global(self, tmp_path, capsys):
        doc = json.loads(json.dumps(SMOKE))
        doc["federation"]["num_clients"] = 1
        doc["federation"]["clients_per_round"] = 1
        cfg = write_config(tmp_path, doc, "single.json")
        assert main(["partition-stats", "--config", cfg]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert abs(stats["mean_entropy"] - math.log(3)) < 1e-9

    def test_alpha_orders_mean_entropy(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        means = {}
        for alpha in ("0.1", "1e6"):
            assert main(["partition-stats", "--config", cfg,
                         "--set", f"data.alpha={alpha}"]) == 0
            means[alpha] = json.loads(capsys.readouterr().out)["mean_entropy"]
        assert means["1e6"] > means["0.1"]


class TestEvalCommand:
    def test_resweep_matches_original_report(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg, "--out", out, "--quiet"]) == 0
        capsys.readouterr()
        ckpt = os.path.join(out, "checkpoint.json")
        assert main(["eval", "--checkpoint", ckpt]) == 0
        resweep = json.loads(capsys.readouterr().out)
        original = json.loads((tmp_path / "out" / "eval.json").read_text())
        assert resweep["rows"] == original["rows"]

    def test_eval_writes_artifacts_when_out_given(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg, "--out", out, "--quiet"]) == 0
        eval_out = str(tmp_path / "eval_out")
        assert main(["eval", "--checkpoint", os.path.join(out, "checkpoint.json"),
                     "--out", eval_out]) == 0
        assert os.path.exists(os.path.join(eval_out, "eval.csv"))
        assert os.path.exists(os.path.join(eval_out, "eval.json"))
