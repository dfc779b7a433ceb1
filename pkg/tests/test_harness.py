import json

import numpy as np
import pytest

from ndadam.cli import EXIT_CONFIG, EXIT_NAN, EXIT_OK, main
from ndadam.harness import (
    ConfigError,
    ExperimentConfig,
    NanLossError,
    OUTPUT_DIR_ENV,
    compare,
    distinct_logits,
    probe_softmax,
    run,
)


def small_config(tmp_path, **overrides):
    base = {
        "dataset": {
            "kind": "blobs",
            "num_classes": 4,
            "samples_per_class": 30,
            "feature_dim": 8,
            "spread": 1.0,
            "test_fraction": 0.25,
        },
        "model": {"hidden_widths": [16, 16], "activation": "relu", "use_batch_norm": True},
        "optimizer": {"kind": "nd_adam", "alpha0_vector": 0.05, "alpha0_scalar": 0.001},
        "schedule": {"kind": "cosine", "epochs": 3, "batch_size": 16},
        "diagnostics": {"stride": 5},
        "seed": 0,
        "output_dir": str(tmp_path / "run"),
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return base


class TestConfigValidation:
    def test_unknown_top_level_key(self, tmp_path):
        data = small_config(tmp_path)
        data["optimiser"] = {}
        with pytest.raises(ConfigError, match="unknown keys.*optimiser"):
            ExperimentConfig.from_dict(data)

    def test_unknown_nested_key(self, tmp_path):
        data = small_config(tmp_path, model={"hiden_widths": [8]})
        with pytest.raises(ConfigError, match="hiden_widths"):
            ExperimentConfig.from_dict(data)

    def test_optimizer_key_must_match_kind(self, tmp_path):
        data = small_config(tmp_path, optimizer={"kind": "adam", "alpha0": 0.001, "momentum": 0.5})
        with pytest.raises(ConfigError, match="momentum.*adam"):
            ExperimentConfig.from_dict(data)

    def test_sgd_requires_alpha0(self, tmp_path):
        data = small_config(tmp_path)
        data["optimizer"] = {"kind": "sgd"}
        with pytest.raises(ConfigError, match="alpha0"):
            ExperimentConfig.from_dict(data)

    def test_rates_must_be_positive(self, tmp_path):
        data = small_config(tmp_path, optimizer={"alpha0_vector": -0.05})
        with pytest.raises(ConfigError, match="positive"):
            ExperimentConfig.from_dict(data)

    def test_epochs_minimum(self, tmp_path):
        data = small_config(tmp_path, schedule={"epochs": 0})
        with pytest.raises(ConfigError, match="epochs"):
            ExperimentConfig.from_dict(data)

    def test_bad_head_rejected(self, tmp_path):
        data = small_config(tmp_path, model={"head": "argmax"})
        with pytest.raises(ConfigError, match="head"):
            ExperimentConfig.from_dict(data)

    def test_invalid_json_reported(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            ExperimentConfig.from_json(path)

    def test_echo_round_trips_through_strict_parser(self, tmp_path):
        data = small_config(tmp_path, optimizer={"kind": "sgd", "alpha0": 0.1,
                                                 "momentum": 0.9, "weight_decay": 0.001})
        del data["optimizer"]["alpha0_vector"]
        del data["optimizer"]["alpha0_scalar"]
        config = ExperimentConfig.from_dict(data)
        echoed = ExperimentConfig.from_dict(config.to_dict())
        assert echoed.to_dict() == config.to_dict()


class TestRun:
    def test_outputs_written(self, tmp_path):
        config = ExperimentConfig.from_dict(small_config(tmp_path))
        log = run(config)
        for name in ("metrics.csv", "diagnostics.csv", "summary.json",
                     "config_echo.json", "checkpoint.json"):
            assert (log.output_dir / name).exists()
        summary = json.loads(log.summary_path.read_text())
        assert summary["final_test_accuracy"] == log.final.test_accuracy
        assert len(summary["epoch_wall_times"]) == 3

    def test_byte_identical_metrics_and_diagnostics(self, tmp_path):
        c1 = ExperimentConfig.from_dict(small_config(tmp_path, output_dir=str(tmp_path / "a")))
        c2 = ExperimentConfig.from_dict(small_config(tmp_path, output_dir=str(tmp_path / "b")))
        l1, l2 = run(c1), run(c2)
        assert l1.metrics_path.read_bytes() == l2.metrics_path.read_bytes()
        assert l1.diagnostics_path.read_bytes() == l2.diagnostics_path.read_bytes()

    def test_seed_changes_results(self, tmp_path):
        c1 = ExperimentConfig.from_dict(small_config(tmp_path, output_dir=str(tmp_path / "a")))
        c2 = ExperimentConfig.from_dict(small_config(tmp_path, seed=1, output_dir=str(tmp_path / "b")))
        l1, l2 = run(c1), run(c2)
        assert l1.metrics_path.read_bytes() != l2.metrics_path.read_bytes()

    def test_run_reproducible_from_echo(self, tmp_path):
        config = ExperimentConfig.from_dict(small_config(tmp_path, output_dir=str(tmp_path / "a")))
        log = run(config)
        echoed = ExperimentConfig.from_json(log.output_dir / "config_echo.json")
        echoed.output_dir = str(tmp_path / "b")
        log2 = run(echoed)
        assert log.metrics_path.read_bytes() == log2.metrics_path.read_bytes()

    def test_env_var_overrides_output_dir(self, tmp_path, monkeypatch):
        target = tmp_path / "env_override"
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(target))
        config = ExperimentConfig.from_dict(small_config(tmp_path))
        log = run(config)
        assert log.output_dir == target
        assert (target / "metrics.csv").exists()

    def test_nan_abort_names_step(self, tmp_path):
        data = small_config(
            tmp_path,
            model={"use_batch_norm": False},
            optimizer={"kind": "sgd", "alpha0": 1e12, "momentum": 0.0, "weight_decay": 0.0},
            schedule={"kind": "constant", "epochs": 4, "batch_size": 16},
        )
        del data["optimizer"]["alpha0_vector"]
        del data["optimizer"]["alpha0_scalar"]
        config = ExperimentConfig.from_dict(data)
        with pytest.raises(NanLossError, match=r"step \d+"):
            run(config)

    def test_unit_norm_columns_after_training(self, tmp_path):
        config = ExperimentConfig.from_dict(small_config(tmp_path))
        log = run(config)
        checkpoint = json.loads((log.output_dir / "checkpoint.json").read_text())
        for name, values in checkpoint["model"]["params"].items():
            if name.endswith(".weights"):
                w = np.asarray(values)
                assert np.max(np.abs(np.linalg.norm(w, axis=0) - 1.0)) < 1e-9

    def test_sgd_run_records_projection_ratio(self, tmp_path):
        data = small_config(
            tmp_path,
            optimizer={"kind": "sgd", "alpha0": 0.1, "momentum": 0.9, "weight_decay": 0.001},
            diagnostics={"stride": 2},
        )
        del data["optimizer"]["alpha0_vector"]
        del data["optimizer"]["alpha0_scalar"]
        log = run(ExperimentConfig.from_dict(data))
        rows = log.diagnostics_path.read_text().strip().splitlines()
        assert rows[0] == "step,layer_id,rel_update,proj_ratio,l_par_norm,l_perp_norm"
        assert len(rows) > 1
        # SGD with decay produces finite projection ratios
        some_ratio = rows[1].split(",")[3]
        assert some_ratio != "nan"

    def test_diagnostics_layer_selection(self, tmp_path):
        data = small_config(tmp_path, diagnostics={"layers": ["dense1"], "stride": 2})
        log = run(ExperimentConfig.from_dict(data))
        rows = log.diagnostics_path.read_text().strip().splitlines()[1:]
        assert rows
        assert all(r.split(",")[1] == "dense1" for r in rows)


class TestCompare:
    def _configs(self, tmp_path):
        shared = dict(
            dataset={"kind": "blobs", "num_classes": 3, "samples_per_class": 20,
                     "feature_dim": 6, "spread": 1.0, "test_fraction": 0.25},
            model={"hidden_widths": [8]},
            schedule={"kind": "cosine", "epochs": 2, "batch_size": 10},
            diagnostics={"stride": 100},
            output_dir=str(tmp_path / "cmp"),
        )
        a = ExperimentConfig.from_dict({**shared, "optimizer": {"kind": "nd_adam", "alpha0_vector": 0.05, "alpha0_scalar": 0.001}})
        b = ExperimentConfig.from_dict({**shared, "optimizer": {"kind": "sgd", "alpha0": 0.1, "momentum": 0.9, "weight_decay": 0.001}})
        return a, b

    def test_rows_keep_config_order(self, tmp_path):
        a, b = self._configs(tmp_path)
        result = compare([a, b], seeds=[0, 1], output_dir=tmp_path / "cmp")
        assert [r["label"] for r in result["rows"]] == ["nd_adam", "sgd"]
        assert len(result["rows"][0]["train_losses"]) == 2
        assert (tmp_path / "cmp" / "comparison.json").exists()

    def test_model_mismatch_rejected_without_flag(self, tmp_path):
        a, b = self._configs(tmp_path)
        b.model.hidden_widths = [8, 8]
        with pytest.raises(ConfigError, match="override"):
            compare([a, b], seeds=[0], output_dir=tmp_path / "cmp")
        compare([a, b], seeds=[0], allow_model_mismatch=True, output_dir=tmp_path / "cmp2")

    def test_head_difference_allowed(self, tmp_path):
        a, b = self._configs(tmp_path)
        b.optimizer = a.optimizer
        b.model.head = "bn_softmax"
        b.model.head_gamma = 2.5
        result = compare([a, b], seeds=[0], output_dir=tmp_path / "cmp")
        assert result["rows"][1]["label"] == "nd_adam+bn_softmax(gamma=2.5)"

    def test_needs_configs_and_seeds(self, tmp_path):
        a, _ = self._configs(tmp_path)
        with pytest.raises(ConfigError):
            compare([], seeds=[0])
        with pytest.raises(ConfigError):
            compare([a], seeds=[])


class TestProbe:
    def test_default_sweep_row_count(self):
        rows = probe_softmax(num_classes=10, seed=0)
        assert len(rows) == 5 * 9

    def test_small_eta_uniform_ratios(self):
        rows = [r for r in probe_softmax(num_classes=10, seed=0) if r[0] == 1e-4]
        for _, _, ratio in rows:
            assert ratio == pytest.approx(1.0 / 9.0, abs=1e-3)

    def test_large_eta_winner_take_all(self):
        rows = [r for r in probe_softmax(num_classes=10, seed=0) if r[0] == 1e3]
        ratios = sorted(r[2] for r in rows)
        assert ratios[-1] == pytest.approx(1.0, abs=1e-6)
        assert all(r <= 1e-6 for r in ratios[:-1])

    def test_distinct_logits_have_gaps(self):
        for seed in range(5):
            z = distinct_logits(10, seed)
            gaps = np.diff(np.sort(z))
            assert gaps.min() > 0.05

    def test_csv_output(self, tmp_path):
        path = tmp_path / "probe.csv"
        probe_softmax(num_classes=3, etas=[1.0], seed=0, output_path=path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "eta,class,ratio"
        assert len(lines) == 3

    def test_validation(self):
        with pytest.raises(ConfigError):
            probe_softmax(num_classes=1)
        with pytest.raises(ConfigError):
            probe_softmax(num_classes=5, etas=[-1.0])
        with pytest.raises(ConfigError):
            probe_softmax(num_classes=5, target=7)


class TestCli:
    def test_run_command(self, tmp_path, capsys):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(small_config(tmp_path)))
        assert main(["run", "--config", str(path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "final train loss" in out

    def test_config_error_exit_code(self, tmp_path, capsys):
        path = tmp_path / "config.json"
        data = small_config(tmp_path)
        data["typo_key"] = 1
        path.write_text(json.dumps(data))
        assert main(["run", "--config", str(path)]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_nan_exit_code(self, tmp_path, capsys):
        data = small_config(
            tmp_path,
            model={"use_batch_norm": False},
            optimizer={"kind": "sgd", "alpha0": 1e12, "momentum": 0.0, "weight_decay": 0.0},
            schedule={"kind": "constant", "epochs": 4, "batch_size": 16},
        )
        del data["optimizer"]["alpha0_vector"]
        del data["optimizer"]["alpha0_scalar"]
        path = tmp_path / "config.json"
        path.write_text(json.dumps(data))
        assert main(["run", "--config", str(path)]) == EXIT_NAN
        assert "aborted" in capsys.readouterr().err

    def test_compare_command(self, tmp_path, capsys):
        shared = dict(
            dataset={"kind": "blobs", "num_classes": 3, "samples_per_class": 20,
                     "feature_dim": 6, "spread": 1.0, "test_fraction": 0.25},
            model={"hidden_widths": [8]},
            schedule={"kind": "cosine", "epochs": 2, "batch_size": 10},
            diagnostics={"stride": 100},
        )
        payload = {
            "output_dir": str(tmp_path / "cmp"),
            "experiments": [
                {**shared, "optimizer": {"kind": "adam", "alpha0": 0.001}},
                {**shared, "optimizer": {"kind": "sgd", "alpha0": 0.1, "momentum": 0.9,
                                         "weight_decay": 0.001}},
            ],
        }
        path = tmp_path / "compare.json"
        path.write_text(json.dumps(payload))
        assert main(["compare", "--config", str(path), "--seeds", "0,1"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "adam" in out and "sgd" in out

    def test_probe_command(self, tmp_path, capsys):
        out_path = tmp_path / "probe.csv"
        code = main([
            "probe-softmax", "--classes", "10", "--etas", "1e-4,1e3",
            "--output", str(out_path),
        ])
        assert code == EXIT_OK
        assert out_path.exists()

    def test_probe_prints_without_output(self, capsys):
        assert main(["probe-softmax", "--classes", "3", "--etas", "1.0"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.startswith("eta,class,ratio")

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
