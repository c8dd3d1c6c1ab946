"""Command line contract: exit codes, JSON output, config precedence."""

import json

import numpy as np
import pytest

from ictsp.cli import main
from ictsp.data import load_csv, write_csv
from ictsp.experiments import NoiseSpec, load_source
from ictsp.model import count_parameters_formula, ModelConfig
from ictsp.retrieval import RetrievalConfig


TINY_MODEL = {"variant": "ictsp", "n_layers": 1, "d_model": 8, "n_heads": 2,
              "dropout": 0.0, "input_len": 24, "lookback": 8, "horizon": 4,
              "stride": 4,
              "retrieval": {"latent_dim": 3, "keep_fraction": 0.5,
                            "n_merged": 2},
              "c_max": 8, "dtype": "float64"}
TINY_TRAIN = {"batch_size": 2, "lr_peak": 1e-3, "lr_warmup_steps": 2,
              "max_steps": 10, "eval_interval": 5, "patience": 10,
              "seed": 3, "val_stride": 8}


@pytest.fixture()
def tiny_csv(tmp_path):
    frame = load_source(NoiseSpec(400, 2, 0), split=False)
    path = tmp_path / "tiny.csv"
    write_csv(frame, path)
    return path


@pytest.fixture()
def tiny_config(tmp_path, tiny_csv):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "model": TINY_MODEL, "train": TINY_TRAIN, "eval_stride": 16,
    }))
    return path


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def _json_err(capsys):
    captured = capsys.readouterr()
    return json.loads(captured.err.strip().splitlines()[-1])


class TestCount:
    def test_defaults(self, capsys):
        assert main(["count"]) == 0
        payload = _json_out(capsys)
        assert payload["preset"] == "multi-small"
        assert payload["n_params"] > 0
        assert payload["tokens_per_forward"] == \
            payload["context_tokens_post"] + payload["n_channels"]

    def test_matches_formula(self, capsys, tiny_config):
        assert main(["count", "--preset", "noise-small", "--config",
                     str(tiny_config), "--channels", "5"]) == 0
        payload = _json_out(capsys)
        cfg = ModelConfig(**{**TINY_MODEL,
                             "retrieval": RetrievalConfig(
                                 **TINY_MODEL["retrieval"])})
        assert payload["n_params"] == count_parameters_formula(cfg)
        assert payload["n_channels"] == 5

    def test_unknown_preset_rejected_by_parser(self):
        with pytest.raises(SystemExit) as exc:
            main(["count", "--preset", "zzz"])
        assert exc.value.code == 2


class TestGenerateData:
    def test_writes_csv(self, tmp_path, capsys):
        out = tmp_path / "gen" / "noise.csv"
        assert main(["generate-data", "--preset", "noise-small",
                     "--out", str(out)]) == 0
        payload = _json_out(capsys)
        assert payload["written"] == str(out)
        frame = load_csv(out)
        assert frame.n_channels == payload["n_channels"] == 8
        assert frame.n_steps == 20000

    def test_seed_changes_the_data(self, tmp_path, capsys):
        a, b, c = (tmp_path / n for n in ("a.csv", "b.csv", "c.csv"))
        main(["generate-data", "--preset", "noise-small", "--out", str(a),
              "--seed", "1"])
        main(["generate-data", "--preset", "noise-small", "--out", str(b),
              "--seed", "2"])
        main(["generate-data", "--preset", "noise-small", "--out", str(c),
              "--seed", "1"])
        va, vb, vc = (load_csv(p).values for p in (a, b, c))
        assert not np.array_equal(va, vb)
        np.testing.assert_array_equal(va, vc)


class TestTrain:
    def test_config_file_run(self, tmp_path, tiny_config, capsys):
        out = tmp_path / "run"
        code = main(["train", "--preset", "noise-small", "--config",
                     str(tiny_config), "--out", str(out)])
        assert code == 0
        rows = _json_out(capsys)
        assert len(rows) == 1
        assert rows[0]["steps_run"] == 10
        assert np.isfinite(rows[0]["mse"])
        assert (out / "results.json").exists()

    def test_flag_overrides_config_file(self, tmp_path, tiny_config, capsys):
        out = tmp_path / "run"
        main(["train", "--preset", "noise-small", "--config",
              str(tiny_config), "--out", str(out), "--max-steps", "4"])
        rows = _json_out(capsys)
        assert rows[0]["steps_run"] == 4
        assert rows[0]["config"]["train"]["max_steps"] == 4

    def test_few5_insufficient_data_exit_code(self, tmp_path, tiny_config,
                                              capsys):
        config = json.loads(tiny_config.read_text())
        # 5% of the 14000-step train slice is 700, below 650 + 96
        config["model"] = {**TINY_MODEL, "input_len": 650, "lookback": 256,
                           "horizon": 96, "stride": 8}
        tiny_config.write_text(json.dumps(config))
        code = main(["train", "--preset", "noise-small", "--config",
                     str(tiny_config), "--out", str(tmp_path / "x"),
                     "--protocol", "few5"])
        assert code == 1
        err = _json_err(capsys)
        assert err["error"] == "ExperimentError"
        assert err["reason"] == "insufficient-train-data"

    def test_bad_horizons_string(self, tmp_path, tiny_config, capsys):
        code = main(["train", "--preset", "noise-small", "--config",
                     str(tiny_config), "--out", str(tmp_path / "x"),
                     "--horizons", "4,banana"])
        assert code == 1
        assert "horizon" in _json_err(capsys)["message"]

    def test_config_must_be_object(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("[1, 2]")
        code = main(["train", "--config", str(bad)])
        assert code == 1
        assert "object" in _json_err(capsys)["message"]


class TestEvaluate:
    def test_checkpoint_roundtrip(self, tmp_path, tiny_config, tiny_csv,
                                  capsys):
        out = tmp_path / "run"
        main(["train", "--preset", "noise-small", "--config",
              str(tiny_config), "--out", str(out)])
        rows = _json_out(capsys)
        checkpoint = out / "checkpoint_noise-small_ictsp_full_h4.npz"
        assert checkpoint.exists()
        code = main(["evaluate", "--checkpoint", str(checkpoint),
                     "--data", "noise-small", "--eval-stride", "16"])
        assert code == 0
        payload = _json_out(capsys)
        assert payload["split"] == "test"
        assert np.isfinite(payload["mse"])

    def test_csv_data_source(self, tmp_path, tiny_config, tiny_csv, capsys):
        out = tmp_path / "run"
        main(["train", "--preset", "noise-small", "--config",
              str(tiny_config), "--out", str(out)])
        capsys.readouterr()
        checkpoint = out / "checkpoint_noise-small_ictsp_full_h4.npz"
        code = main(["evaluate", "--checkpoint", str(checkpoint),
                     "--data", str(tiny_csv), "--eval-stride", "32",
                     "--split", "val"])
        assert code == 0
        assert _json_out(capsys)["split"] == "val"

    def test_missing_checkpoint_flag(self, capsys):
        assert main(["evaluate", "--data", "noise-small"]) == 1
        assert "checkpoint" in _json_err(capsys)["message"]

    def test_nonexistent_checkpoint_file(self, tmp_path, capsys):
        code = main(["evaluate", "--checkpoint",
                     str(tmp_path / "missing.npz"),
                     "--data", "noise-small"])
        assert code == 1
        assert _json_err(capsys)["error"] in ("FileNotFoundError", "OSError")


class TestAblate:
    def test_subset_settings(self, tmp_path, tiny_config, capsys):
        out = tmp_path / "ab"
        code = main(["ablate", "--preset", "noise-small", "--config",
                     str(tiny_config), "--out", str(out),
                     "--settings", "full,wo_context"])
        assert code == 0
        payload = _json_out(capsys)
        assert set(payload) == {"full", "wo_context"}
        assert (out / "ablation.csv").exists()
        table = (out / "ablation.csv").read_text().splitlines()
        assert table[0].startswith("dataset,horizon,full_mse")


class TestCompare:
    def test_tiny_comparison(self, tmp_path, tiny_csv, capsys):
        config = tmp_path / "cmp.json"
        config.write_text(json.dumps({
            "model": TINY_MODEL, "train": TINY_TRAIN,
            "datasets": {"tiny": str(tiny_csv)},
            "eval_stride": 32, "curve_stride": 64,
        }))
        out = tmp_path / "cmp"
        code = main(["compare-architectures", "--config", str(config),
                     "--out", str(out)])
        assert code == 0
        rows = _json_out(capsys)
        assert {r["variant"] for r in rows} == {"ictsp", "series_wise",
                                                "temporal_wise"}
        assert (out / "curves.csv").exists()
        assert (out / "forecasts_tiny.csv").exists()


class TestExportAttention:
    def test_export_from_checkpoint(self, tmp_path, tiny_config, capsys):
        out = tmp_path / "run"
        main(["train", "--preset", "noise-small", "--config",
              str(tiny_config), "--out", str(out)])
        capsys.readouterr()
        checkpoint = out / "checkpoint_noise-small_ictsp_full_h4.npz"
        prefix = tmp_path / "maps" / "attn"
        with pytest.warns(UserWarning, match="merged"):
            code = main(["export-attention", "--checkpoint", str(checkpoint),
                         "--data", "noise-small", "--out", str(prefix)])
        assert code == 0
        payload = _json_out(capsys)
        assert len(payload["written"]) == 1
        assert (tmp_path / "maps" / "attn_layer0.csv").exists()

    def test_requires_data(self, tmp_path, capsys):
        assert main(["export-attention", "--checkpoint",
                     str(tmp_path / "x.npz")]) == 1
        assert "data" in _json_err(capsys)["message"]
