"""Experiment runner: sources, protocols, ablations, comparison, presets."""

import dataclasses
import json

import numpy as np
import pytest

from ictsp.data import MultiSpec, SeriesFrame, gen_channels_independent, write_csv
from ictsp.errors import ConfigError, ExperimentError
from ictsp.experiments import (ABLATION_SETTINGS, COMPARISON_VARIANTS,
                               ComparisonSpec, NoiseSpec, Preset, RunSpec,
                               ablation_config, context_token_counts,
                               export_attention_run, get_preset, load_source,
                               make_comparison_spec, make_run_spec,
                               preset_names, resolve_source,
                               run_ablation, run_architecture_comparison,
                               run_experiment, source_descriptor,
                               source_label, variant_config,
                               variant_train_config)
from ictsp.model import ICTSPModel, ModelConfig, count_parameters
from ictsp.retrieval import RetrievalConfig, retrieval_count
from ictsp.tokenizer import KIND_TARGET, n_context_per_series
from ictsp.training import TrainConfig


def _tiny_model(**over):
    base = dict(variant="ictsp", n_layers=1, d_model=8, n_heads=2,
                dropout=0.0, input_len=24, lookback=8, horizon=4, stride=4,
                retrieval=RetrievalConfig(latent_dim=3, keep_fraction=0.5,
                                          n_merged=2),
                c_max=8, dtype="float64")
    base.update(over)
    return ModelConfig(**base)


def _tiny_train(**over):
    base = dict(batch_size=2, lr_peak=1e-3, lr_warmup_steps=2, max_steps=10,
                eval_interval=5, patience=10, seed=3, val_stride=8)
    base.update(over)
    return TrainConfig(**base)


def _tiny_spec(tmp_path, **over):
    base = dict(name="tiny", data=NoiseSpec(400, 2, 0), model=_tiny_model(),
                train=_tiny_train(), out_dir=tmp_path, eval_stride=16)
    base.update(over)
    return RunSpec(**base)


class TestSources:
    def test_generator_specs_load_split(self):
        multi = load_source(MultiSpec(300, (5,), 1, seed=0))
        assert multi.is_split and multi.n_channels == 3
        noise = load_source(NoiseSpec(300, 2, 0))
        assert noise.is_split and noise.n_channels == 2
        assert noise.train_end == 210

    def test_split_frame_passes_through(self):
        frame = load_source(NoiseSpec(300, 2, 0))
        assert load_source(frame) is frame

    def test_raw_option_skips_split(self):
        frame = load_source(NoiseSpec(300, 2, 0), split=False)
        assert not frame.is_split

    def test_csv_roundtrip(self, tmp_path):
        frame = gen_channels_independent(50, 2, 1)
        path = tmp_path / "two.csv"
        write_csv(frame, path)
        loaded = load_source(path)
        assert loaded.is_split
        assert loaded.channel_names == frame.channel_names

    def test_unsupported_source(self):
        with pytest.raises(ConfigError, match="source"):
            load_source(42)

    def test_descriptors_and_labels(self, tmp_path):
        assert source_descriptor(MultiSpec(300, (5,), 1))["kind"] == "multi"
        assert source_descriptor(NoiseSpec())["phi"] == 0.9
        assert source_descriptor(tmp_path / "a.csv")["kind"] == "csv"
        frame = gen_channels_independent(50, 2, 1)
        assert source_descriptor(frame)["n_channels"] == 2
        assert source_label(MultiSpec(300, (5,), 1)) == "multi"
        assert source_label(NoiseSpec()) == "noise"
        assert source_label("/some/where/etth1.csv") == "etth1"
        assert json.dumps(source_descriptor(NoiseSpec()))  # JSON-safe


class TestRunSpecValidation:
    def test_unknown_protocol(self, tmp_path):
        with pytest.raises(ConfigError, match="protocol"):
            _tiny_spec(tmp_path, protocol="warp")

    def test_zeroshot_needs_transfer(self, tmp_path):
        with pytest.raises(ConfigError, match="transfer"):
            _tiny_spec(tmp_path, protocol="zeroshot")

    def test_zeroshot_rejects_fixed_channel_variants(self, tmp_path):
        for variant in ("temporal_wise", "series_wise"):
            model = _tiny_model(variant=variant,
                                n_channels=2 if variant == "temporal_wise"
                                else None)
            with pytest.raises(ConfigError, match="channel"):
                _tiny_spec(tmp_path, model=model, protocol="zeroshot",
                           transfer_data=NoiseSpec(400, 3, 1))

    def test_transfer_only_for_zeroshot(self, tmp_path):
        with pytest.raises(ConfigError, match="zeroshot"):
            _tiny_spec(tmp_path, transfer_data=NoiseSpec(400, 3, 1))

    def test_bounds(self, tmp_path):
        with pytest.raises(ConfigError, match="eval_stride"):
            _tiny_spec(tmp_path, eval_stride=0)
        with pytest.raises(ConfigError, match="horizons"):
            _tiny_spec(tmp_path, horizons=(4, 0))
        with pytest.raises(ConfigError, match="mask_visible"):
            _tiny_spec(tmp_path, mask_visible=0)


class TestTokenCounting:
    def test_formula_paths(self):
        cfg = _tiny_model()
        per = n_context_per_series(24, 8, 4, 4)
        pre, post = context_token_counts(cfg, 2)
        assert pre == per * 2
        assert post == retrieval_count(cfg.retrieval, per, 2)

    def test_disabled_retrieval_keeps_everything(self):
        cfg = _tiny_model(retrieval=RetrievalConfig(enabled=False))
        pre, post = context_token_counts(cfg, 2)
        assert pre == post == n_context_per_series(24, 8, 4, 4) * 2

    def test_no_context_paths(self):
        assert context_token_counts(_tiny_model(context_enabled=False),
                                    2) == (0, 0)
        assert context_token_counts(_tiny_model(variant="series_wise"),
                                    2) == (0, 0)

    def test_logged_counts_match_live_tokenizer(self):
        # the audit-trail invariant: logged counts equal what a forward
        # pass actually builds
        cfg = _tiny_model()
        model = ICTSPModel(cfg, seed=0)
        window = np.random.default_rng(0).normal(size=(2, 24))
        tm = model.tokenize(window)
        pre, post = context_token_counts(cfg, 2)
        n_targets = len(tm.columns_of_kind(KIND_TARGET))
        assert tm.n_tokens - n_targets == post
        assert n_targets == 2


class TestRunExperiment:
    def test_full_protocol_row_per_horizon(self, tmp_path):
        spec = _tiny_spec(tmp_path, horizons=(4, 2))
        rows = run_experiment(spec)
        assert [r.horizon for r in rows] == [4, 2]
        for row in rows:
            assert row.variant == "ictsp"
            assert row.protocol == "full"
            assert row.dataset == "noise"
            assert np.isfinite(row.mse) and np.isfinite(row.mae)
            assert row.steps_run == 10
            assert row.wall_time_s > 0
        assert (tmp_path / "results.csv").exists()
        assert (tmp_path / "results.json").exists()
        for h in (4, 2):
            assert (tmp_path / f"history_tiny_ictsp_full_h{h}.csv").exists()
            assert (tmp_path / f"checkpoint_tiny_ictsp_full_h{h}.npz").exists()

    def test_row_config_is_exact_and_counts_match(self, tmp_path):
        spec = _tiny_spec(tmp_path)
        row = run_experiment(spec)[0]
        assert ModelConfig.from_dict(row.config["model"]) == spec.model
        assert row.config["train"] == dataclasses.asdict(spec.train)
        assert row.n_params == count_parameters(ICTSPModel(spec.model))
        assert (row.context_tokens_pre, row.context_tokens_post) == \
            context_token_counts(spec.model, 2)

    def test_rerun_reproduces_metrics_bitwise(self, tmp_path):
        rows_a = run_experiment(_tiny_spec(tmp_path / "a"))
        rows_b = run_experiment(_tiny_spec(tmp_path / "b"))
        assert rows_a[0].mse == rows_b[0].mse
        assert rows_a[0].mae == rows_b[0].mae
        assert rows_a[0].best_step == rows_b[0].best_step

    def test_checkpoint_reproduces_row_metric(self, tmp_path):
        from ictsp.training import evaluate
        spec = _tiny_spec(tmp_path)
        row = run_experiment(spec)[0]
        model = ICTSPModel.load_checkpoint(
            tmp_path / "checkpoint_tiny_ictsp_full_h4.npz")
        frame = load_source(spec.data)
        mse, mae = evaluate(model, frame, "test", 4, stride=16)
        assert float(mse) == row.mse
        assert float(mae) == row.mae

    def test_few_shot_truncates_training_data(self, tmp_path):
        # few10 of train_end 280 leaves 28 steps: enough for 24 + 4
        spec = _tiny_spec(tmp_path, protocol="few10")
        row = run_experiment(spec)[0]
        assert row.protocol == "few10"

    def test_few5_too_short_is_a_structured_error(self, tmp_path):
        spec = _tiny_spec(tmp_path, protocol="few5")
        with pytest.raises(ExperimentError, match="tiny") as exc:
            run_experiment(spec)
        assert exc.value.reason == "insufficient-train-data"

    def test_zeroshot_cross_channel_count(self, tmp_path):
        spec = _tiny_spec(tmp_path, protocol="zeroshot",
                          transfer_data=NoiseSpec(400, 3, 7))
        row = run_experiment(spec)[0]
        assert row.dataset == "noise->noise"
        assert np.isfinite(row.mse)

    def test_results_csv_parses_back(self, tmp_path):
        run_experiment(_tiny_spec(tmp_path))
        lines = (tmp_path / "results.csv").read_text().splitlines()
        header = lines[0].split(",")
        assert header[:5] == ["dataset", "variant", "protocol", "setting",
                              "horizon"]
        record = dict(zip(header, lines[1].split(",")))
        loaded = json.loads((tmp_path / "results.json").read_text())
        assert float(record["mse"]) == loaded[0]["mse"]


class TestAblation:
    def test_ablation_config_mapping(self):
        base = _tiny_model()
        assert ablation_config(base, "full") == base
        assert ablation_config(base, "wo_context").context_enabled is False
        assert ablation_config(base, "wo_tr").retrieval.enabled is False
        assert ablation_config(base, "m2").stride == 2
        assert ablation_config(base, "m64").stride == 64
        with pytest.raises(ConfigError, match="setting"):
            ablation_config(base, "bogus")

    def test_non_ictsp_rejected(self, tmp_path):
        spec = _tiny_spec(tmp_path, model=_tiny_model(variant="series_wise"))
        with pytest.raises(ConfigError, match="variant"):
            run_ablation(spec)

    def test_matrix_shape_and_table(self, tmp_path):
        spec = _tiny_spec(tmp_path)
        settings = ("full", "wo_context", "wo_tr", "m2")
        results = run_ablation(spec, settings=settings)
        assert tuple(results) == settings
        for setting, rows in results.items():
            assert len(rows) == 1
            assert rows[0].setting == setting
        assert results["wo_context"][0].context_tokens_pre == 0
        assert results["wo_tr"][0].context_tokens_pre == \
            results["wo_tr"][0].context_tokens_post
        lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert lines[0].split(",") == [
            "dataset", "horizon",
            "full_mse", "full_mae", "wo_context_mse", "wo_context_mae",
            "wo_tr_mse", "wo_tr_mae", "m2_mse", "m2_mae"]
        assert len(lines) == 2
        cells = lines[1].split(",")
        assert cells[0] == "noise" and int(cells[1]) == 4
        assert float(cells[2]) == results["full"][0].mse
        assert (tmp_path / "ablation.json").exists()

    def test_shared_seed_discipline(self, tmp_path):
        # identical config under two setting labels must give identical
        # metrics: the only thing a column may change is its knob
        spec = _tiny_spec(tmp_path)
        results = run_ablation(spec, settings=("full", "m4"))
        assert results["full"][0].mse == results["m4"][0].mse  # base stride 4


class TestComparison:
    def test_variant_configs(self):
        base = _tiny_model()
        assert variant_config(base, "ictsp", 2) is base
        assert variant_config(base, "series_wise", 2).variant == "series_wise"
        temporal = variant_config(base, "temporal_wise", 3)
        assert temporal.n_channels == 3
        with pytest.raises(ConfigError, match="variant"):
            variant_config(base, "mlp", 2)

    def test_variant_train_toggles(self):
        base = _tiny_train(shuffle_series=True, subset_series=True)
        temporal = variant_train_config(base, "temporal_wise")
        assert not temporal.shuffle_series and not temporal.subset_series
        assert variant_train_config(base, "ictsp") == base
        assert variant_train_config(base, "series_wise") == base

    def test_full_matrix_outputs(self, tmp_path):
        spec = ComparisonSpec(
            datasets={"na": NoiseSpec(400, 2, 0), "nb": NoiseSpec(400, 2, 5)},
            model=_tiny_model(), train=_tiny_train(), out_dir=tmp_path,
            eval_stride=32, curve_stride=64)
        result = run_architecture_comparison(spec)
        assert len(result.rows) == 6
        assert {(r.dataset, r.variant) for r in result.rows} == {
            (d, v) for d in ("na", "nb") for v in COMPARISON_VARIANTS}
        for key, curve in result.curves.items():
            assert len(curve) == 2  # evals at steps 5 and 10
            assert [s for s, _ in curve] == [5, 10]
        assert result.final_mse("na", "ictsp") == next(
            r.mse for r in result.rows
            if r.dataset == "na" and r.variant == "ictsp")
        with pytest.raises(KeyError):
            result.final_mse("na", "mlp")
        assert (tmp_path / "comparison.csv").exists()
        assert (tmp_path / "curves.csv").exists()
        curves_lines = (tmp_path / "curves.csv").read_text().splitlines()
        assert curves_lines[0] == "dataset,variant,step,test_mse"
        assert len(curves_lines) == 1 + 12
        for name in ("na", "nb"):
            lines = (tmp_path / f"forecasts_{name}.csv").read_text() \
                .splitlines()
            assert len(lines) == 1 + 4  # header + horizon rows
            header = lines[0].split(",")
            assert header[0] == "step"
            assert sum(c.startswith("truth_") for c in header) == 2
            assert sum(c.startswith("ictsp_") for c in header) == 2

    def test_comparison_spec_validation(self, tmp_path):
        with pytest.raises(ConfigError, match="dataset"):
            ComparisonSpec(datasets={}, model=_tiny_model(),
                           train=_tiny_train(), out_dir=tmp_path)
        with pytest.raises(ConfigError, match="curve_stride"):
            ComparisonSpec(datasets={"a": NoiseSpec()}, model=_tiny_model(),
                           train=_tiny_train(), out_dir=tmp_path,
                           curve_stride=0)


class TestAttentionExport:
    def test_export_writes_layer_files(self, tmp_path):
        cfg = _tiny_model(retrieval=RetrievalConfig(enabled=False))
        model = ICTSPModel(cfg, seed=0)
        frame = load_source(NoiseSpec(400, 2, 0))
        paths = export_attention_run(model, frame, tmp_path / "attn")
        assert len(paths) == cfg.n_layers
        assert all((tmp_path / f"attn_layer{i}.csv").exists()
                   for i in range(cfg.n_layers))

    def test_merged_tokens_warn(self, tmp_path):
        model = ICTSPModel(_tiny_model(), seed=0)
        frame = load_source(NoiseSpec(400, 2, 0))
        with pytest.warns(UserWarning, match="merged"):
            export_attention_run(model, frame, tmp_path / "attn")

    def test_origin_bounds(self, tmp_path):
        model = ICTSPModel(_tiny_model(), seed=0)
        frame = load_source(NoiseSpec(400, 2, 0))
        with pytest.raises(ConfigError, match="origin"):
            export_attention_run(model, frame, tmp_path / "attn", origin=10)
        with pytest.raises(ConfigError, match="origin"):
            export_attention_run(model, frame, tmp_path / "attn", origin=999)

    def test_unsplit_frame_uses_series_end(self, tmp_path):
        model = ICTSPModel(_tiny_model(retrieval=RetrievalConfig(
            enabled=False)), seed=0)
        frame = load_source(NoiseSpec(400, 2, 0), split=False)
        paths = export_attention_run(model, frame, tmp_path / "attn")
        assert paths


class TestPresets:
    def test_names_and_lookup(self):
        assert set(preset_names()) >= {"multi-small", "noise-small",
                                       "warmup-demo", "full-scale"}
        with pytest.raises(ConfigError, match="preset"):
            get_preset("nonsense")

    def test_desk_presets_share_shapes(self):
        multi = get_preset("multi-small")
        noise = get_preset("noise-small")
        assert multi.model == noise.model
        assert multi.train == noise.train
        cfg = multi.model
        assert (cfg.input_len, cfg.lookback, cfg.horizon,
                cfg.stride) == (512, 256, 96, 8)
        assert (cfg.d_model, cfg.n_layers, cfg.n_heads) == (64, 3, 4)
        assert multi.train.batch_size == 16
        assert multi.train.seed == 2024
        assert multi.data.n_channels == 8

    def test_warmup_preset_gates_projections(self):
        assert get_preset("warmup-demo").train.warmup_linear_steps == 5000

    def test_make_run_spec_overrides(self, tmp_path):
        spec = make_run_spec("noise-small", seed=7, out_dir=tmp_path,
                             horizons=(24,),
                             model_overrides={"d_model": 16,
                                              "retrieval": {"n_merged": 5}},
                             train_overrides={"max_steps": 50},
                             eval_stride=8)
        assert spec.train.seed == 7
        assert spec.train.max_steps == 50
        assert spec.model.d_model == 16
        assert spec.model.retrieval.n_merged == 5
        assert spec.model.retrieval.keep_fraction == 0.1  # preserved
        assert spec.horizons == (24,)
        assert spec.eval_stride == 8

    def test_make_run_spec_defaults_follow_preset(self, tmp_path):
        spec = make_run_spec("multi-small", out_dir=tmp_path)
        bundle = get_preset("multi-small")
        assert spec.model == bundle.model
        assert spec.train == bundle.train
        assert spec.eval_stride == bundle.eval_stride

    def test_resolve_source(self, tmp_path):
        assert resolve_source("multi-small") is get_preset("multi-small").data
        path = tmp_path / "data.csv"
        assert resolve_source(str(path)) == path
        spec = NoiseSpec()
        assert resolve_source(spec) is spec
        with pytest.raises(ConfigError, match="preset"):
            resolve_source("not-a-preset-or-csv")

    def test_make_comparison_spec(self, tmp_path):
        spec = make_comparison_spec(seed=5, out_dir=tmp_path,
                                    train_overrides={"max_steps": 100})
        assert set(spec.datasets) == {"multi", "noise"}
        assert spec.train.seed == 5
        assert spec.train.max_steps == 100
        tiny = make_comparison_spec(
            out_dir=tmp_path, model_overrides={"d_model": 16},
            datasets={"solo": NoiseSpec(300, 2, 0)})
        assert tiny.model.d_model == 16
        assert set(tiny.datasets) == {"solo"}

    def test_full_scale_preset_is_default_scale(self):
        bundle = get_preset("full-scale")
        assert bundle.model == ModelConfig()
        assert bundle.train == TrainConfig()
        assert isinstance(bundle, Preset)

    def test_all_ablation_settings_resolve(self):
        base = get_preset("multi-small").model
        for setting in ABLATION_SETTINGS:
            ablation_config(base, setting)  # must not raise
