"""Preset experiment runner: protocols, ablation matrix, architecture race.

Everything here is plumbing around three moves: build a frame, fit a model on
its train slice, measure it on held-out data. Runs emit CSV for tables, JSON
for machines, and checkpoints for reuse. Every result row embeds the exact
resolved configuration so any number in a table can be regenerated bit for
bit by re-running that row alone.
"""

from __future__ import annotations

import dataclasses
import json
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (MultiSpec, SeriesFrame, few_shot_truncate,
                   gen_channels_independent, gen_multi, load_csv,
                   split_standardize)
from .errors import ConfigError, ExperimentError
from .model import ICTSPModel, ModelConfig, count_parameters, export_attention
from .retrieval import RetrievalConfig, retrieval_count
from .tokenizer import n_context_per_series
from .training import TrainConfig, evaluate, fit

PROTOCOLS = ("full", "few10", "few5", "zeroshot")
FEW_SHOT_FRACTIONS = {"few10": 0.10, "few5": 0.05}
ABLATION_SETTINGS = ("full", "wo_context", "wo_tr", "m1", "m64", "m256")
COMPARISON_VARIANTS = ("ictsp", "series_wise", "temporal_wise")


@dataclass(frozen=True)
class NoiseSpec:
    """Independent noisy AR(1) channels, the weak-coupling testbed."""

    n_steps: int = 20000
    n_channels: int = 8
    seed: int = 0
    phi: float = 0.9


# -- data sources --------------------------------------------------------------


def load_source(source, split: bool = True) -> SeriesFrame:
    """Materialize a data source as a frame, split and standardized by default.

    Accepts a ready frame (split if not already), a synthetic generator spec,
    or a CSV path. `split=False` returns the raw frame for re-export.
    """
    if isinstance(source, SeriesFrame):
        frame = source
    elif isinstance(source, MultiSpec):
        frame = gen_multi(source)
    elif isinstance(source, NoiseSpec):
        frame = gen_channels_independent(source.n_steps, source.n_channels,
                                         source.seed, source.phi)
    elif isinstance(source, (str, Path)):
        frame = load_csv(source)
    else:
        raise ConfigError(f"unsupported data source {type(source).__name__}")
    if not split:
        return frame
    return frame if frame.is_split else split_standardize(frame)


def source_descriptor(source) -> dict:
    """JSON-safe description of a data source for audit trails."""
    if isinstance(source, MultiSpec):
        return {"kind": "multi", "n_steps": source.n_steps,
                "shifts": list(source.shifts),
                "combinations": source.combinations, "seed": source.seed}
    if isinstance(source, NoiseSpec):
        return {"kind": "noise", "n_steps": source.n_steps,
                "n_channels": source.n_channels, "seed": source.seed,
                "phi": source.phi}
    if isinstance(source, (str, Path)):
        return {"kind": "csv", "path": str(source)}
    if isinstance(source, SeriesFrame):
        return {"kind": "frame", "n_channels": source.n_channels,
                "n_steps": source.n_steps}
    raise ConfigError(f"unsupported data source {type(source).__name__}")


def source_label(source) -> str:
    """Short name for result tables."""
    if isinstance(source, MultiSpec):
        return "multi"
    if isinstance(source, NoiseSpec):
        return "noise"
    if isinstance(source, (str, Path)):
        return Path(source).stem
    if isinstance(source, SeriesFrame):
        return str(source.meta.get("name", "frame"))
    raise ConfigError(f"unsupported data source {type(source).__name__}")


def _safe(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", label)


# -- run specification ---------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    """One experiment: a dataset, a model, a budget, and a protocol."""

    name: str
    data: object
    model: ModelConfig
    train: TrainConfig
    protocol: str = "full"
    horizons: tuple[int, ...] = ()
    transfer_data: object | None = None
    out_dir: str | Path = "runs"
    eval_stride: int = 1
    mask_visible: int | None = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}, expected "
                              f"one of {PROTOCOLS}")
        if self.protocol == "zeroshot":
            if self.transfer_data is None:
                raise ConfigError("zeroshot protocol needs transfer_data, the "
                                  "dataset to evaluate on")
            if self.model.variant != "ictsp":
                raise ConfigError(
                    f"zeroshot transfer needs a model that accepts any "
                    f"channel count; variant {self.model.variant!r} is built "
                    f"for a fixed channel layout")
        elif self.transfer_data is not None:
            raise ConfigError("transfer_data is only meaningful for the "
                              "zeroshot protocol")
        if self.eval_stride < 1:
            raise ConfigError(f"eval_stride must be >= 1, got "
                              f"{self.eval_stride}")
        if any(h < 1 for h in self.horizons):
            raise ConfigError(f"horizons must be positive, got "
                              f"{self.horizons}")
        if self.mask_visible is not None and self.mask_visible < 1:
            raise ConfigError(f"mask_visible must be >= 1, got "
                              f"{self.mask_visible}")

    @property
    def run_horizons(self) -> tuple[int, ...]:
        return self.horizons or (self.model.horizon,)


@dataclass(frozen=True)
class ResultRow:
    """One measured cell: metrics plus everything needed to reproduce them."""

    dataset: str
    variant: str
    protocol: str
    setting: str
    horizon: int
    mse: float
    mae: float
    n_params: int
    context_tokens_pre: int
    context_tokens_post: int
    wall_time_s: float
    best_step: int
    steps_run: int
    seed: int
    config: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_CSV_COLUMNS = ("dataset", "variant", "protocol", "setting", "horizon",
                "mse", "mae", "n_params", "context_tokens_pre",
                "context_tokens_post", "wall_time_s", "best_step",
                "steps_run", "seed")


def write_results(rows: list[ResultRow], csv_path, json_path) -> None:
    """Emit rows as a flat CSV table and a full-fidelity JSON list."""
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(_CSV_COLUMNS) + "\n")
        for row in rows:
            record = row.to_dict()
            fh.write(",".join(repr(record[c]) if isinstance(record[c], float)
                              else str(record[c]) for c in _CSV_COLUMNS)
                     + "\n")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump([row.to_dict() for row in rows], fh, indent=2)
        fh.write("\n")


def context_token_counts(cfg: ModelConfig, n_series: int) -> tuple[int, int]:
    """(before, after reduction) context-token counts for one forward pass."""
    if cfg.variant != "ictsp" or not cfg.context_enabled:
        return 0, 0
    per_series = n_context_per_series(cfg.input_len, cfg.lookback,
                                      cfg.horizon, cfg.stride)
    pre = per_series * n_series
    if not cfg.retrieval.enabled:
        return pre, pre
    return pre, retrieval_count(cfg.retrieval, per_series, n_series)


# -- the single-cell runner ----------------------------------------------------


def _resolved_config(spec: RunSpec, model_cfg: ModelConfig) -> dict:
    return {
        "data": source_descriptor(spec.data),
        "transfer_data": (None if spec.transfer_data is None
                          else source_descriptor(spec.transfer_data)),
        "model": model_cfg.to_dict(),
        "train": dataclasses.asdict(spec.train),
        "protocol": spec.protocol,
        "eval_stride": spec.eval_stride,
        "mask_visible": spec.mask_visible,
    }


def _run_one(spec: RunSpec, model_cfg: ModelConfig, train_frame: SeriesFrame,
             eval_frame: SeriesFrame, dataset: str, label: str,
             setting: str, out: Path) -> ResultRow:
    started = time.perf_counter()
    model = ICTSPModel(model_cfg, seed=spec.train.seed)
    result = fit(model, train_frame, spec.train,
                 history_path=out / f"history_{label}.csv")
    mse, mae = evaluate(model, eval_frame, "test", model_cfg.horizon,
                        stride=spec.eval_stride,
                        mask_visible=spec.mask_visible)
    wall = time.perf_counter() - started
    model.save_checkpoint(out / f"checkpoint_{label}.npz")
    pre, post = context_token_counts(model_cfg, train_frame.n_channels)
    return ResultRow(
        dataset=dataset,
        variant=model_cfg.variant,
        protocol=spec.protocol,
        setting=setting,
        horizon=model_cfg.horizon,
        mse=float(mse),
        mae=float(mae),
        n_params=count_parameters(model),
        context_tokens_pre=pre,
        context_tokens_post=post,
        wall_time_s=round(wall, 3),
        best_step=result.best_step,
        steps_run=result.steps_run,
        seed=spec.train.seed,
        config=_resolved_config(spec, model_cfg),
    )


def run_experiment(spec: RunSpec) -> list[ResultRow]:
    """Execute one spec per horizon: load, split, truncate, fit, measure.

    Writes per-horizon histories and checkpoints plus aggregate results.csv
    and results.json under spec.out_dir, and returns the rows.
    """
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame = load_source(spec.data)
    if spec.protocol == "zeroshot":
        eval_frame = load_source(spec.transfer_data)
        dataset = f"{source_label(spec.data)}->{source_label(spec.transfer_data)}"
    else:
        eval_frame = frame
        dataset = source_label(spec.data)
    rows = []
    for horizon in spec.run_horizons:
        model_cfg = dataclasses.replace(spec.model, horizon=horizon)
        train_frame = frame
        if spec.protocol in FEW_SHOT_FRACTIONS:
            try:
                train_frame = few_shot_truncate(
                    frame, FEW_SHOT_FRACTIONS[spec.protocol],
                    min_len=model_cfg.input_len + horizon)
            except ExperimentError as exc:
                raise ExperimentError(
                    f"run {spec.name!r} (horizon {horizon}): {exc}",
                    reason=exc.reason) from exc
        label = _safe(f"{spec.name}_{model_cfg.variant}_{spec.protocol}"
                      f"_h{horizon}")
        rows.append(_run_one(spec, model_cfg, train_frame, eval_frame,
                             dataset, label, "", out))
    write_results(rows, out / "results.csv", out / "results.json")
    return rows


# -- ablation matrix -----------------------------------------------------------


def ablation_config(base: ModelConfig, setting: str) -> ModelConfig:
    """The model variation behind one ablation column."""
    if setting == "full":
        return base
    if setting == "wo_context":
        return dataclasses.replace(base, context_enabled=False)
    if setting == "wo_tr":
        retrieval = dataclasses.replace(base.retrieval, enabled=False)
        return dataclasses.replace(base, retrieval=retrieval)
    match = re.fullmatch(r"m(\d+)", setting)
    if match:
        return dataclasses.replace(base, stride=int(match.group(1)))
    raise ConfigError(f"unknown ablation setting {setting!r}, expected one "
                      f"of {ABLATION_SETTINGS} or m<stride>")


def run_ablation(spec: RunSpec,
                 settings: tuple[str, ...] = ABLATION_SETTINGS
                 ) -> dict[str, list[ResultRow]]:
    """Run the ablation columns with shared data and seeds.

    Every column starts from the same frame and the same train seed, so two
    columns differ only through the configuration knob under study. Writes
    ablation.csv (one row per dataset and horizon, one MSE/MAE column pair
    per setting) and ablation.json with the full rows.
    """
    if spec.model.variant != "ictsp":
        raise ConfigError("the ablation matrix studies the in-context model; "
                          f"got variant {spec.model.variant!r}")
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame = load_source(spec.data)
    dataset = source_label(spec.data)
    results: dict[str, list[ResultRow]] = {}
    for setting in settings:
        base = ablation_config(spec.model, setting)
        rows = []
        for horizon in spec.run_horizons:
            model_cfg = dataclasses.replace(base, horizon=horizon)
            label = _safe(f"{spec.name}_{setting}_h{horizon}")
            rows.append(_run_one(spec, model_cfg, frame, frame, dataset,
                                 label, setting, out))
        results[setting] = rows
    write_ablation_table(results, out / "ablation.csv")
    flat = [row for rows in results.values() for row in rows]
    write_results(flat, out / "ablation_rows.csv", out / "ablation.json")
    return results


def write_ablation_table(results: dict[str, list[ResultRow]], path) -> None:
    """One row per dataset and horizon, one MSE/MAE column pair per setting."""
    settings = list(results)
    if not settings:
        raise ConfigError("no ablation results to tabulate")
    keys = [(row.dataset, row.horizon) for row in results[settings[0]]]
    for setting in settings[1:]:
        got = [(row.dataset, row.horizon) for row in results[setting]]
        if got != keys:
            raise ConfigError(f"ablation columns disagree on rows: "
                              f"{setting!r} has {got}, expected {keys}")
    header = ["dataset", "horizon"]
    for setting in settings:
        header += [f"{setting}_mse", f"{setting}_mae"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i, (dataset, horizon) in enumerate(keys):
            cells = [dataset, str(horizon)]
            for setting in settings:
                row = results[setting][i]
                cells += [repr(row.mse), repr(row.mae)]
            fh.write(",".join(cells) + "\n")


# -- architecture comparison ---------------------------------------------------


@dataclass(frozen=True)
class ComparisonSpec:
    """Race the three token layouts on named datasets with matched budgets."""

    datasets: dict
    model: ModelConfig
    train: TrainConfig
    out_dir: str | Path = "runs"
    eval_stride: int = 1
    curve_stride: int | None = None

    def __post_init__(self):
        if not self.datasets:
            raise ConfigError("comparison needs at least one dataset")
        if self.eval_stride < 1:
            raise ConfigError(f"eval_stride must be >= 1, got "
                              f"{self.eval_stride}")
        if self.curve_stride is not None and self.curve_stride < 1:
            raise ConfigError(f"curve_stride must be >= 1, got "
                              f"{self.curve_stride}")


@dataclass
class ComparisonResult:
    rows: list[ResultRow]
    curves: dict

    def final_mse(self, dataset: str, variant: str) -> float:
        for row in self.rows:
            if row.dataset == dataset and row.variant == variant:
                return row.mse
        raise KeyError((dataset, variant))


def variant_config(base: ModelConfig, variant: str,
                   n_channels: int) -> ModelConfig:
    """Adapt the shared architecture settings to one token layout."""
    if variant == "ictsp":
        return base
    if variant == "series_wise":
        return dataclasses.replace(base, variant="series_wise")
    if variant == "temporal_wise":
        return dataclasses.replace(base, variant="temporal_wise",
                                   n_channels=n_channels)
    raise ConfigError(f"unknown variant {variant!r}, expected one of "
                      f"{COMPARISON_VARIANTS}")


def variant_train_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Per-layout training toggles under an otherwise shared budget.

    The timestep layout binds channel identity to input columns, so channel
    shuffling and subsetting would scramble what its projections can learn;
    both are disabled for it and kept as configured for the other layouts.
    """
    if variant == "temporal_wise":
        return dataclasses.replace(base, shuffle_series=False,
                                   subset_series=False)
    return base


def run_architecture_comparison(spec: ComparisonSpec) -> ComparisonResult:
    """Train all three layouts per dataset and trace test loss over steps.

    Writes comparison.csv/.json (final rows), curves.csv (dataset, variant,
    step, test_mse sampled at every evaluation), and one forecasts_<dataset>
    .csv per dataset holding the held-out truth and each layout's forecast
    for the first three channels at the first test origin.
    """
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curve_stride = spec.curve_stride or spec.eval_stride
    rows: list[ResultRow] = []
    curves: dict = {}
    for dataset, source in spec.datasets.items():
        frame = load_source(source)
        forecasts: dict[str, np.ndarray] = {}
        for variant in COMPARISON_VARIANTS:
            model_cfg = variant_config(spec.model, variant, frame.n_channels)
            train_cfg = variant_train_config(spec.train, variant)
            run_spec = RunSpec(name=f"{dataset}_{variant}", data=source,
                               model=model_cfg, train=train_cfg,
                               out_dir=out, eval_stride=spec.eval_stride)
            label = _safe(f"compare_{dataset}_{variant}")
            curve: list[tuple[int, float]] = []

            def trace(step, live, _curve=curve, _frame=frame,
                      _h=model_cfg.horizon):
                test_mse, _ = evaluate(live, _frame, "test", _h,
                                       stride=curve_stride)
                _curve.append((step, float(test_mse)))

            started = time.perf_counter()
            model = ICTSPModel(model_cfg, seed=train_cfg.seed)
            result = fit(model, frame, train_cfg,
                         history_path=out / f"history_{label}.csv",
                         eval_hook=trace)
            mse, mae = evaluate(model, frame, "test", model_cfg.horizon,
                                stride=spec.eval_stride)
            wall = time.perf_counter() - started
            model.save_checkpoint(out / f"checkpoint_{label}.npz")
            pre, post = context_token_counts(model_cfg, frame.n_channels)
            rows.append(ResultRow(
                dataset=dataset, variant=variant, protocol="full",
                setting="comparison", horizon=model_cfg.horizon,
                mse=float(mse), mae=float(mae),
                n_params=count_parameters(model),
                context_tokens_pre=pre, context_tokens_post=post,
                wall_time_s=round(wall, 3), best_step=result.best_step,
                steps_run=result.steps_run, seed=train_cfg.seed,
                config=_resolved_config(run_spec, model_cfg)))
            curves[(dataset, variant)] = curve
            forecasts[variant] = _first_test_forecast(model, frame,
                                                      model_cfg.horizon)
        _write_forecasts(frame, forecasts, spec.model.input_len,
                         spec.model.horizon,
                         out / f"forecasts_{_safe(dataset)}.csv")
    write_results(rows, out / "comparison.csv", out / "comparison.json")
    _write_curves(curves, out / "curves.csv")
    return ComparisonResult(rows=rows, curves=curves)


def _first_test_origin(frame: SeriesFrame, input_len: int,
                       horizon: int) -> int:
    lo, hi = frame.split_bounds("test")
    origin = max(lo, input_len)
    if origin + horizon > hi:
        raise ExperimentError("test split too short for a forecast window",
                              reason="no-evaluation-windows")
    return origin


def _first_test_forecast(model: ICTSPModel, frame: SeriesFrame,
                         horizon: int) -> np.ndarray:
    origin = _first_test_origin(frame, model.input_len, horizon)
    window = frame.values[:, origin - model.input_len:origin]
    return model.predict(window)


def _write_forecasts(frame: SeriesFrame, forecasts: dict[str, np.ndarray],
                     input_len: int, horizon: int, path) -> None:
    origin = _first_test_origin(frame, input_len, horizon)
    truth = frame.values[:, origin:origin + horizon]
    channels = list(range(min(3, frame.n_channels)))
    header = ["step"]
    for c in channels:
        name = _safe(frame.channel_names[c])
        header.append(f"truth_{name}")
        header += [f"{variant}_{name}" for variant in forecasts]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for t in range(horizon):
            cells = [str(origin + t)]
            for c in channels:
                cells.append(repr(float(truth[c, t])))
                cells += [repr(float(forecasts[variant][c, t]))
                          for variant in forecasts]
            fh.write(",".join(cells) + "\n")


def _write_curves(curves: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dataset,variant,step,test_mse\n")
        for (dataset, variant), points in curves.items():
            for step, test_mse in points:
                fh.write(f"{dataset},{variant},{step},{repr(test_mse)}\n")


# -- attention export ----------------------------------------------------------


def export_attention_run(model: ICTSPModel, frame: SeriesFrame,
                         prefix, origin: int | None = None) -> list[str]:
    """Forward one window and write per-layer attention CSVs.

    The window ends at `origin` (default: the first test origin when the
    frame is split, otherwise the end of the series).
    """
    if origin is None:
        if frame.is_split:
            origin = _first_test_origin(frame, model.input_len, model.horizon)
        else:
            origin = frame.n_steps
    if origin < model.input_len or origin > frame.n_steps:
        raise ConfigError(f"origin {origin} needs at least {model.input_len} "
                          f"steps of history within the {frame.n_steps}-step "
                          f"series")
    window = frame.values[:, origin - model.input_len:origin]
    result = model.forward(window)
    return export_attention(result.records, prefix)


# -- presets -------------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    """A named, fully resolved (data, model, budget) bundle."""

    data: object
    model: ModelConfig
    train: TrainConfig
    eval_stride: int = 1
    note: str = ""


def _desk_model(**over) -> ModelConfig:
    base = dict(variant="ictsp", n_layers=3, d_model=64, n_heads=4,
                dropout=0.1, input_len=512, lookback=256, horizon=96,
                stride=8,
                retrieval=RetrievalConfig(latent_dim=16, keep_fraction=0.10,
                                          n_merged=30),
                c_max=16, dtype="float32")
    base.update(over)
    return ModelConfig(**base)


def _desk_train(**over) -> TrainConfig:
    base = dict(batch_size=16, lr_peak=5e-4, lr_warmup_steps=1000,
                max_steps=8000, eval_interval=200, patience=8, seed=2024,
                val_stride=16)
    base.update(over)
    return TrainConfig(**base)


def _comparison_model(**over) -> ModelConfig:
    """Shapes for the three-way race, sized for a single core.

    The horizon is deliberately long relative to the channel lags so that
    naive last-value continuation is expensive and cross-window copying
    pays; the input length stays short because the timestep-token variant
    costs quadratic attention over L_I+L_P tokens per window.
    """
    base = dict(variant="ictsp", n_layers=3, d_model=48, n_heads=4,
                dropout=0.1, input_len=112, lookback=56, horizon=48,
                stride=8,
                retrieval=RetrievalConfig(latent_dim=16, keep_fraction=0.10,
                                          n_merged=30),
                c_max=16, dtype="float32")
    base.update(over)
    return ModelConfig(**base)


def _comparison_train(**over) -> TrainConfig:
    base = dict(batch_size=16, lr_peak=1e-3, lr_warmup_steps=300,
                max_steps=2500, eval_interval=200, patience=8, seed=2024,
                val_stride=32)
    base.update(over)
    return TrainConfig(**base)


_DESK_MULTI = MultiSpec(n_steps=20000, shifts=(24, 48, 96), combinations=4,
                        seed=1)
# near unit root: the latent level dwarfs the observation noise, so naive
# last-value continuation is close to optimal and channel mixing cannot help
_DESK_NOISE = NoiseSpec(n_steps=20000, n_channels=8, seed=1, phi=0.999)

PRESETS: dict[str, Preset] = {
    "multi-small": Preset(
        data=_DESK_MULTI,
        model=_desk_model(),
        train=_desk_train(),
        eval_stride=16,
        note="coupled random walks with lagged copies, desk size"),
    "noise-small": Preset(
        data=_DESK_NOISE,
        model=_desk_model(),
        train=_desk_train(),
        eval_stride=16,
        note="independent noisy AR(1) channels, desk size"),
    "warmup-demo": Preset(
        data=_DESK_MULTI,
        model=_desk_model(),
        train=_desk_train(warmup_linear_steps=5000),
        eval_stride=16,
        note="multi-small with the first 5000 steps training only the "
             "input/output projections"),
    "full-scale": Preset(
        data=MultiSpec(),
        model=ModelConfig(),
        train=TrainConfig(),
        eval_stride=1,
        note="full-scale reference configuration; hours of CPU time, "
             "shipped for completeness and not exercised by the tests"),
}


def preset_names() -> tuple[str, ...]:
    return tuple(PRESETS)


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}, expected one of "
                          f"{preset_names()}") from None


def resolve_source(name_or_path) -> object:
    """Map a CLI string to a data source: preset name or CSV path."""
    if isinstance(name_or_path, (MultiSpec, NoiseSpec, SeriesFrame)):
        return name_or_path
    text = str(name_or_path)
    if text in PRESETS:
        return PRESETS[text].data
    path = Path(text)
    if path.suffix.lower() == ".csv" or path.exists():
        return path
    raise ConfigError(f"data source {text!r} is neither a preset name "
                      f"({preset_names()}) nor a CSV path")


def make_run_spec(preset: str, protocol: str = "full", seed: int | None = None,
                  out_dir: str | Path = "runs", horizons: tuple[int, ...] = (),
                  transfer: object | None = None,
                  mask_visible: int | None = None,
                  model_overrides: dict | None = None,
                  train_overrides: dict | None = None,
                  eval_stride: int | None = None) -> RunSpec:
    """Build a RunSpec from a preset plus targeted overrides."""
    bundle = get_preset(preset)
    model_cfg = bundle.model
    if model_overrides:
        merged = model_cfg.to_dict()
        over = dict(model_overrides)
        if isinstance(over.get("retrieval"), dict):
            merged["retrieval"] = {**merged["retrieval"],
                                   **over.pop("retrieval")}
        merged.update(over)
        model_cfg = ModelConfig.from_dict(merged)
    train_cfg = bundle.train
    overrides = dict(train_overrides or {})
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        train_cfg = dataclasses.replace(train_cfg, **overrides)
    return RunSpec(
        name=preset,
        data=bundle.data,
        model=model_cfg,
        train=train_cfg,
        protocol=protocol,
        horizons=tuple(horizons),
        transfer_data=None if transfer is None else resolve_source(transfer),
        out_dir=out_dir,
        eval_stride=bundle.eval_stride if eval_stride is None else eval_stride,
        mask_visible=mask_visible,
    )


def make_comparison_spec(seed: int | None = None,
                         out_dir: str | Path = "runs",
                         train_overrides: dict | None = None,
                         model_overrides: dict | None = None,
                         datasets: dict | None = None,
                         eval_stride: int | None = None,
                         curve_stride: int | None = 64) -> ComparisonSpec:
    """The two-testbed architecture race, desk scale by default."""
    model_cfg = _comparison_model()
    if model_overrides:
        merged = model_cfg.to_dict()
        over = dict(model_overrides)
        if isinstance(over.get("retrieval"), dict):
            merged["retrieval"] = {**merged["retrieval"],
                                   **over.pop("retrieval")}
        merged.update(over)
        model_cfg = ModelConfig.from_dict(merged)
    train_cfg = _comparison_train()
    overrides = dict(train_overrides or {})
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        train_cfg = dataclasses.replace(train_cfg, **overrides)
    if datasets is None:
        resolved = {"multi": _DESK_MULTI, "noise": _DESK_NOISE}
    else:
        resolved = {name: resolve_source(source)
                    for name, source in datasets.items()}
    return ComparisonSpec(
        datasets=resolved,
        model=model_cfg,
        train=train_cfg,
        out_dir=out_dir,
        eval_stride=16 if eval_stride is None else eval_stride,
        curve_stride=curve_stride,
    )
