"""Command line front end over the experiment runner.

Every subcommand accepts --seed, --out, and --preset plus an optional JSON
config file; explicit flags override file keys which override preset values.
Known failures exit nonzero with a one-line JSON diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .data import write_csv
from .errors import ExperimentError, ICTSPError
from .experiments import (ABLATION_SETTINGS, context_token_counts,
                          export_attention_run, get_preset, load_source,
                          make_comparison_spec, make_run_spec, preset_names,
                          resolve_source, run_ablation,
                          run_architecture_comparison, run_experiment)
from .model import ICTSPModel, ModelConfig, count_parameters_formula
from .training import evaluate


def _read_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        loaded = json.load(fh)
    if not isinstance(loaded, dict):
        raise ICTSPError(f"{path}: config file must hold a JSON object")
    return loaded


def _pick(flag_value, file_cfg: dict, key: str, default=None):
    """Flag beats config file beats default."""
    if flag_value is not None:
        return flag_value
    return file_cfg.get(key, default)


def _parse_horizons(text: str | None) -> tuple[int, ...]:
    if not text:
        return ()
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ICTSPError(f"bad horizon list {text!r}, expected "
                         f"comma-separated integers") from None


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2))


def _train_overrides(args, file_cfg: dict) -> dict:
    overrides = dict(file_cfg.get("train", {}))
    for key in ("max_steps", "batch_size", "eval_interval", "patience"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return overrides


# -- subcommand handlers -------------------------------------------------------


def cmd_generate_data(args) -> int:
    file_cfg = _read_config(args.config)
    preset = _pick(args.preset, file_cfg, "preset", "multi-small")
    source = get_preset(preset).data
    if args.seed is not None:
        if not hasattr(source, "seed"):
            raise ICTSPError(f"preset {preset!r} data source has no seed "
                             f"to override")
        source = dataclasses.replace(source, seed=args.seed)
    frame = load_source(source, split=False)
    out = Path(args.out or f"{preset}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(frame, out)
    _emit({"written": str(out), "n_channels": frame.n_channels,
           "n_steps": frame.n_steps})
    return 0


def _build_run_spec(args, protocol_default: str = "full"):
    file_cfg = _read_config(args.config)
    preset = _pick(args.preset, file_cfg, "preset", "multi-small")
    horizons = (_parse_horizons(args.horizons) if args.horizons
                else tuple(file_cfg.get("horizons", ())))
    return make_run_spec(
        preset,
        protocol=_pick(args.protocol, file_cfg, "protocol", protocol_default),
        seed=_pick(args.seed, file_cfg, "seed"),
        out_dir=_pick(args.out, file_cfg, "out", "runs"),
        horizons=horizons,
        transfer=_pick(args.transfer, file_cfg, "transfer"),
        mask_visible=_pick(args.mask_visible, file_cfg, "mask_visible"),
        model_overrides=file_cfg.get("model"),
        train_overrides=_train_overrides(args, file_cfg),
        eval_stride=_pick(args.eval_stride, file_cfg, "eval_stride"),
    )


def cmd_train(args) -> int:
    rows = run_experiment(_build_run_spec(args))
    _emit([row.to_dict() for row in rows])
    return 0


def cmd_evaluate(args) -> int:
    file_cfg = _read_config(args.config)
    checkpoint = _pick(args.checkpoint, file_cfg, "checkpoint")
    if checkpoint is None:
        raise ICTSPError("evaluate needs --checkpoint")
    data = _pick(args.data, file_cfg, "data")
    if data is None:
        raise ICTSPError("evaluate needs --data (preset name or CSV path)")
    model = ICTSPModel.load_checkpoint(checkpoint)
    frame = load_source(resolve_source(data))
    split = _pick(args.split, file_cfg, "split", "test")
    stride = _pick(args.eval_stride, file_cfg, "eval_stride", 1)
    mse, mae = evaluate(model, frame, split, model.horizon, stride=stride,
                        mask_visible=_pick(args.mask_visible, file_cfg,
                                           "mask_visible"))
    _emit({"checkpoint": str(checkpoint), "data": str(data), "split": split,
           "horizon": model.horizon, "stride": stride,
           "mse": float(mse), "mae": float(mae)})
    return 0


def cmd_ablate(args) -> int:
    spec = _build_run_spec(args)
    settings = (tuple(args.settings.split(",")) if args.settings
                else ABLATION_SETTINGS)
    results = run_ablation(spec, settings=settings)
    _emit({setting: [row.to_dict() for row in rows]
           for setting, rows in results.items()})
    return 0


def cmd_compare(args) -> int:
    file_cfg = _read_config(args.config)
    spec = make_comparison_spec(
        seed=_pick(args.seed, file_cfg, "seed"),
        out_dir=_pick(args.out, file_cfg, "out", "runs"),
        train_overrides=_train_overrides(args, file_cfg),
        model_overrides=file_cfg.get("model"),
        datasets=file_cfg.get("datasets"),
        eval_stride=_pick(args.eval_stride, file_cfg, "eval_stride"),
        curve_stride=_pick(args.curve_stride, file_cfg, "curve_stride", 64),
    )
    result = run_architecture_comparison(spec)
    _emit([row.to_dict() for row in result.rows])
    return 0


def cmd_export_attention(args) -> int:
    file_cfg = _read_config(args.config)
    checkpoint = _pick(args.checkpoint, file_cfg, "checkpoint")
    if checkpoint is None:
        raise ICTSPError("export-attention needs --checkpoint")
    data = _pick(args.data, file_cfg, "data")
    if data is None:
        raise ICTSPError("export-attention needs --data")
    model = ICTSPModel.load_checkpoint(checkpoint)
    frame = load_source(resolve_source(data))
    prefix = Path(_pick(args.out, file_cfg, "out", "attention"))
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = export_attention_run(model, frame, prefix,
                                 origin=_pick(args.origin, file_cfg,
                                              "origin"))
    _emit({"written": paths})
    return 0


def cmd_count(args) -> int:
    file_cfg = _read_config(args.config)
    preset = _pick(args.preset, file_cfg, "preset", "multi-small")
    bundle = get_preset(preset)
    model_cfg = bundle.model
    if file_cfg.get("model"):
        merged = model_cfg.to_dict()
        over = dict(file_cfg["model"])
        if isinstance(over.get("retrieval"), dict):
            merged["retrieval"] = {**merged["retrieval"],
                                   **over.pop("retrieval")}
        merged.update(over)
        model_cfg = ModelConfig.from_dict(merged)
    if args.channels is not None:
        n_channels = args.channels
    elif hasattr(bundle.data, "n_channels"):
        n_channels = bundle.data.n_channels
    else:
        n_channels = load_source(bundle.data).n_channels
    pre, post = context_token_counts(model_cfg, n_channels)
    _emit({"preset": preset, "variant": model_cfg.variant,
           "n_params": count_parameters_formula(model_cfg),
           "token_length": model_cfg.token_length,
           "n_channels": n_channels,
           "context_tokens_pre": pre, "context_tokens_post": post,
           "tokens_per_forward": post + n_channels})
    return 0


# -- parser --------------------------------------------------------------------


def _add_common(sub) -> None:
    sub.add_argument("--preset", choices=preset_names(),
                     help="named configuration bundle")
    sub.add_argument("--seed", type=int, help="training seed override")
    sub.add_argument("--out", help="output directory or file")
    sub.add_argument("--config", help="JSON config file; flags override "
                                      "its keys")


def _add_budget(sub) -> None:
    sub.add_argument("--max-steps", dest="max_steps", type=int)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--eval-interval", dest="eval_interval", type=int)
    sub.add_argument("--patience", type=int)
    sub.add_argument("--eval-stride", dest="eval_stride", type=int,
                     help="origin stride for test evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ictsp",
        description="Train and probe forecasting-task-token transformers.")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("generate-data",
                          help="write a preset's synthetic dataset as CSV")
    _add_common(sub)
    sub.set_defaults(handler=cmd_generate_data)

    sub = subs.add_parser("train", help="fit one model and score it on the "
                                        "test split")
    _add_common(sub)
    _add_budget(sub)
    sub.add_argument("--protocol", choices=("full", "few10", "few5",
                                            "zeroshot"))
    sub.add_argument("--horizons", help="comma-separated forecast lengths")
    sub.add_argument("--transfer", help="zeroshot evaluation data "
                                        "(preset name or CSV path)")
    sub.add_argument("--mask-visible", dest="mask_visible", type=int,
                     help="zero all but this many trailing input steps "
                          "during evaluation")
    sub.set_defaults(handler=cmd_train)

    sub = subs.add_parser("evaluate", help="score a saved checkpoint")
    _add_common(sub)
    sub.add_argument("--checkpoint")
    sub.add_argument("--data", help="preset name or CSV path")
    sub.add_argument("--split", choices=("val", "test"))
    sub.add_argument("--eval-stride", dest="eval_stride", type=int)
    sub.add_argument("--mask-visible", dest="mask_visible", type=int)
    sub.set_defaults(handler=cmd_evaluate)

    sub = subs.add_parser("ablate", help="run the ablation matrix")
    _add_common(sub)
    _add_budget(sub)
    sub.add_argument("--protocol", choices=("full",))
    sub.add_argument("--horizons", help="comma-separated forecast lengths")
    sub.add_argument("--settings", help="comma-separated subset of "
                                        f"{','.join(ABLATION_SETTINGS)}")
    sub.set_defaults(handler=cmd_ablate, transfer=None, mask_visible=None)

    sub = subs.add_parser("compare-architectures",
                          help="race the three token layouts on both desk "
                               "datasets")
    _add_common(sub)
    _add_budget(sub)
    sub.add_argument("--curve-stride", dest="curve_stride", type=int,
                     help="origin stride for the per-evaluation test curve")
    sub.set_defaults(handler=cmd_compare)

    sub = subs.add_parser("export-attention",
                          help="write per-layer attention maps for one "
                               "forecast window")
    _add_common(sub)
    sub.add_argument("--checkpoint")
    sub.add_argument("--data", help="preset name or CSV path")
    sub.add_argument("--origin", type=int,
                     help="forecast origin (window end, default: first "
                          "test origin)")
    sub.set_defaults(handler=cmd_export_attention)

    sub = subs.add_parser("count",
                          help="parameter and token counts for a config")
    _add_common(sub)
    sub.add_argument("--channels", type=int,
                     help="channel count for token accounting")
    sub.set_defaults(handler=cmd_count)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ICTSPError as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, ExperimentError):
            payload["reason"] = exc.reason
        print(json.dumps(payload), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
