"""Deterministic training loop with warm-up, decay, and early stopping.

One training step samples a batch of (window, future) pairs from the train
slice, applies the randomized augmentations (window shift, channel shuffle
with fresh embedding ids, optional channel subsets), and takes one Adam step
on the mean MSE. Everything random flows from three independent generator
streams seeded off the config seed (data, augmentation, dropout), so a
(seed, config, data) triple reproduces the loss history bit-for-bit.

For the first `warmup_linear_steps` steps only the input/output projections
train, through the projection-only forward path; all other parameters receive
exactly zero gradient and zero Adam update, which keeps them bitwise frozen.

Validation runs every `eval_interval` steps; the best parameter snapshot is
kept and restored at the end. Evaluation slides a window across a split:
the forecast origin stays inside the split while the lookback window may
reach back into earlier data, and nothing after the origin is ever visible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import SeriesFrame
from .errors import ConfigError, ExperimentError, TrainingError
from .model import ICTSPModel
from .numerics import (
    AdamState,
    adam_step,
    collect_grads,
    mean_of,
    mse_loss,
    rows_slice,
    take_cols,
)
from .tokenizer import KIND_CONTEXT, mask_history


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule, batch settings, and augmentation switches."""

    batch_size: int = 32
    lr_peak: float = 5e-4
    lr_warmup_steps: int = 1000
    max_steps: int = 100000
    eval_interval: int = 200
    patience: int = 30
    seed: int = 2024
    warmup_linear_steps: int = 0  # projection-only steps before the full model
    val_stride: int = 1
    context_loss_weight: float = 0.0
    shift_augmentation: bool = True
    shuffle_series: bool = True
    subset_series: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.max_steps < 1:
            raise ConfigError(f"batch_size {self.batch_size} and max_steps "
                              f"{self.max_steps} must be >= 1")
        if self.eval_interval < 1 or self.patience < 1:
            raise ConfigError(f"eval_interval {self.eval_interval} and "
                              f"patience {self.patience} must be >= 1")
        if self.lr_peak < 0 or self.lr_warmup_steps < 0:
            raise ConfigError("learning-rate settings must be non-negative")
        if self.warmup_linear_steps < 0 or self.val_stride < 1:
            raise ConfigError("warmup_linear_steps must be >= 0 and "
                              "val_stride >= 1")
        if self.context_loss_weight < 0:
            raise ConfigError(f"context_loss_weight must be >= 0, got "
                              f"{self.context_loss_weight}")


@dataclass
class TrainState:
    """Mutable loop state: optimizer, counters, and the three RNG streams."""

    adam: AdamState
    params: list
    data_rng: np.random.Generator
    aug_rng: np.random.Generator
    dropout_rng: np.random.Generator
    step: int = 0
    best_val: float = float("inf")
    evals_since_best: int = 0


@dataclass(frozen=True)
class HistoryRow:
    step: int
    lr: float
    train_loss: float
    val_mse: float
    val_mae: float


@dataclass
class FitResult:
    history: list[HistoryRow]
    best_step: int
    best_val_mse: float
    best_val_mae: float
    steps_run: int
    stopped_early: bool


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to the peak, then linear decay hitting zero at max_steps."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if cfg.lr_warmup_steps > 0 and step <= cfg.lr_warmup_steps:
        return cfg.lr_peak * step / cfg.lr_warmup_steps
    span = cfg.max_steps - cfg.lr_warmup_steps
    if span <= 0:
        return 0.0
    return max(cfg.lr_peak * (cfg.max_steps - step) / span, 0.0)


def new_train_state(model: ICTSPModel, cfg: TrainConfig) -> TrainState:
    data_seq, aug_seq, drop_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    params = model.parameters()
    return TrainState(adam=AdamState(params), params=params,
                      data_rng=np.random.default_rng(data_seq),
                      aug_rng=np.random.default_rng(aug_seq),
                      dropout_rng=np.random.default_rng(drop_seq))


def sample_batch(frame: SeriesFrame, input_len: int, horizon: int,
                 batch_size: int, rng: np.random.Generator):
    """Uniform forecast origins inside the train slice; lookback stays inside it."""
    lo, hi = input_len, frame.train_end - horizon
    if hi < lo:
        raise ExperimentError(
            f"train slice of {frame.train_end} steps cannot fit one "
            f"{input_len}+{horizon} window", reason="train-slice-too-short")
    starts = rng.integers(lo, hi + 1, size=batch_size)
    return [(frame.values[:, t - input_len:t], frame.values[:, t:t + horizon])
            for t in starts]


def augment_batch(batch, model_cfg, cfg: TrainConfig,
                  rng: np.random.Generator):
    """Expand (window, future) pairs to (window, future, shift, series_ids).

    Per element: a random tokenizer shift in {0..stride-1}, a channel
    permutation paired with fresh random embedding ids, and optionally a
    random nonempty channel subset. Windows and futures move together.
    """
    out = []
    shiftable = (model_cfg.variant == "ictsp" and model_cfg.context_enabled
                 and cfg.shift_augmentation)
    for window, future in batch:
        n = window.shape[0]
        shift = int(rng.integers(model_cfg.stride)) if shiftable else 0
        ids = np.arange(n, dtype=np.intp)
        if cfg.shuffle_series:
            perm = rng.permutation(n)
            window, future = window[perm], future[perm]
            ids = rng.choice(model_cfg.c_max, size=n, replace=False)
        if cfg.subset_series and n > 1:
            size = int(rng.integers(1, n + 1))
            chosen = np.sort(rng.choice(n, size=size, replace=False))
            window, future, ids = window[chosen], future[chosen], ids[chosen]
        out.append((window, future, shift, ids))
    return out


def _context_loss(result, lookback: int):
    """MSE of the surviving context tokens' outputs against their known futures."""
    tm = result.tokens
    cols = [i for i, m in enumerate(tm.meta) if m.kind == KIND_CONTEXT]
    if not cols:
        return None
    pred = rows_slice(take_cols(result.outputs, cols), lookback,
                      lookback + tm.horizon)
    return mse_loss(pred, tm.values[lookback:, cols])


def train_step(model: ICTSPModel, batch, state: TrainState,
               cfg: TrainConfig) -> float:
    """One optimizer update on an augmented batch; returns the batch loss."""
    warm = state.step < cfg.warmup_linear_steps
    losses = []
    for window, future, shift, ids in batch:
        if warm:
            result = model.forward_linear(window)
        else:
            result = model.forward(window, series_ids=ids, shift=shift,
                                   training=True, rng=state.dropout_rng)
        loss = mse_loss(result.forecast, np.asarray(future,
                                                    result.forecast.data.dtype))
        if (not warm and cfg.context_loss_weight > 0
                and model.config.variant == "ictsp"):
            extra = _context_loss(result, model.config.lookback)
            if extra is not None:
                loss = loss + cfg.context_loss_weight * extra
        losses.append(loss)
    total = mean_of(losses)
    if not np.isfinite(total.data):
        raise TrainingError(f"non-finite training loss {float(total.data)} "
                            f"at step {state.step}")
    total.backward()
    grads = collect_grads(state.params)
    adam_step(state.adam, state.params, grads,
              lr_at_step(state.adam.t + 1, cfg))
    for p in state.params:
        p.grad = None
    state.step += 1
    return float(total.data)


def evaluate(forecaster, frame: SeriesFrame, split: str, horizon: int,
             stride: int = 1, mask_visible: int | None = None
             ) -> tuple[float, float]:
    """(MSE, MAE) over every stride-spaced forecast window in a split.

    The forecast origin walks the split; each input window is the `input_len`
    steps before the origin (earlier splits may be visible there, the future
    never is). Metrics average over all windows, channels, and steps on the
    frame's standardized scale.
    """
    if horizon != forecaster.horizon:
        raise ConfigError(f"evaluate called with horizon {horizon} but the "
                          f"forecaster predicts {forecaster.horizon}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    lo, hi = frame.split_bounds(split)
    input_len = forecaster.input_len
    first = max(lo, input_len)
    origins = range(first, hi - horizon + 1, stride)
    sq_sum, abs_sum, count = 0.0, 0.0, 0
    for t in origins:
        window = frame.values[:, t - input_len:t]
        if mask_visible is not None:
            window = mask_history(window, mask_visible)
        err = forecaster.predict(window) - frame.values[:, t:t + horizon]
        sq_sum += float(np.sum(err * err))
        abs_sum += float(np.sum(np.abs(err)))
        count += err.size
    if count == 0:
        raise ExperimentError(
            f"split {split!r} ({lo}:{hi}) has no complete "
            f"{input_len}+{horizon} window", reason="no-evaluation-windows")
    return sq_sum / count, abs_sum / count


class RepeatLastBaseline:
    """Holds each channel's final observed value across the horizon."""

    def __init__(self, input_len: int, horizon: int):
        self.input_len = input_len
        self.horizon = horizon

    def predict(self, window) -> np.ndarray:
        window = np.asarray(window)
        return np.repeat(window[:, -1:], self.horizon, axis=1)


def fit(model: ICTSPModel, frame: SeriesFrame, cfg: TrainConfig,
        history_path=None, eval_hook=None) -> FitResult:
    """Train with periodic validation and patience-based early stopping.

    The model is left holding the best-validation parameters. `eval_hook`,
    when given, is called as eval_hook(step, model) right after each
    validation pass (used by the architecture comparison to trace test loss).
    """
    input_len, horizon = model.input_len, model.horizon
    if frame.train_end < input_len + horizon:
        raise ExperimentError(
            f"train slice has {frame.train_end} steps; need at least "
            f"{input_len + horizon}", reason="train-slice-too-short")
    state = new_train_state(model, cfg)
    history: list[HistoryRow] = []
    best_snapshot = [p.data.copy() for p in state.params]
    best_step, best_mae = 0, float("inf")
    interval_losses: list[float] = []
    stopped_early = False
    while state.step < cfg.max_steps:
        batch = sample_batch(frame, input_len, horizon, cfg.batch_size,
                             state.data_rng)
        batch = augment_batch(batch, model.config, cfg, state.aug_rng)
        interval_losses.append(train_step(model, batch, state, cfg))
        if state.step % cfg.eval_interval != 0:
            continue
        val_mse, val_mae = evaluate(model, frame, "val", horizon,
                                    stride=cfg.val_stride)
        history.append(HistoryRow(
            step=state.step, lr=lr_at_step(state.step, cfg),
            train_loss=float(np.mean(interval_losses)),
            val_mse=val_mse, val_mae=val_mae))
        interval_losses = []
        if eval_hook is not None:
            eval_hook(state.step, model)
        if val_mse < state.best_val:
            state.best_val = val_mse
            best_mae = val_mae
            best_step = state.step
            best_snapshot = [p.data.copy() for p in state.params]
            state.evals_since_best = 0
        else:
            state.evals_since_best += 1
            if state.evals_since_best >= cfg.patience:
                stopped_early = True
                break
    for p, data in zip(state.params, best_snapshot):
        p.data = data
    if history_path is not None:
        write_history(history, history_path)
    return FitResult(history=history, best_step=best_step,
                     best_val_mse=state.best_val, best_val_mae=best_mae,
                     steps_run=state.step, stopped_early=stopped_early)


def write_history(history: list[HistoryRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "train_loss", "val_mse", "val_mae"])
        for row in history:
            writer.writerow([row.step, repr(row.lr), repr(row.train_loss),
                             repr(row.val_mse), repr(row.val_mae)])
