"""Forecasting-task tokens: window slicing, rationalization, history masking.

A token is one forecasting example laid out as a length-(lookback + horizon)
column: `lookback` observed steps followed by the `horizon` steps that were
observed after them (context tokens) or by zero placeholders the model must
fill in (target tokens, one per channel).

Context tokens are sampled per channel with stride `m`, anchored at the most
recent complete window and walking backward, shifted by `r` in {0..m-1};
windows that would reach before the first step are dropped. With
N = L_I - L_b - L_P available start offsets, the sampled 0-based starts are
{N-1-r - i*m : i >= 0} intersected with [0, N-1]; the union over all r tiles
{0..N-1} exactly once, which is what makes the random shift augmentation an
unbiased coverage of every example.

Rationalization subtracts each token's final lookback value from the token
(placeholder zeros excluded), turning every example into a "change relative
to now" problem; the subtracted offset is recorded per token so forecasts can
be shifted back.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .numerics import Tensor

KIND_CONTEXT = "context"
KIND_TARGET = "target"
KIND_MERGED = "merged"


@dataclass(frozen=True)
class TokenMeta:
    """Provenance of one token column.

    `series` and `start` are None for merged summary tokens; `offset` is the
    rationalization shift that was subtracted (0.0 until rationalization).
    """

    kind: str
    series: int | None
    start: int | None
    offset: float = 0.0


@dataclass
class TokenMatrix:
    """Tokens as columns ([lookback+horizon x n_tokens]) plus their metadata.

    `tokens` is a plain ndarray outside the model and may be a `Tensor` while
    gradients flow through retrieval; `values` always yields the ndarray view.
    """

    tokens: np.ndarray | Tensor
    meta: list[TokenMeta]
    lookback: int
    horizon: int
    n_series: int

    @property
    def values(self) -> np.ndarray:
        return self.tokens.data if isinstance(self.tokens, Tensor) else self.tokens

    @property
    def n_tokens(self) -> int:
        return self.values.shape[1]

    @property
    def token_length(self) -> int:
        return self.lookback + self.horizon

    def columns_of_kind(self, kind: str) -> list[int]:
        return [i for i, m in enumerate(self.meta) if m.kind == kind]

    def target_columns(self) -> list[int]:
        """Target column per series, ordered by series index."""
        cols = [(m.series, i) for i, m in enumerate(self.meta)
                if m.kind == KIND_TARGET]
        return [i for _, i in sorted(cols)]

    def context_columns(self) -> list[int]:
        return [i for i, m in enumerate(self.meta) if m.kind != KIND_TARGET]


def n_context_per_series(input_len: int, lookback: int, horizon: int,
                         stride: int, shift: int = 0) -> int:
    """How many stride-sampled context windows fit in one channel."""
    _validate_geometry(input_len, lookback, horizon, stride, shift,
                       need_context=True)
    newest = input_len - lookback - horizon - 1 - shift
    return 0 if newest < 0 else newest // stride + 1


def context_starts(input_len: int, lookback: int, horizon: int,
                   stride: int, shift: int = 0) -> list[int]:
    """Ascending 0-based start offsets of the sampled context windows."""
    _validate_geometry(input_len, lookback, horizon, stride, shift,
                       need_context=True)
    newest = input_len - lookback - horizon - 1 - shift
    return list(range(newest % stride, newest + 1, stride)) if newest >= 0 else []


def _validate_geometry(input_len: int, lookback: int, horizon: int,
                       stride: int, shift: int, need_context: bool) -> None:
    if lookback < 1 or horizon < 1:
        raise ConfigError(f"lookback {lookback} and horizon {horizon} must be "
                          f">= 1")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if not 0 <= shift < stride:
        raise ConfigError(f"shift {shift} outside {{0..{stride - 1}}}")
    if need_context and lookback + horizon > input_len:
        raise ConfigError(
            f"lookback {lookback} + horizon {horizon} exceeds input length "
            f"{input_len}")
    if lookback > input_len:
        raise ConfigError(f"lookback {lookback} exceeds input length "
                          f"{input_len}")


def build_tokens(window: np.ndarray, lookback: int, horizon: int,
                 stride: int = 1, shift: int = 0,
                 include_context: bool = True) -> TokenMatrix:
    """Slice a [channels x input_len] window into task tokens.

    Layout: all context tokens first (channel-major, oldest to newest within
    a channel), then one target token per channel. Target tokens carry the
    last `lookback` observed steps plus `horizon` zero placeholders.
    """
    window = np.asarray(window)
    if window.ndim != 2:
        raise ConfigError(f"window must be [channels x steps], got shape "
                          f"{window.shape}")
    n_series, input_len = window.shape
    _validate_geometry(input_len, lookback, horizon, stride, shift,
                       need_context=include_context)
    starts = (context_starts(input_len, lookback, horizon, stride, shift)
              if include_context else [])
    length = lookback + horizon
    columns: list[np.ndarray] = []
    meta: list[TokenMeta] = []
    for j in range(n_series):
        for s in starts:
            columns.append(window[j, s:s + length])
            meta.append(TokenMeta(KIND_CONTEXT, j, s))
    pad = np.zeros(horizon, dtype=window.dtype)
    for j in range(n_series):
        columns.append(np.concatenate([window[j, input_len - lookback:], pad]))
        meta.append(TokenMeta(KIND_TARGET, j, input_len - lookback))
    tokens = np.stack(columns, axis=1)
    return TokenMatrix(tokens=tokens, meta=meta, lookback=lookback,
                       horizon=horizon, n_series=n_series)


def rationalize_tokens(tm: TokenMatrix) -> TokenMatrix:
    """Subtract each token's last lookback value; record it in the metadata.

    Target placeholder zeros are left untouched. Applying this twice is a
    no-op (all offsets become 0 on the second pass).
    """
    if isinstance(tm.tokens, Tensor):
        raise ConfigError("rationalize operates on raw ndarray tokens")
    tokens = tm.tokens.copy()
    meta: list[TokenMeta] = []
    for i, m in enumerate(tm.meta):
        shift = float(tokens[tm.lookback - 1, i])
        if m.kind == KIND_TARGET:
            tokens[:tm.lookback, i] -= shift
        else:
            tokens[:, i] -= shift
        meta.append(replace(m, offset=m.offset + shift))
    return TokenMatrix(tokens=tokens, meta=meta, lookback=tm.lookback,
                       horizon=tm.horizon, n_series=tm.n_series)


def mask_history(window: np.ndarray, visible: int) -> np.ndarray:
    """Zero-fill all steps older than the trailing `visible` ones.

    Fairness device for comparing against short-context models: the window
    keeps its full length, but only the most recent `visible` steps carry
    data. `visible >= len` returns the window unchanged (a copy).
    """
    window = np.asarray(window)
    if window.ndim != 2:
        raise ConfigError(f"window must be [channels x steps], got "
                          f"{window.shape}")
    if visible < 1:
        raise ConfigError(f"visible must be >= 1, got {visible}")
    out = window.copy()
    cut = max(window.shape[1] - visible, 0)
    out[:, :cut] = 0.0
    return out


def floor_fraction(fraction: float, count: int) -> int:
    """floor(fraction * count) with a guard against float representation."""
    return int(fraction * count + 1e-9)


def count_context_tokens(input_len: int, lookback: int, horizon: int,
                         stride: int, n_series: int, keep_fraction: float,
                         n_merged: int) -> tuple[int, int]:
    """(pre-retrieval, post-retrieval) context token counts at shift 0.

    Post-retrieval = floor(keep_fraction * per-series count) * n_series kept
    tokens plus up to `n_merged` merged summaries (fewer when fewer remain).
    Must agree with actually running build + retrieve; the retrieval oracle
    tests hold both to that.
    """
    if n_series < 1:
        raise ConfigError(f"n_series must be >= 1, got {n_series}")
    if not 0.0 <= keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must be in [0, 1], got "
                          f"{keep_fraction}")
    if n_merged < 0:
        raise ConfigError(f"n_merged must be >= 0, got {n_merged}")
    per_series = n_context_per_series(input_len, lookback, horizon, stride)
    pre = per_series * n_series
    kept = floor_fraction(keep_fraction, per_series) * n_series
    post = kept + min(n_merged, pre - kept)
    return pre, post


def position_indices(tm: TokenMatrix, n_positions: int) -> np.ndarray:
    """Recency-rank position index per token for the embedding table.

    Context tokens get their rank among the same channel's retained starts
    (0 = oldest); targets get the dedicated last row; merged tokens get -1
    (no position embedding; they summarize many positions).
    """
    per_series_starts: dict[int, list[int]] = {}
    for m in tm.meta:
        if m.kind == KIND_CONTEXT:
            per_series_starts.setdefault(m.series, []).append(m.start)
    ranks = {
        series: {s: i for i, s in enumerate(sorted(starts))}
        for series, starts in per_series_starts.items()
    }
    out = np.empty(len(tm.meta), dtype=np.intp)
    for i, m in enumerate(tm.meta):
        if m.kind == KIND_TARGET:
            out[i] = n_positions - 1
        elif m.kind == KIND_CONTEXT:
            rank = ranks[m.series][m.start]
            if rank >= n_positions - 1:
                raise ConfigError(
                    f"context rank {rank} exceeds position table with "
                    f"{n_positions} rows")
            out[i] = rank
        else:
            out[i] = -1
    return out


def series_indices(tm: TokenMatrix, series_ids) -> np.ndarray:
    """Embedding-table row per token from per-channel ids; merged rows get -1."""
    series_ids = np.asarray(series_ids, dtype=np.intp)
    if series_ids.shape != (tm.n_series,):
        raise ConfigError(f"need one id per channel ({tm.n_series}), got "
                          f"shape {series_ids.shape}")
    out = np.empty(len(tm.meta), dtype=np.intp)
    for i, m in enumerate(tm.meta):
        out[i] = -1 if m.series is None else series_ids[m.series]
    return out


def tokens_to_csv(tm: TokenMatrix, path) -> None:
    """Debug dump: one token per row, metadata columns first."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "series", "start", "offset"]
                        + [f"v{i}" for i in range(tm.token_length)])
        values = tm.values
        for i, m in enumerate(tm.meta):
            writer.writerow([m.kind,
                             "" if m.series is None else m.series,
                             "" if m.start is None else m.start,
                             repr(float(m.offset))]
                            + [repr(float(v)) for v in values[:, i]])
