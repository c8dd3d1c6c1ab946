"""Token retrieval: keep the context tokens most similar to the targets.

Every token is projected to a small latent vector by a learned affine map.
Context tokens are scored by their cosine similarity to the target tokens'
latents, averaged over targets, and ranked. The top fraction survives
verbatim; everything else is squeezed into a fixed number of merged summary
tokens, each a softmax-weighted average of one contiguous rank group, with
the tokens' own similarity scores as the merge logits.

Selection is discrete, so no gradient crosses the ranking itself; the
projection still trains through the merge weights, which depend on the
similarity scores smoothly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import (
    Tensor,
    affine,
    as_tensor,
    clamp_min,
    concat_cols,
    gather,
    grouped_merge,
    matmul,
    no_grad,
    sqrt,
    take_cols,
    tensor_mean,
    tensor_sum,
    transpose,
)
from .tokenizer import (
    KIND_MERGED,
    KIND_TARGET,
    TokenMatrix,
    TokenMeta,
    floor_fraction,
)

# squared-norm floor; keeps zero-norm latents at similarity 0 with finite grads
_NORM_FLOOR = 1e-24


@dataclass(frozen=True)
class RetrievalConfig:
    """Latent size, keep fraction, merged-token budget, and the on/off switch."""

    latent_dim: int = 16
    keep_fraction: float = 0.10
    n_merged: int = 30
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError(f"keep_fraction must be in (0, 1], got "
                              f"{self.keep_fraction}")
        if self.n_merged < 0:
            raise ConfigError(f"n_merged must be >= 0, got {self.n_merged}")


def _check_projection(weight: Tensor, bias: Tensor, latent_dim: int,
                      token_length: int) -> None:
    if weight.data.shape != (latent_dim, token_length):
        raise ShapeError(
            f"retrieval weight must be [{latent_dim} x {token_length}], got "
            f"{weight.data.shape}")
    if bias.data.shape != (latent_dim,):
        raise ShapeError(f"retrieval bias must be [{latent_dim}], got "
                         f"{bias.data.shape}")


def average_similarities(tm: TokenMatrix, weight, bias) -> tuple[list[int], Tensor]:
    """Mean cosine similarity of each context token's latent to the targets'.

    Returns the context column indices (ascending) and a [n_context] score
    tensor aligned with them. Differentiable in the projection weights.
    """
    weight, bias = as_tensor(weight), as_tensor(bias)
    _check_projection(weight, bias, weight.data.shape[0], tm.token_length)
    ctx_cols = tm.context_columns()
    tgt_cols = tm.target_columns()
    if not tgt_cols:
        raise ConfigError("token matrix has no target tokens to score against")
    tokens = as_tensor(tm.values)
    latents = affine(weight, tokens, bias)
    sq_norm = tensor_sum(latents * latents, axis=0)
    unit = latents / sqrt(clamp_min(sq_norm, _NORM_FLOOR))
    cosines = matmul(transpose(take_cols(unit, ctx_cols)),
                     take_cols(unit, tgt_cols))
    return ctx_cols, tensor_mean(cosines, axis=1)


def _ranked(ctx_cols: list[int], scores: np.ndarray) -> list[int]:
    """Context columns sorted by score descending, lower column on ties."""
    order = np.lexsort((np.arange(len(ctx_cols)), -scores))
    return [ctx_cols[i] for i in order]


def retrieve_tokens(tm: TokenMatrix, cfg: RetrievalConfig, weight,
                    bias) -> TokenMatrix:
    """Reduce a token matrix to kept + merged context tokens plus targets.

    Output layout: surviving context tokens in their original column order,
    then merged tokens in rank order (best group first), then the targets.
    With keep_fraction=1.0, or with retrieval disabled, the matrix passes
    through unchanged. When fewer leftovers than `n_merged` exist, each
    leftover becomes its own merged token.
    """
    if not cfg.enabled:
        return tm
    ctx_cols = tm.context_columns()
    if not ctx_cols:
        return tm
    if any(tm.meta[c].kind == KIND_MERGED for c in ctx_cols):
        raise ConfigError("token matrix was already reduced once")
    weight, bias = as_tensor(weight), as_tensor(bias)
    _check_projection(weight, bias, cfg.latent_dim, tm.token_length)

    ctx_cols, sims = average_similarities(tm, weight, bias)
    tgt_cols = tm.target_columns()
    per_series: dict[int, int] = {}
    for c in ctx_cols:
        per_series[tm.meta[c].series] = per_series.get(tm.meta[c].series, 0) + 1
    n_keep = sum(floor_fraction(cfg.keep_fraction, n)
                 for n in per_series.values())

    ranked = _ranked(ctx_cols, sims.data)
    kept_set = set(ranked[:n_keep])
    kept_cols = [c for c in ctx_cols if c in kept_set]
    leftover = [c for c in ranked if c not in kept_set]

    meta = [tm.meta[c] for c in kept_cols]
    if not leftover or cfg.n_merged == 0:
        values = tm.values[:, kept_cols + tgt_cols]
        meta.extend(tm.meta[c] for c in tgt_cols)
        return TokenMatrix(tokens=values, meta=meta, lookback=tm.lookback,
                           horizon=tm.horizon, n_series=tm.n_series)

    n_groups = min(cfg.n_merged, len(leftover))
    sizes = [len(part) for part in np.array_split(np.arange(len(leftover)),
                                                  n_groups)]
    ctx_pos = {c: i for i, c in enumerate(ctx_cols)}
    tokens = as_tensor(tm.values)
    merged = grouped_merge(take_cols(tokens, leftover),
                           gather(sims, [ctx_pos[c] for c in leftover]),
                           sizes)
    parts = [merged, take_cols(tokens, tgt_cols)]
    if kept_cols:
        parts.insert(0, take_cols(tokens, kept_cols))
    out = concat_cols(parts)
    meta.extend([TokenMeta(KIND_MERGED, None, None)] * n_groups)
    meta.extend(tm.meta[c] for c in tgt_cols)
    return TokenMatrix(tokens=out, meta=meta, lookback=tm.lookback,
                       horizon=tm.horizon, n_series=tm.n_series)


def retrieval_count(cfg: RetrievalConfig, n_ctx_per_series: int,
                    n_series: int) -> int:
    """Context tokens remaining after retrieval (targets not included)."""
    if n_ctx_per_series < 0 or n_series < 1:
        raise ConfigError(f"invalid counts: {n_ctx_per_series} context per "
                          f"series, {n_series} series")
    kept = floor_fraction(cfg.keep_fraction, n_ctx_per_series) * n_series
    leftover = n_ctx_per_series * n_series - kept
    return kept + min(cfg.n_merged, leftover)


def similarities_to_csv(tm: TokenMatrix, weight, bias, path) -> None:
    """Diagnostic dump: one row per context token with its retrieval score."""
    with no_grad():
        ctx_cols, sims = average_similarities(tm, weight, bias)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["column", "kind", "series", "start", "offset",
                         "score"])
        for i, c in enumerate(ctx_cols):
            m = tm.meta[c]
            writer.writerow([c, m.kind,
                             "" if m.series is None else m.series,
                             "" if m.start is None else m.start,
                             repr(float(m.offset)),
                             repr(float(sims.data[i]))])
