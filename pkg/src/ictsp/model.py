"""The in-context forecaster and its two fixed-layout reference variants.

The main model ("ictsp") treats every (lookback, future) window pair as one
token: context tokens are solved examples, target tokens end in zero
placeholders, and a stack of full-attention Transformer layers fills the
placeholders in by looking at the examples. Forecasts are read from the
target tokens' output projections, so with every layer contribution zeroed
the network collapses to an exact per-channel linear predictor; that
reduction is a tested identity, not an approximation.

Two reference layouts share the same layer stack and differ only in what a
token is: "series_wise" uses one token per channel (the whole input plus a
zero tail), "temporal_wise" uses one token per time step (a channel vector,
zero-padded over the horizon). The temporal layout bakes the channel count
into its projection shapes, which is exactly the restriction the token-based
layout avoids; both facts are asserted in tests.

Each layer is
    U  = Z + Dropout(W_o . MHA(LN_1(Z)) + b_o)
    Z' = U + LN_2(W_2 . Dropout(GELU(W_1 U + b_1)) + b_2)
with the second residual taken from U, so zeroed blocks pass tokens through
untouched.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError
from .numerics import (
    Tensor,
    add_embeddings,
    affine,
    as_tensor,
    dropout,
    gelu,
    layer_norm,
    multi_head_attention,
    no_grad,
    rows_slice,
    take_cols,
    transpose,
)
from .retrieval import RetrievalConfig, retrieve_tokens
from .tokenizer import (
    KIND_CONTEXT,
    KIND_MERGED,
    KIND_TARGET,
    TokenMatrix,
    TokenMeta,
    build_tokens,
    position_indices,
    rationalize_tokens,
    series_indices,
)

VARIANTS = ("ictsp", "series_wise", "temporal_wise")
CHECKPOINT_FORMAT = 1
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and token-layout settings for one model instance."""

    variant: str = "ictsp"
    n_layers: int = 3
    d_model: int = 128
    n_heads: int = 8
    dropout: float = 0.5
    input_len: int = 1440
    lookback: int = 512
    horizon: int = 96
    stride: int = 8
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    c_max: int = 64
    n_channels: int | None = None  # temporal_wise only: frozen channel width
    context_enabled: bool = True
    rationalize: bool = True
    use_embeddings: bool = True
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected "
                              f"one of {VARIANTS}")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.d_model < 1 or self.n_heads < 1:
            raise ConfigError(f"d_model {self.d_model} and n_heads "
                              f"{self.n_heads} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by "
                              f"{self.n_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.input_len < 1 or self.horizon < 1:
            raise ConfigError(f"input_len {self.input_len} and horizon "
                              f"{self.horizon} must be >= 1")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got "
                              f"{self.dtype!r}")
        if self.variant == "ictsp":
            if self.lookback < 1 or self.stride < 1:
                raise ConfigError(f"lookback {self.lookback} and stride "
                                  f"{self.stride} must be >= 1")
            if self.context_enabled:
                if self.lookback + self.horizon > self.input_len:
                    raise ConfigError(
                        f"lookback {self.lookback} + horizon {self.horizon} "
                        f"exceed input length {self.input_len} with context "
                        f"enabled")
            elif self.lookback > self.input_len:
                raise ConfigError(f"lookback {self.lookback} exceeds input "
                                  f"length {self.input_len}")
        if self.variant in ("ictsp", "series_wise") and self.c_max < 1:
            raise ConfigError(f"c_max must be >= 1, got {self.c_max}")
        if self.variant == "temporal_wise":
            if self.n_channels is None or self.n_channels < 1:
                raise ConfigError("temporal_wise requires n_channels >= 1 "
                                  "fixed at construction")

    @property
    def token_length(self) -> int:
        """Feature length of one token column (also the output width)."""
        if self.variant == "ictsp":
            return self.lookback + self.horizon
        if self.variant == "series_wise":
            return self.input_len + self.horizon
        return self.n_channels

    @property
    def n_position_rows(self) -> int:
        """Position-table rows: one per context recency rank plus the target slot."""
        free = (self.input_len - self.lookback - self.horizon
                if self.context_enabled else 0)
        return max(free, 0) + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        data = dict(data)
        data["retrieval"] = RetrievalConfig(**data["retrieval"])
        return ModelConfig(**data)


@dataclass
class LayerParams:
    """One Transformer layer's tensors, in naming order."""

    ln1_gain: Tensor
    ln1_bias: Tensor
    query_weight: Tensor
    query_bias: Tensor
    key_weight: Tensor
    key_bias: Tensor
    value_weight: Tensor
    value_bias: Tensor
    out_weight: Tensor
    out_bias: Tensor
    ffn1_weight: Tensor
    ffn1_bias: Tensor
    ffn2_weight: Tensor
    ffn2_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def named(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in (
            "ln1_gain", "ln1_bias", "query_weight", "query_bias",
            "key_weight", "key_bias", "value_weight", "value_bias",
            "out_weight", "out_bias", "ffn1_weight", "ffn1_bias",
            "ffn2_weight", "ffn2_bias", "ln2_gain", "ln2_bias")}


@dataclass
class AttentionRecord:
    """Head-averaged attention of one layer plus the tokens it ran over."""

    layer: int
    weights: np.ndarray
    meta: list[TokenMeta]


@dataclass
class ForwardResult:
    """One forward pass: the forecast plus everything tests and diagnostics need."""

    forecast: Tensor
    records: list[AttentionRecord]
    tokens: TokenMatrix
    outputs: Tensor


def tf_layer(z, params: LayerParams, n_heads: int, rate: float,
             rng: np.random.Generator | None, training: bool):
    """One layer: attention with a direct residual, then a normalized FFN add."""
    zn = layer_norm(z, params.ln1_gain, params.ln1_bias)
    mixed, attn = multi_head_attention(
        affine(params.query_weight, zn, params.query_bias),
        affine(params.key_weight, zn, params.key_bias),
        affine(params.value_weight, zn, params.value_bias),
        n_heads)
    u = z + dropout(affine(params.out_weight, mixed, params.out_bias),
                    rate, rng, training)
    hidden = dropout(gelu(affine(params.ffn1_weight, u, params.ffn1_bias)),
                     rate, rng, training)
    f = affine(params.ffn2_weight, hidden, params.ffn2_bias)
    return u + layer_norm(f, params.ln2_gain, params.ln2_bias), attn


class ICTSPModel:
    """Parameter container plus the forward paths for all three layouts.

    Parameters are created in `named_parameters` order from a single seeded
    stream, so a (config, seed) pair pins the initialization bit-for-bit.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self._dtype = _DTYPES[config.dtype]
        rng = np.random.default_rng(seed)
        d = config.d_model
        t = config.token_length

        def weight(rows, cols, fan_in):
            data = rng.normal(scale=1.0 / np.sqrt(fan_in), size=(rows, cols))
            return Tensor(data.astype(self._dtype), requires_grad=True)

        def vector(size, value=0.0):
            return Tensor(np.full(size, value, dtype=self._dtype),
                          requires_grad=True)

        def table(rows):
            data = 0.02 * rng.normal(size=(rows, d))
            return Tensor(data.astype(self._dtype), requires_grad=True)

        self.input_weight = weight(d, t, t)
        self.input_bias = vector(d)
        self.layers: list[LayerParams] = []
        for _ in range(config.n_layers):
            self.layers.append(LayerParams(
                ln1_gain=vector(d, 1.0), ln1_bias=vector(d),
                query_weight=weight(d, d, d), query_bias=vector(d),
                key_weight=weight(d, d, d), key_bias=vector(d),
                value_weight=weight(d, d, d), value_bias=vector(d),
                out_weight=weight(d, d, d), out_bias=vector(d),
                ffn1_weight=weight(4 * d, d, d), ffn1_bias=vector(4 * d),
                ffn2_weight=weight(d, 4 * d, 4 * d), ffn2_bias=vector(d),
                ln2_gain=vector(d, 1.0), ln2_bias=vector(d)))
        self.output_weight = weight(t, d, d)
        self.output_bias = vector(t)
        self.series_embedding = None
        self.position_embedding = None
        self.temporal_embedding = None
        if config.use_embeddings:
            if config.variant in ("ictsp", "series_wise"):
                self.series_embedding = table(config.c_max)
            if config.variant == "ictsp":
                self.position_embedding = table(config.n_position_rows)
            if config.variant == "temporal_wise":
                self.temporal_embedding = table(config.input_len
                                                + config.horizon)
        self.retrieval_weight = None
        self.retrieval_bias = None
        if config.variant == "ictsp" and config.retrieval.enabled:
            self.retrieval_weight = weight(config.retrieval.latent_dim, t, t)
            self.retrieval_bias = vector(config.retrieval.latent_dim)

    @property
    def input_len(self) -> int:
        return self.config.input_len

    @property
    def horizon(self) -> int:
        return self.config.horizon

    # -- parameter registry ---------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {
            "input_weight": self.input_weight,
            "input_bias": self.input_bias,
        }
        for i, layer in enumerate(self.layers):
            for name, p in layer.named().items():
                out[f"layers.{i}.{name}"] = p
        out["output_weight"] = self.output_weight
        out["output_bias"] = self.output_bias
        for name in ("series_embedding", "position_embedding",
                     "temporal_embedding", "retrieval_weight",
                     "retrieval_bias"):
            p = getattr(self, name)
            if p is not None:
                out[name] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    # -- token construction ----------------------------------------------

    def _cast_window(self, window) -> np.ndarray:
        window = np.asarray(window, dtype=self._dtype)
        if window.ndim != 2:
            raise ConfigError(f"window must be [channels x steps], got shape "
                              f"{window.shape}")
        if window.shape[1] != self.config.input_len:
            raise ConfigError(f"window has {window.shape[1]} steps; model "
                              f"expects {self.config.input_len}")
        return window

    def _check_capacity(self, n_series: int) -> None:
        if n_series > self.config.c_max:
            raise CapacityError(f"{n_series} channels exceed the embedding "
                                f"capacity c_max={self.config.c_max}")

    def tokenize(self, window, shift: int = 0) -> TokenMatrix:
        """Window to reduced token matrix, before the network proper."""
        cfg = self.config
        if cfg.variant != "ictsp":
            raise ConfigError(f"tokenize applies to the ictsp layout, not "
                              f"{cfg.variant}")
        window = self._cast_window(window)
        self._check_capacity(window.shape[0])
        tm = build_tokens(window, cfg.lookback, cfg.horizon, cfg.stride,
                          shift, include_context=cfg.context_enabled)
        if cfg.rationalize:
            tm = rationalize_tokens(tm)
        if cfg.retrieval.enabled and cfg.context_enabled:
            tm = retrieve_tokens(tm, cfg.retrieval, self.retrieval_weight,
                                 self.retrieval_bias)
        return tm

    def _series_ids(self, n_series: int, series_ids) -> np.ndarray:
        if series_ids is None:
            return np.arange(n_series, dtype=np.intp)
        ids = np.asarray(series_ids, dtype=np.intp)
        if ids.shape != (n_series,):
            raise ConfigError(f"series_ids must have shape ({n_series},), "
                              f"got {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.c_max):
            raise ConfigError(f"series ids must lie in [0, "
                              f"{self.config.c_max}), got {ids.tolist()}")
        return ids

    # -- shared network core -----------------------------------------------

    def _core(self, tm: TokenMatrix, embed_pairs, training: bool,
              rng: np.random.Generator | None):
        x = affine(self.input_weight, as_tensor(tm.tokens), self.input_bias)
        if embed_pairs:
            x = add_embeddings(x, embed_pairs)
        records: list[AttentionRecord] = []
        for i, layer in enumerate(self.layers):
            x, attn = tf_layer(x, layer, self.config.n_heads,
                               self.config.dropout, rng, training)
            records.append(AttentionRecord(i, attn, list(tm.meta)))
        out = affine(self.output_weight, x, self.output_bias)
        return out, records

    def _readout_pairs(self, out, tm: TokenMatrix, first_row: int):
        """Forecast rows of the target tokens, de-rationalized, as [C x L_P]."""
        tcols = tm.target_columns()
        target_out = take_cols(out, tcols)
        forecast = transpose(rows_slice(target_out, first_row,
                                        first_row + tm.horizon))
        offsets = np.array([tm.meta[c].offset for c in tcols],
                           dtype=self._dtype)
        if np.any(offsets):
            forecast = forecast + offsets[:, None]
        return forecast

    # -- per-layout forward paths ----------------------------------------

    def forward_token_matrix(self, tm: TokenMatrix, series_ids=None,
                             training: bool = False,
                             rng: np.random.Generator | None = None
                             ) -> ForwardResult:
        """Run the ictsp network on an already-built token matrix."""
        cfg = self.config
        if cfg.variant != "ictsp":
            raise ConfigError(f"forward_token_matrix applies to the ictsp "
                              f"layout, not {cfg.variant}")
        pairs = []
        if cfg.use_embeddings:
            ids = self._series_ids(tm.n_series, series_ids)
            pairs = [(self.series_embedding, series_indices(tm, ids)),
                     (self.position_embedding,
                      position_indices(tm, cfg.n_position_rows))]
        out, records = self._core(tm, pairs, training, rng)
        forecast = self._readout_pairs(out, tm, cfg.lookback)
        return ForwardResult(forecast, records, tm, out)

    def _forward_ictsp(self, window, series_ids, shift, training, rng):
        tm = self.tokenize(window, shift)
        return self.forward_token_matrix(tm, series_ids, training, rng)

    def _forward_series_wise(self, window, series_ids, training, rng):
        cfg = self.config
        window = self._cast_window(window)
        self._check_capacity(window.shape[0])
        tm = build_tokens(window, cfg.input_len, cfg.horizon,
                          include_context=False)
        pairs = []
        if cfg.use_embeddings:
            ids = self._series_ids(tm.n_series, series_ids)
            pairs = [(self.series_embedding, series_indices(tm, ids))]
        out, records = self._core(tm, pairs, training, rng)
        forecast = self._readout_pairs(out, tm, cfg.input_len)
        return ForwardResult(forecast, records, tm, out)

    def _temporal_tokens(self, window: np.ndarray) -> TokenMatrix:
        cfg = self.config
        pad = np.zeros((window.shape[0], cfg.horizon), dtype=self._dtype)
        tokens = np.concatenate([window, pad], axis=1)
        meta = ([TokenMeta(KIND_CONTEXT, None, t) for t in
                 range(cfg.input_len)]
                + [TokenMeta(KIND_TARGET, None, cfg.input_len + i) for i in
                   range(cfg.horizon)])
        return TokenMatrix(tokens=tokens, meta=meta, lookback=cfg.input_len,
                           horizon=cfg.horizon, n_series=window.shape[0])

    def _forward_temporal_wise(self, window, training, rng):
        cfg = self.config
        window = self._cast_window(window)
        if window.shape[0] != cfg.n_channels:
            raise CapacityError(
                f"temporal_wise weights are shaped for {cfg.n_channels} "
                f"channels; got {window.shape[0]}")
        tm = self._temporal_tokens(window)
        pairs = []
        if cfg.use_embeddings:
            pairs = [(self.temporal_embedding,
                      np.arange(cfg.input_len + cfg.horizon, dtype=np.intp))]
        out, records = self._core(tm, pairs, training, rng)
        horizon_cols = list(range(cfg.input_len, cfg.input_len + cfg.horizon))
        return ForwardResult(take_cols(out, horizon_cols), records, tm, out)

    def forward(self, window, series_ids=None, shift: int = 0,
                training: bool = False,
                rng: np.random.Generator | None = None) -> ForwardResult:
        """Forecast the next `horizon` steps of every channel. [C x L_P]."""
        if self.config.variant == "ictsp":
            return self._forward_ictsp(window, series_ids, shift, training,
                                       rng)
        if self.config.variant == "series_wise":
            return self._forward_series_wise(window, series_ids, training,
                                             rng)
        return self._forward_temporal_wise(window, training, rng)

    def forward_linear(self, window, series_ids=None) -> ForwardResult:
        """Projection-only path: in/out affine maps on target tokens, no layers.

        This is the warm-up training objective and the reference the
        zeroed-block identity is checked against. Embeddings, attention,
        retrieval, and context tokens are all skipped.
        """
        cfg = self.config
        window = self._cast_window(window)
        if cfg.variant == "temporal_wise":
            if window.shape[0] != cfg.n_channels:
                raise CapacityError(
                    f"temporal_wise weights are shaped for {cfg.n_channels} "
                    f"channels; got {window.shape[0]}")
            tm = self._temporal_tokens(window)
            out = affine(self.output_weight,
                         affine(self.input_weight, as_tensor(tm.tokens),
                                self.input_bias),
                         self.output_bias)
            cols = list(range(cfg.input_len, cfg.input_len + cfg.horizon))
            return ForwardResult(take_cols(out, cols), [], tm, out)
        self._check_capacity(window.shape[0])
        if cfg.variant == "ictsp":
            tm = build_tokens(window, cfg.lookback, cfg.horizon,
                              include_context=False)
            if cfg.rationalize:
                tm = rationalize_tokens(tm)
            first_row = cfg.lookback
        else:
            tm = build_tokens(window, cfg.input_len, cfg.horizon,
                              include_context=False)
            first_row = cfg.input_len
        out = affine(self.output_weight,
                     affine(self.input_weight, as_tensor(tm.tokens),
                            self.input_bias),
                     self.output_bias)
        return ForwardResult(self._readout_pairs(out, tm, first_row), [], tm,
                             out)

    def predict(self, window, series_ids=None) -> np.ndarray:
        """Inference forecast as a plain [C x horizon] array (dropout off)."""
        with no_grad():
            return self.forward(window, series_ids).forecast.data.copy()

    # -- checkpointing ------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        header = json.dumps({"format_version": CHECKPOINT_FORMAT,
                             "config": self.config.to_dict()})
        arrays = {name: p.data for name, p in self.named_parameters().items()}
        # write through a handle so numpy cannot append its own extension
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(header), **arrays)

    @staticmethod
    def load_checkpoint(path) -> "ICTSPModel":
        with np.load(path) as bundle:
            if "__meta__" not in bundle:
                raise ConfigError(f"{path} is not a model checkpoint")
            header = json.loads(str(bundle["__meta__"][()]))
            if header.get("format_version") != CHECKPOINT_FORMAT:
                raise ConfigError(
                    f"checkpoint format {header.get('format_version')!r} "
                    f"not supported (expected {CHECKPOINT_FORMAT})")
            model = ICTSPModel(ModelConfig.from_dict(header["config"]))
            for name, p in model.named_parameters().items():
                if name not in bundle:
                    raise ConfigError(f"checkpoint missing parameter {name}")
                stored = bundle[name]
                if stored.shape != p.data.shape:
                    raise ConfigError(
                        f"checkpoint parameter {name} has shape "
                        f"{stored.shape}; model expects {p.data.shape}")
                p.data = stored.astype(model._dtype)
        return model


# -- free-function entry points ----------------------------------------------


def forward_ictsp(window, model: ICTSPModel, training: bool = False,
                  rng=None):
    """(forecast [C x L_P], attention records) for the token-pair layout."""
    result = model._forward_ictsp(window, None, 0, training, rng)
    return result.forecast, result.records


def forward_series_wise(window, model: ICTSPModel, training: bool = False,
                        rng=None):
    result = model._forward_series_wise(window, None, training, rng)
    return result.forecast, result.records


def forward_temporal_wise(window, model: ICTSPModel, training: bool = False,
                          rng=None):
    result = model._forward_temporal_wise(window, training, rng)
    return result.forecast, result.records


def linear_reduction_forecast(window, model: ICTSPModel) -> np.ndarray:
    """Forecast of the projection-only reduction, as a plain array."""
    with no_grad():
        return model.forward_linear(window).forecast.data.copy()


def count_parameters(model: ICTSPModel) -> int:
    """Trainable scalars actually registered on the model."""
    return sum(p.data.size for p in model.parameters())


def count_parameters_formula(config: ModelConfig) -> int:
    """Closed-form parameter count; must equal count_parameters exactly.

    in/out projections: 2*d*t + d + t. Per layer: QKVO (4d^2+4d), FFN with a
    4d hidden (8d^2+5d), two LayerNorms (4d), totalling 12d^2+13d. Embedding
    tables and the retrieval projection are added per layout.
    """
    d, t = config.d_model, config.token_length
    total = 2 * d * t + d + t
    total += config.n_layers * (12 * d * d + 13 * d)
    if config.use_embeddings:
        if config.variant in ("ictsp", "series_wise"):
            total += config.c_max * d
        if config.variant == "ictsp":
            total += config.n_position_rows * d
        if config.variant == "temporal_wise":
            total += (config.input_len + config.horizon) * d
    if config.variant == "ictsp" and config.retrieval.enabled:
        total += config.retrieval.latent_dim * (t + 1)
    return total


def export_attention(records: list[AttentionRecord], prefix) -> list[str]:
    """Write one CSV per layer: three meta header rows, then the matrix.

    Merged tokens make the column indices hard to map back to the input, so
    their presence triggers a warning (disable retrieval for clean exports).
    """
    import csv

    if any(m.kind == KIND_MERGED for r in records for m in r.meta):
        warnings.warn("attention export contains merged tokens; disable "
                      "retrieval for interpretable indices")
    paths = []
    for record in records:
        n = record.weights.shape[0]
        path = f"{prefix}_layer{record.layer}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            meta = record.meta
            writer.writerow(["kind"] + [m.kind for m in meta])
            writer.writerow(["series"] + ["" if m.series is None else m.series
                                          for m in meta])
            writer.writerow(["start"] + ["" if m.start is None else m.start
                                         for m in meta])
            for i in range(n):
                writer.writerow([f"t{i}"] + [repr(float(v))
                                             for v in record.weights[i]])
        paths.append(path)
    return paths
