"""Reverse-mode automatic differentiation on numpy arrays, plus Adam.

Everything downstream (tokenizer, retrieval, the transformer itself) runs on
the `Tensor` defined here: a numpy array with an optional gradient, a tuple of
parent tensors and a backward closure. Calling `backward()` on a scalar loss
topologically sorts the tape and accumulates gradients into every tensor that
`requires_grad`.

Conventions:
  * Latent matrices are laid out [features x tokens]; biases are 1-D and
    broadcast across token columns inside `affine`.
  * All randomness (dropout masks) comes from an explicit numpy Generator
    argument; no op touches global RNG state, so runs are bit-reproducible.
  * Ops preserve the input dtype. Tests run float64; training may run float32.

Heavy inner loops (attention, grouped merging, layer norm) are fused single
tape nodes with hand-written backward rules; `check_gradients` verifies every
rule against central finite differences.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError

_FLOAT_DTYPES = (np.float32, np.float64)

# Module-level switch so inference can skip tape construction entirely.
_GRAD_MODE = [True]


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference mode)."""
    _GRAD_MODE.append(False)
    try:
        yield
    finally:
        _GRAD_MODE.pop()


def _tracing() -> bool:
    return _GRAD_MODE[-1]


class Tensor:
    """A numpy array plus reverse-mode gradient bookkeeping.

    `data` holds the value, `grad` the accumulated gradient (same shape as
    `data` once backward has run), `_parents` the tensors this one was
    computed from and `_backward` the closure that routes an incoming
    gradient to those parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- gradient plumbing ---------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def t(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tensor_mean(self, axis)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap `data` as a tape node if tracing and any parent needs gradients."""
    if _tracing() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def collect_grads(params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradient per parameter; parameters absent from the graph get exact 0."""
    return [p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in params]


# -- elementwise and shape ops ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def _bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), _bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def _bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data),
                                    b.data.shape))

    return _node(out, (a, b), _bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def _bw(g):
        _accumulate(a, g / (2.0 * out))

    return _node(out, (a,), _bw)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes where a >= floor, else 0."""
    a = as_tensor(a)
    out = np.maximum(a.data, floor)

    def _bw(g):
        _accumulate(a, g * (a.data >= floor))

    return _node(out, (a,), _bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def _bw(g):
        _accumulate(a, g.T)

    return _node(a.data.T.copy(), (a,), _bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def _bw(g):
        _accumulate(a, g.reshape(old))

    return _node(a.data.reshape(shape).copy(), (a,), _bw)


def tensor_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def _bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis),
                                           a.data.shape).copy())

    return _node(out, (a,), _bw)


def tensor_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def _bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.data.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g / count, axis),
                                           a.data.shape).copy())

    return _node(out, (a,), _bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(out, (a, b), _bw)


def affine(weight, x, bias) -> Tensor:
    """weight @ x + bias[:, None]: one fused node per linear layer."""
    weight, x, bias = as_tensor(weight), as_tensor(x), as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"affine expects a 2-D input, got {x.data.shape}")
    if weight.data.shape[1] != x.data.shape[0]:
        raise ShapeError(
            f"affine: weight {weight.data.shape} incompatible with input "
            f"{x.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(
            f"affine: bias {bias.data.shape} must be ({weight.data.shape[0]},)"
        )
    out = weight.data @ x.data + bias.data[:, None]

    def _bw(g):
        if weight.requires_grad:
            _accumulate(weight, g @ x.data.T)
        if x.requires_grad:
            _accumulate(x, weight.data.T @ g)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=1))

    return _node(out, (weight, x, bias), _bw)


def take_cols(a, idx) -> Tensor:
    """Select columns by integer index array (differentiable gather)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[:, idx].copy()

    def _bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (slice(None), idx), g)
            _accumulate(a, full)

    return _node(out, (a,), _bw)


def rows_slice(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    out = a.data[start:stop].copy()

    def _bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            _accumulate(a, full)

    return _node(out, (a,), _bw)


def gather(vec, idx) -> Tensor:
    """1-D gather: vec[idx]."""
    vec = as_tensor(vec)
    idx = np.asarray(idx, dtype=np.intp)
    out = vec.data[idx].copy()

    def _bw(g):
        if vec.requires_grad:
            full = np.zeros_like(vec.data)
            np.add.at(full, idx, g)
            _accumulate(vec, full)

    return _node(out, (vec,), _bw)


def concat_cols(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]

    def _bw(g):
        offset = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[:, offset:offset + w])
            offset += w

    return _node(out, tuple(parts), _bw)


def mean_of(losses: Sequence) -> Tensor:
    """Mean of scalar tensors (batch-loss reduction as a single node)."""
    losses = [as_tensor(x) for x in losses]
    out = np.asarray(sum(x.data.reshape(()) for x in losses) / len(losses))

    def _bw(g):
        share = g / len(losses)
        for x in losses:
            _accumulate(x, np.reshape(share, x.data.shape))

    return _node(out, tuple(losses), _bw)


# -- neural-net ops ----------------------------------------------------------


def softmax_rows(a) -> Tensor:
    """Row-stabilized softmax; rows of the result sum to 1.

    1-D input is treated as a single row and returned 1-D.
    """
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(a, out * (g - inner))

    return _node(out, (a,), _bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each column (token) over features; population variance.

    1-D input is treated as a single column. `gamma` and `beta` are 1-D of
    length d (the feature dimension) and scale/shift the normalized values.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    vec_in = x.data.ndim == 1
    data = x.data[:, None] if vec_in else x.data
    if data.ndim != 2:
        raise ShapeError(f"layer_norm expects 1-D or 2-D input, got {x.data.shape}")
    d = data.shape[0]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({d},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    mu = data.mean(axis=0)
    var = data.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (data - mu) * inv
    out = gamma.data[:, None] * xhat + beta.data[:, None]
    if vec_in:
        out = out[:, 0]

    def _bw(g):
        g2 = g[:, None] if vec_in else g
        if gamma.requires_grad:
            _accumulate(gamma, (g2 * xhat).sum(axis=1))
        if beta.requires_grad:
            _accumulate(beta, g2.sum(axis=1))
        if x.requires_grad:
            dxhat = g2 * gamma.data[:, None]
            dx = inv * (dxhat
                        - dxhat.mean(axis=0)
                        - xhat * (dxhat * xhat).mean(axis=0))
            _accumulate(x, dx[:, 0] if vec_in else dx)

    return _node(out, (x, gamma, beta), _bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-form GELU (smooth, so finite-difference checks stay clean)."""
    a = as_tensor(a)
    x = a.data
    sq = x * x
    inner = _GELU_C * (x + 0.044715 * (sq * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def _bw(g):
        sech2 = 1.0 - th * th
        d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * sq)
        _accumulate(a, g * d)

    return _node(out, (a,), _bw)


def dropout(a, rate: float, rng: np.random.Generator | None,
            training: bool) -> Tensor:
    """Inverted dropout: mask then rescale by 1/(1-rate). Identity at inference.

    The mask is drawn from the explicit `rng` stream exactly once per call, so
    a fixed seed reproduces training bit-for-bit.
    """
    a = as_tensor(a)
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ConfigError("dropout in training mode needs an RNG stream")
    keep = rng.random(a.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = a.data * keep * scale

    def _bw(g):
        _accumulate(a, g * keep * scale)

    return _node(out, (a,), _bw)


def multi_head_attention(q, k, v, n_heads: int):
    """Full (unmasked) scaled dot-product attention over token columns.

    q, k, v: [d x n]. Rows are split into `n_heads` contiguous blocks of
    d/n_heads features. Returns (output [d x n], head-averaged attention
    [n x n] as a plain ndarray for diagnostics; its rows sum to 1).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d, n = q.data.shape
    if k.data.shape != (d, n) or v.data.shape != (d, n):
        raise ShapeError(
            f"attention operands disagree: {q.data.shape}, {k.data.shape}, "
            f"{v.data.shape}"
        )
    if d % n_heads != 0:
        raise ShapeError(f"feature dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    qh = q.data.reshape(n_heads, dh, n)
    kh = k.data.reshape(n_heads, dh, n)
    vh = v.data.reshape(n_heads, dh, n)
    scale = 1.0 / math.sqrt(dh)
    scores = np.matmul(qh.transpose(0, 2, 1), kh) * scale  # [h, n, n]
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(vh, attn.transpose(0, 2, 1)).reshape(d, n)
    attn_avg = attn.mean(axis=0)

    def _bw(g):
        gh = g.reshape(n_heads, dh, n)
        if v.requires_grad:
            _accumulate(v, np.matmul(gh, attn).reshape(d, n))
        if q.requires_grad or k.requires_grad:
            dattn = np.matmul(gh.transpose(0, 2, 1), vh)  # [h, n, n]
            ds = attn * (dattn - (attn * dattn).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                _accumulate(q, (np.matmul(kh, ds.transpose(0, 2, 1)) * scale
                                ).reshape(d, n))
            if k.requires_grad:
                _accumulate(k, (np.matmul(qh, ds) * scale).reshape(d, n))

    return _node(out, (q, k, v), _bw), attn_avg


def add_embeddings(z, pairs) -> Tensor:
    """Add table rows to latent columns: z[:, i] += table[idx[i]] per pair.

    `pairs` is a sequence of (table [rows x d], idx array of length n); index
    -1 skips that column. One fused node keeps the tape small.
    """
    z = as_tensor(z)
    d, n = z.data.shape
    resolved: list[tuple[Tensor, np.ndarray, np.ndarray]] = []
    out = z.data.copy()
    for table, idx in pairs:
        table = as_tensor(table)
        idx = np.asarray(idx, dtype=np.intp)
        if idx.shape != (n,):
            raise ShapeError(f"embedding index must have length {n}")
        active = idx >= 0
        if idx[active].size and idx[active].max() >= table.data.shape[0]:
            raise ShapeError(
                f"embedding index {idx[active].max()} outside table with "
                f"{table.data.shape[0]} rows"
            )
        out[:, active] += table.data[idx[active]].T
        resolved.append((table, idx, active))

    def _bw(g):
        _accumulate(z, g)
        for table, idx, active in resolved:
            if table.requires_grad:
                gt = np.zeros_like(table.data)
                np.add.at(gt, idx[active], g[:, active].T)
                _accumulate(table, gt)

    return _node(out, (z,) + tuple(t for t, _, _ in resolved), _bw)


def grouped_merge(tokens, logits, sizes: Sequence[int]) -> Tensor:
    """Merge contiguous column groups by softmax-weighted average.

    tokens: [L x p] columns already arranged so each group is contiguous;
    logits: [p] merge scores; sizes: group widths summing to p. Returns
    [L x len(sizes)]; column g = sum_j softmax(logits_g)_j * tokens_g[:, j].
    """
    tokens, logits = as_tensor(tokens), as_tensor(logits)
    p = tokens.data.shape[1]
    if logits.data.shape != (p,):
        raise ShapeError(f"merge logits must have shape ({p},)")
    if sum(sizes) != p or any(s <= 0 for s in sizes):
        raise ShapeError(f"group sizes {list(sizes)} do not partition {p} columns")
    bounds = np.cumsum([0] + list(sizes))
    out = np.empty((tokens.data.shape[0], len(sizes)), dtype=tokens.data.dtype)
    alphas: list[np.ndarray] = []
    for g_i in range(len(sizes)):
        lo, hi = bounds[g_i], bounds[g_i + 1]
        seg = logits.data[lo:hi]
        e = np.exp(seg - seg.max())
        alpha = e / e.sum()
        alphas.append(alpha)
        out[:, g_i] = tokens.data[:, lo:hi] @ alpha

    def _bw(g):
        dt = np.zeros_like(tokens.data) if tokens.requires_grad else None
        dl = np.zeros_like(logits.data) if logits.requires_grad else None
        for g_i, alpha in enumerate(alphas):
            lo, hi = bounds[g_i], bounds[g_i + 1]
            gcol = g[:, g_i]
            if dt is not None:
                dt[:, lo:hi] = gcol[:, None] * alpha[None, :]
            if dl is not None:
                proj = tokens.data[:, lo:hi].T @ gcol       # [size]
                dl[lo:hi] = alpha * (proj - alpha @ proj)
        if dt is not None:
            _accumulate(tokens, dt)
        if dl is not None:
            _accumulate(logits, dl)

    return _node(out, (tokens, logits), _bw)


def mse_loss(pred, target) -> Tensor:
    """Mean squared error against a constant target array (scalar node)."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise ShapeError(
            f"mse_loss shapes differ: {pred.data.shape} vs {target.shape}"
        )
    diff = pred.data - target
    out = np.asarray((diff * diff).mean())

    def _bw(g):
        _accumulate(pred, (2.0 / diff.size) * diff * g)

    return _node(out, (pred,), _bw)


# -- optimizer ---------------------------------------------------------------


class AdamState:
    """Adam moments for an ordered parameter list, plus the shared step count."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(state: AdamState, params: Sequence[Tensor],
              grads: Sequence[np.ndarray], lr: float):
    """One bias-corrected Adam update, in place. Returns (params, state).

    Zero gradient with zero moments leaves a parameter bitwise unchanged, so
    frozen parameters can simply receive zero gradients.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, state for "
            f"{len(state.m)}"
        )
    for i, g in enumerate(grads):
        if g.shape != params[i].data.shape:
            raise ShapeError(
                f"adam_step: grad {i} shape {g.shape} != param shape "
                f"{params[i].data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {i}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- finite-difference verification -------------------------------------------


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = 1e-5) -> float:
    """Max relative error of backward gradients vs central differences.

    `f` rebuilds the scalar loss from the live `params` on every call. The
    relative error is taken over entries whose analytic gradient exceeds
    1e-8 in magnitude; run in float64 for meaningful results.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = collect_grads(params)
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            if abs(aflat[i]) <= 1e-8:
                continue
            saved = flat[i]
            flat[i] = saved + h
            with no_grad():
                fp = f().item()
            flat[i] = saved - h
            with no_grad():
                fm = f().item()
            flat[i] = saved
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(aflat[i] - numeric) / abs(aflat[i]))
    return worst
