"""Dense float64 tensors with reverse-mode autodiff and MAC instrumentation.

Operations build a dynamic graph while gradients are enabled; ``backward``
walks it in reverse topological order with a deterministic accumulation
order, so repeated runs are bitwise identical.  Every op validates that its
output is finite (NaN/Inf raises ``NonFiniteError``).  Matrix multiplies
report multiply-accumulate counts to the active ``MacCounter``, which is
what the attention cost model is validated against.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .rng import Rng


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


# ---------------------------------------------------------------------------
# MAC counting


class MacCounter:
    """Counts multiply-accumulates of matmuls executed while active.

    A disabled counter can stay active without recording anything.  Totals
    are plain integers, so equality with analytic formulas is exact.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.total_macs = 0
        self.per_label: dict[str, int] = {}

    def add(self, label: str, n: int) -> None:
        if not self.enabled:
            return
        self.total_macs += n
        self.per_label[label] = self.per_label.get(label, 0) + n

    def reset(self) -> None:
        self.total_macs = 0
        self.per_label = {}

    def prefix_total(self, *prefixes: str) -> int:
        return sum(n for label, n in self.per_label.items()
                   if any(label.startswith(p) for p in prefixes))

    def __enter__(self) -> "MacCounter":
        global _ACTIVE_COUNTER
        self._prev = _ACTIVE_COUNTER
        _ACTIVE_COUNTER = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_COUNTER
        _ACTIVE_COUNTER = self._prev


_ACTIVE_COUNTER: Optional[MacCounter] = None


def _record_macs(label: str, n: int) -> None:
    if _ACTIVE_COUNTER is not None:
        _ACTIVE_COUNTER.add(label, n)


# ---------------------------------------------------------------------------
# Tensor and graph machinery


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn)
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad tensor."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def back(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), back)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back)


def texp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def back(g):
        _accum(a, g * out)

    return _make(out, (a,), back)


def tlog(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def back(g):
        _accum(a, g / a.data)

    return _make(out, (a,), back)


def tsqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def back(g):
        _accum(a, g * 0.5 / out)

    return _make(out, (a,), back)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def back(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        _accum(a, g * (cdf + a.data * pdf))

    return _make(out, (a,), back)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape))

    return _make(out, (a,), back)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def exact_mean(a, axis: int) -> Tensor:
    """Mean over one axis with exactly rounded (order-independent) sums.

    Uses ``math.fsum`` per output coordinate, so permuting slices along
    ``axis`` cannot change the result even in the last ulp.  The gradient
    is the ordinary 1/n broadcast.
    """
    a = _as_tensor(a)
    axis = axis % a.ndim
    moved = np.moveaxis(a.data, axis, 0)
    n = moved.shape[0]
    flat = moved.reshape(n, -1)
    out = np.array([math.fsum(flat[:, j]) for j in range(flat.shape[1])])
    out = (out / n).reshape(moved.shape[1:])

    def back(g):
        gg = np.broadcast_to(np.expand_dims(g, axis), a.shape)
        _accum(a, gg / n)

    return _make(out, (a,), back)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def back(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, (a,), back)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def back(g):
        _accum(a, g.transpose(inv))

    return _make(out, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out, tuple(tensors), back)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def back(g):
        full = np.zeros(a.shape)
        full[idx] = g
        _accum(a, full)

    return _make(out, (a,), back)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))

    return _make(out, (a,), back)


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of ``table`` indexed by an integer array."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def back(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _make(out, (table,), back)


# ---------------------------------------------------------------------------
# Core numeric ops of the spec


def matmul(a, b, label: str = "matmul") -> Tensor:
    """Batched matrix product; records batch*m*n*k MACs when counting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    _record_macs(label, batch * m * n * k)

    def back(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if a.shape[axis % a.ndim] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, (a,), back)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-vector normalization over the last axis, then affine."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[-1]
    if d < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def back(g):
        _accum(beta, _unbroadcast(g, beta.shape))
        _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        gs = g * gamma.data
        m1 = gs.mean(axis=-1, keepdims=True)
        m2 = (gs * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv_std * (gs - m1 - xhat * m2))

    return _make(out, (a, gamma, beta), back)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp; the max shift is treated as a constant."""
    a = _as_tensor(a)
    shift = a.data.max(axis=axis, keepdims=True)
    inner = tlog(tsum(texp(sub(a, Tensor(shift))), axis, keepdims=True))
    out = add(inner, Tensor(shift))
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


# ---------------------------------------------------------------------------
# Linear / layer-norm / attention parameter bundles


@dataclass
class LinearParams:
    weight: Tensor  # (d_in, d_out)
    bias: Tensor    # (d_out,)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class AttentionParams:
    query: LinearParams
    key: LinearParams
    value: LinearParams
    out: LinearParams


def init_linear(rng: Rng, d_in: int, d_out: int, std: float = 0.02,
                zero: bool = False) -> LinearParams:
    if zero:
        w = np.zeros((d_in, d_out))
    else:
        w = rng.trunc_normal_array((d_in, d_out), std)
    return LinearParams(parameter(w), parameter(np.zeros(d_out)))


def init_layer_norm(d: int) -> LayerNormParams:
    return LayerNormParams(parameter(np.ones(d)), parameter(np.zeros(d)))


def init_attention(rng: Rng, d: int, zero_out: bool = False) -> AttentionParams:
    return AttentionParams(
        query=init_linear(rng, d, d),
        key=init_linear(rng, d, d),
        value=init_linear(rng, d, d),
        out=init_linear(rng, d, d, zero=zero_out),
    )


def linear(x: Tensor, p: LinearParams, label: str = "linear") -> Tensor:
    return add(matmul(x, p.weight, label), p.bias)


def apply_layer_norm(x: Tensor, p: LayerNormParams, eps: float = 1e-5) -> Tensor:
    return layer_norm(x, p.gamma, p.beta, eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., S, d) -> (..., heads, S, d/heads)
    *lead, s, d = x.shape
    y = reshape(x, (*lead, s, heads, d // heads))
    n = y.ndim
    perm = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return transpose(y, perm)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., heads, S, dh) -> (..., S, heads*dh)
    n = x.ndim
    perm = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    y = transpose(x, perm)
    *lead, s, h, dh = y.shape
    return reshape(y, (*lead, s, h * dh))


def multi_head_attention(q_src: Tensor, k_src: Tensor, v_src: Tensor,
                         params: AttentionParams, heads: int,
                         label: str = "attn") -> Tensor:
    """Projections, per-head scaled dot-product, concat, output projection.

    Query and key/value sources may differ (cross attention); leading batch
    dimensions broadcast.  MACs decompose as (2*S_kv + 2*S_q)*d^2 for the
    projections plus 2*S_q*S_kv*d for scores and weighted values.
    """
    d = q_src.shape[-1]
    if d % heads != 0:
        raise ShapeError(f"model dim {d} not divisible by heads {heads}")
    q = _split_heads(linear(q_src, params.query, f"{label}.qkv"), heads)
    k = _split_heads(linear(k_src, params.key, f"{label}.qkv"), heads)
    v = _split_heads(linear(v_src, params.value, f"{label}.qkv"), heads)
    scale = 1.0 / math.sqrt(d // heads)
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = mul(matmul(q, kt, f"{label}.scores"), scale)
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, v, f"{label}.values")
    return linear(_merge_heads(ctx), params.out, f"{label}.out")


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    per_param: dict
    tol: float
    worst_param: str

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def finite_diff_check(f: Callable[[], Tensor],
                      params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
                      h: float = 1e-5, tol: float = 1e-4,
                      grad_override: Optional[dict[str, np.ndarray]] = None
                      ) -> FiniteDiffReport:
    """Compare analytic gradients of ``f()`` to central differences.

    ``f`` must be a deterministic scalar function of the parameter values.
    Relative error uses a 1e-6 denominator floor so exactly-zero gradients
    compare cleanly.  ``grad_override`` substitutes analytic gradients (used
    by the corrupted-gradient negative control).
    """
    if h <= 0:
        raise ValueError("finite_diff_check needs h > 0")
    items = list(params.items()) if isinstance(params, dict) else list(params)
    for _, p in items:
        p.grad = None
    loss = f()
    if loss.size != 1:
        raise ShapeError("finite_diff_check target must be scalar")
    backward(loss)
    grads = {}
    for name, p in items:
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        grads[name] = np.array(g)
    if grad_override:
        grads.update(grad_override)

    per_param: dict[str, float] = {}
    worst = ("", 0.0)
    with no_grad():
        for name, p in items:
            flat = p.data.reshape(-1)
            gflat = grads[name].reshape(-1)
            worst_here = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError(f"non-finite evaluation while probing {name}")
                numeric = (fp - fm) / (2.0 * h)
                ana = gflat[i]
                rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-6)
                if rel > worst_here:
                    worst_here = rel
            per_param[name] = worst_here
            if worst_here > worst[1]:
                worst = (name, worst_here)
    return FiniteDiffReport(worst[1], per_param, tol, worst[0])
