"""Small reverse-mode autodiff over numpy arrays, plus Adam.

Operations record themselves on the innermost active :class:`Tape`.
Calling :meth:`Tape.backward` replays the records in exact reverse order
and accumulates vector-Jacobian products into ``Tensor.grad`` for every
tensor created with ``requires_grad=True``.

Arrays default to float32; pass float64 arrays in to get a float64 graph
(used by the gradient checks).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a forward value, gradient, or update is NaN/Inf."""


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class OptimizerError(NonFiniteError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "track")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        # true when gradients must flow through this tensor
        self.track = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Operator sugar; every path goes through the recorded primitives.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    out: Tensor
    parents: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations executed inside are recorded.
    Nested tapes are allowed, only the innermost one records. The active
    tape is per thread.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[_Record] = []

    @classmethod
    def active(cls) -> "Tape | None":
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def __enter__(self):
        if not hasattr(Tape._local, "stack"):
            Tape._local.stack = []
        Tape._local.stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._local.stack.pop()
        return False

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if loss.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar loss")
            seed = np.ones_like(loss.data)
        if not np.all(np.isfinite(loss.data)):
            raise NonFiniteError("loss is not finite")
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad:
            leaves[id(loss)] = loss
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.vjp(g)):
                if pg is None or not isinstance(parent, Tensor) or not parent.track:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent.requires_grad:
                    leaves[key] = parent
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {t.name or 'tensor'}")
            t.grad = g if t.grad is None else t.grad + g


def _record(out_data: np.ndarray, parents: tuple, vjp) -> Tensor:
    out = Tensor(out_data)
    tape = Tape.active()
    if tape is not None and any(_tracked(p) for p in parents):
        out.track = True
        tape.records.append(_Record(out, parents, vjp))
    return out


def _tracked(x) -> bool:
    return isinstance(x, Tensor) and x.track


def _val(x):
    return x.data if isinstance(x, Tensor) else x


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


_FLUSH32 = np.float32(1e-30)


def _flush(g: np.ndarray) -> np.ndarray:
    """Zero negligible float32 values before they decay into subnormals.

    Saturated sigmoids are where they originate; BLAS slows down by orders
    of magnitude on subnormal operands.
    """
    if g.dtype == np.float32:
        tiny = np.abs(g) < _FLUSH32
        if tiny.any():
            g = np.where(tiny, np.float32(0), g)
    return g


def _shape_of(x):
    return np.shape(_val(x))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    sa, sb = _shape_of(a), _shape_of(b)
    return _record(
        _val(a) + _val(b),
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    sa, sb = _shape_of(a), _shape_of(b)
    return _record(
        _val(a) - _val(b),
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)),
    )


def relu(x: Tensor) -> Tensor:
    xv = _val(x)
    mask = xv > 0
    return _record(np.maximum(xv, 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xv = _val(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xv))
    s = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xv.dtype)
    return _record(s, (x,), lambda g: (_flush(g * s * (1 - s)),))


def square(x: Tensor) -> Tensor:
    xv = _val(x)
    return _record(xv * xv, (x,), lambda g: (2 * g * xv,))


# ------------------------------------------------------------------ reductions


def sum_all(x: Tensor) -> Tensor:
    xv = _val(x)
    return _record(
        np.asarray(xv.sum(), dtype=xv.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, xv.shape).copy(),),
    )


def mean_all(x: Tensor) -> Tensor:
    xv = _val(x)
    n = xv.size
    return _record(
        np.asarray(xv.mean(), dtype=xv.dtype),
        (x,),
        lambda g: (np.full(xv.shape, g / n, dtype=xv.dtype),),
    )


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over every element."""
    return mean_all(square(sub(pred, target)))


# ------------------------------------------------------------------ structure


def reshape(x: Tensor, shape) -> Tensor:
    old = _shape_of(x)
    return _record(_val(x).reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record(np.transpose(_val(x), axes), (x,), lambda g: (np.transpose(g, inv),))


# -------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting of leading dims."""
    av, bv = _val(a), _val(b)
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner dims {av.shape} @ {bv.shape}")
    sa, sb = av.shape, bv.shape

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _record(av @ bv, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """out[..., o] = sum_i x[..., i] * weight[i, o] + bias[o]."""
    xv, wv = _val(x), _val(weight)
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
        raise DimensionError(f"linear: input {xv.shape} vs weight {wv.shape}")
    if bias is not None and _shape_of(bias) != (wv.shape[1],):
        raise DimensionError(f"linear: bias {_shape_of(bias)} vs weight {wv.shape}")
    out = xv @ wv
    if bias is not None:
        out = out + _val(bias)

    need_x = _tracked(x)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wv.T if need_x else None
        gw = xv.reshape(-1, xv.shape[-1]).T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    return _record(out, (x, weight, bias), vjp)


def token_linear(x, weight, bias=None) -> Tensor:
    """Per-position linear map: out[b,k,:] = x[b,k,:] @ weight[k] + bias[k].

    ``x`` is [B, K, I], ``weight`` is [K, I, O], ``bias`` is [K, O].
    """
    xv, wv = _val(x), _val(weight)
    if xv.ndim != 3 or wv.ndim != 3 or xv.shape[1:] != wv.shape[:2]:
        raise DimensionError(f"token_linear: input {xv.shape} vs weight {wv.shape}")
    out = np.einsum("bki,kio->bko", xv, wv)
    if bias is not None:
        out = out + _val(bias)

    def vjp(g):
        gx = np.einsum("bko,kio->bki", g, wv)
        gw = np.einsum("bki,bko->kio", xv, g)
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    return _record(out, (x, weight, bias), vjp)


# -------------------------------------------------------------- normalization


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    xv = _val(x)
    gv = _val(gain)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + _val(shift)
    n = xv.shape[-1]

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gshift = g.sum(axis=lead)
        gx_hat = g * gv
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx.astype(xv.dtype), ggain, gshift

    return _record(out.astype(xv.dtype), (x, gain, shift), vjp)


def softmax_lastdim(x) -> Tensor:
    xv = _val(x)
    z = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (x,), vjp)


# ------------------------------------------------------------------ attention


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]

    @classmethod
    def init(cls, hidden: int, rng: np.random.Generator, dtype=np.float32, prefix="attn"):
        bound = np.sqrt(1.0 / hidden)

        def w(tag):
            return Tensor(
                rng.uniform(-bound, bound, (hidden, hidden)).astype(dtype),
                requires_grad=True,
                name=f"{prefix}.{tag}",
            )

        def b(tag):
            return Tensor(np.zeros(hidden, dtype), requires_grad=True, name=f"{prefix}.{tag}")

        return cls(w("wq"), b("bq"), w("wk"), b("bk"), w("wv"), b("bv"), w("wo"), b("bo"))


def multihead_self_attention(tokens, params: AttentionParams, heads: int) -> Tensor:
    """Scaled dot-product self-attention over tokens [B, K, H]."""
    B, K, H = _shape_of(tokens)
    if heads < 1 or H % heads:
        raise ConfigurationError(f"hidden size {H} not divisible by {heads} heads")
    dh = H // heads

    def split(t):
        return transpose(reshape(t, (B, K, heads, dh)), (0, 2, 1, 3))

    q = split(linear(tokens, params.wq, params.bq))
    k = split(linear(tokens, params.wk, params.bk))
    v = split(linear(tokens, params.wv, params.bv))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), float(1.0 / np.sqrt(dh)))
    attn = softmax_lastdim(scores)
    ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
    return linear(reshape(ctx, (B, K, H)), params.wo, params.bo)


# ----------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState):
    """One bias-corrected Adam update, in place on ``params[i].data``.

    A ``None`` gradient is treated as zero.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise OptimizerError("parameter list changed between steps")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {p.name or i}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        m *= b1
        v *= b2
        if g is not None:
            g = g.astype(p.data.dtype, copy=False)
            m += (1 - b1) * g
            v += (1 - b2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    return params


def adam_update(params: Sequence[Tensor], state: AdamState):
    """Adam step using each parameter's accumulated ``.grad``, then clears it."""
    adam_step(params, [p.grad for p in params], state)
    for p in params:
        p.grad = None
