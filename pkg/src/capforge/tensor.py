"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` walks the graph in reverse topological
order. Leaf tensors with ``requires_grad`` accumulate into ``.grad`` (so two
backward passes add up); intermediate gradients live only for one pass.

Arrays default to float32. Float64 inputs stay float64, which is what the
finite-difference harness relies on.
"""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, np.ndarray):
        if dtype is not None and value.dtype != dtype:
            return value.astype(dtype)
        if not np.issubdtype(value.dtype, np.floating):
            return value.astype(DEFAULT_DTYPE)
        return value
    return np.asarray(value, dtype=dtype or DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data, dtype=data.dtype)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _const(self, value) -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=self.data.dtype), dtype=self.data.dtype)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from a scalar; leaf gradients accumulate."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic ---------------------------------------------
    def __add__(self, other):
        other = self._const(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._const(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), back)

    def __rsub__(self, other):
        return self._const(other) - self

    def __mul__(self, other):
        other = self._const(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._const(other)
        a, b = self, other

        def back(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._make(a.data / b.data, (a, b), back)

    def __rtruediv__(self, other):
        return self._const(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        a = self

        def back(g):
            return (g * p * a.data ** (p - 1),)

        return Tensor._make(a.data**p, (a,), back)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(a.data[index], (a,), back)

    # -- unary math ----------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    # -- reductions and shape ------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, a1: int, a2: int):
        axes = list(range(self.ndim))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return self.transpose(tuple(axes))


class Parameter(Tensor):
    """A trainable leaf tensor carrying its dot-separated model path."""

    __slots__ = ()

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(a.data @ b.data, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    out = matmul(x, weight)
    return out if bias is None else out + bias


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def pad_stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack [T_i, D] tensors into [B, max T, D], zero-padding the tail."""
    longest = max(t.shape[0] for t in tensors)
    first = tensors[0]
    out = np.zeros((len(tensors), longest) + first.shape[1:], dtype=first.dtype)
    for i, t in enumerate(tensors):
        out[i, : t.shape[0]] = t.data

    def back(g):
        return tuple(g[i, : t.shape[0]] for i, t in enumerate(tensors))

    return Tensor._make(out, tuple(tensors), back)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return Tensor._make(weight.data[ids], (weight,), back)


# ---------------------------------------------------------------------------
# Nonlinearities and normalisation
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.data
    c = np.asarray(_GELU_C, dtype=v.dtype)
    inner = c * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def back(g):
        d_inner = c * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return Tensor._make(out, (x,), back)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    def back(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return Tensor._make(out.astype(v.dtype, copy=False), (x, gamma, beta), back)


class BatchNormStats:
    """Running per-channel mean/variance for ``batch_norm``.

    ``mean`` and ``var`` are non-trainable tensors whose ``data`` is replaced
    (not mutated) on every training-mode update, so they can live in a model's
    state dict and be checkpointed.
    """

    def __init__(self, mean: Tensor, var: Tensor, momentum: float = 0.1):
        self.mean = mean
        self.var = var
        self.momentum = momentum

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, dtype=DEFAULT_DTYPE) -> "BatchNormStats":
        return cls(Tensor(np.zeros(channels, dtype=dtype)), Tensor(np.ones(channels, dtype=dtype)), momentum)


def batch_norm(
    x: Tensor,
    stats: BatchNormStats,
    gamma: Tensor,
    beta: Tensor,
    training: bool,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of [C, H, W] or [B, C, H, W] input.

    Training mode normalises with the biased batch variance and moves the
    running statistics by ``stats.momentum`` (running variance is unbiased).
    Eval mode uses the running statistics.
    """
    v = x.data
    caxis = v.ndim - 3
    axes = tuple(i for i in range(v.ndim) if i != caxis)
    bshape = [1] * v.ndim
    bshape[caxis] = v.shape[caxis]
    g_b = gamma.data.reshape(bshape)
    b_b = beta.data.reshape(bshape)

    if not training:
        scale = 1.0 / np.sqrt(stats.var.data.reshape(bshape) + eps)
        xhat = (v - stats.mean.data.reshape(bshape)) * scale
        out = (xhat * g_b + b_b).astype(v.dtype, copy=False)

        def back_eval(g):
            return (
                g * g_b * scale,
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes),
            )

        return Tensor._make(out, (x, gamma, beta), back_eval)

    count = v.size // v.shape[caxis]
    mu = v.mean(axis=axes, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * g_b + b_b).astype(v.dtype, copy=False)

    m = stats.momentum
    unbiased = var.reshape(-1) * (count / max(count - 1, 1))
    old_mean, old_var = stats.mean.data, stats.var.data
    stats.mean.data = ((1 - m) * old_mean + m * mu.reshape(-1)).astype(old_mean.dtype)
    stats.var.data = ((1 - m) * old_var + m * unbiased).astype(old_var.dtype)

    def back(g):
        gx_hat = g * g_b
        gx = inv * (gx_hat - gx_hat.mean(axis=axes, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._make(out, (x, gamma, beta), back)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: [B, C, H+2, W+2] -> [B, H, W, C, 3, 3]
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x: Tensor, kernels: Tensor, padding: int = 1) -> Tensor:
    """3x3 cross-correlation with zero "same" padding, no bias.

    ``x`` is [C_in, H, W] or [B, C_in, H, W]; ``kernels`` is [C_out, C_in, 3, 3].
    """
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects [C_out, C_in, 3, 3] kernels, got {kernels.shape}")
    if padding != 1:
        raise ValueError("only padding=1 (same) is supported")
    squeeze = x.ndim == 3
    v = x.data[None] if squeeze else x.data
    if v.ndim != 4 or v.shape[1] != kernels.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}"
        )
    bsz, cin, h, w = v.shape
    cout = kernels.shape[0]
    xp = np.pad(v, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, w).reshape(bsz * h * w, cin * 9)
    wmat = kernels.data.reshape(cout, cin * 9)
    out = (cols @ wmat.T).reshape(bsz, h, w, cout).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def back(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(bsz * h * w, cout)
        gk = (gmat.T @ cols).reshape(kernels.shape)
        gcols = (gmat @ wmat).reshape(bsz, h, w, cin, 3, 3)
        gxp = np.zeros_like(xp)
        for ki in range(3):
            for kj in range(3):
                gxp[:, :, ki:ki + h, kj:kj + w] += gcols[..., ki, kj].transpose(0, 3, 1, 2)
        gx = gxp[:, :, 1:-1, 1:-1]
        return (gx[0] if squeeze else gx), gk

    return Tensor._make(np.ascontiguousarray(out), (x, kernels), back)


def avg_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """2x2 / stride-2 mean pooling over the last two axes; odd tails are dropped."""
    if kernel != 2 or stride != 2:
        raise ValueError("only kernel=2, stride=2 pooling is supported")
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise DimensionError(f"avg_pool2d needs spatial extent >= 2, got {x.shape}")
    ho, wo = h // 2, w // 2
    lead = x.shape[:-2]
    crop = x.data[..., : ho * 2, : wo * 2]
    out = crop.reshape(lead + (ho, 2, wo, 2)).mean(axis=(-3, -1))

    def back(g):
        gx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * np.asarray(0.25, dtype=g.dtype)
        gx[..., : ho * 2, : wo * 2] = spread
        return (gx,)

    return Tensor._make(out.astype(x.dtype, copy=False), (x,), back)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.data
    vocab = v.shape[-1]
    flat = v.reshape(-1, vocab)
    tflat = targets.reshape(-1)
    m = np.ones(tflat.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    count = int(m.sum())
    if count == 0:
        raise ValueError("cross_entropy: every target position is masked")
    shifted = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    nll = lse - shifted[np.arange(len(tflat)), tflat]
    loss = np.asarray((nll * m).sum() / count, dtype=v.dtype)

    def back(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(len(tflat)), tflat] -= 1.0
        probs *= (m / count)[:, None]
        return ((probs * g).reshape(v.shape).astype(v.dtype, copy=False),)

    return Tensor._make(loss, (logits,), back)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
