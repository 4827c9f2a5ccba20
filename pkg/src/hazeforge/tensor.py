"""Dense channels-first tensors with define-by-run reverse-mode differentiation.

Only the layer vocabulary needed by the dehazing networks is covered:
convolution, transpose convolution, batch normalization, PReLU/ReLU,
tanh/sigmoid, channel concatenation, shortcut addition, average pooling,
plus the elementwise arithmetic and reductions used by the losses.

A graph is recorded while operations run. ``backward`` orders it into a
:class:`Tape`, replays the backward rules once in reverse, and then
releases the graph, so a second call on the same loss raises.
"""
from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BackwardError, DegenerateInputError, DimensionError, NonFiniteError

# 32-bit storage is a build option; finite-difference checks assume 64-bit.
DEFAULT_DTYPE = np.float32 if os.environ.get("HAZEFORGE_FLOAT32") == "1" else np.float64

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# per thread, so concurrent inference cannot switch recording off for a trainer
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out._op = op
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -----------------------------------------------------------------------------
# tape
# -----------------------------------------------------------------------------
class Tape:
    """Recorded operations in topological order (inputs before consumers)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
                if id(p) not in seen and p._backward is not None:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def run_backward(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._backward is None:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                    p.grad += pg
                else:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = _consumed
            node._parents = ()


def _consumed(_g):
    raise BackwardError("graph already consumed by a previous backward call")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is _consumed:
        raise BackwardError("backward called twice on the same graph")
    if not loss.requires_grad or loss._backward is None:
        raise BackwardError("loss is detached from every trainable tensor")
    tape = Tape.from_output(loss)
    tape.run_backward(np.ones_like(loss.data))


# -----------------------------------------------------------------------------
# elementwise and reductions
# -----------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        return (2.0 * ad * g,)

    return Tensor._from_op(ad * ad, (a,), bw, "square")


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    ad = a.data + eps
    if np.any(ad <= 0):
        raise NonFiniteError("log of non-positive value")

    def bw(g):
        return (g / ad,)

    return Tensor._from_op(np.log(ad), (a,), bw, "log")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(a.data.sum()), (a,), bw, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape

    def bw(g):
        return (np.full(shape, g / n),)

    return Tensor._from_op(np.asarray(a.data.mean()), (a,), bw, "mean")


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g) if _has_fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return Tensor._from_op(a.data[idx], (a,), bw, "index")


def _has_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return Tensor._from_op(a.data.reshape(shape), (a,), bw, "reshape")


# -----------------------------------------------------------------------------
# activations
# -----------------------------------------------------------------------------
def tanh_act(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return Tensor._from_op(y, (x,), bw, "tanh")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_act(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)

    def bw(g):
        return (g * y * (1.0 - y),)

    return Tensor._from_op(y, (x,), bw, "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor._from_op(x.data * mask, (x,), bw, "relu")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """``x`` where positive, ``slope[c] * x`` elsewhere; ``slope`` has one entry per channel."""
    if x.ndim < 2 or slope.shape != (x.shape[1],):
        raise DimensionError(f"prelu slope shape {slope.shape} does not match channels of {x.shape}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    a = slope.data.reshape(bshape)
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)
    axes = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gx = np.where(pos, g, a * g)
        gs = np.where(pos, 0.0, g * x.data).sum(axis=axes)
        return gx, gs

    return Tensor._from_op(out, (x, slope), bw, "prelu")


# -----------------------------------------------------------------------------
# structural ops
# -----------------------------------------------------------------------------
def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError("concat_channels expects 4-D tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise DimensionError(f"cannot concatenate {a.shape} and {b.shape}")
    ca = a.shape[1]

    def bw(g):
        return g[:, :ca], g[:, ca:]

    return Tensor._from_op(np.concatenate([a.data, b.data], axis=1), (a, b), bw, "concat")


def skip_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"skip_add shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        return g, g

    return Tensor._from_op(a.data + b.data, (a, b), bw, "skip_add")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H < k or W < k:
        raise DimensionError(f"pooling window {k} larger than input {H}x{W}")
    Ho, Wo = H // k, W // k
    crop = x.data[:, :, : Ho * k, : Wo * k]
    out = crop.reshape(B, C, Ho, k, Wo, k).mean(axis=(3, 5))

    def bw(g):
        gx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        gx[:, :, : Ho * k, : Wo * k] = up
        return (gx,)

    return Tensor._from_op(out, (x,), bw, "avg_pool")


# -----------------------------------------------------------------------------
# convolution
# -----------------------------------------------------------------------------
def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def tconv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _col2im(cols: np.ndarray, out_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add ``cols`` (B, ho, wo, C, k, k) into a (B, C, Hp, Wp) array."""
    out = np.zeros(out_shape, dtype=cols.dtype)
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + hs : stride, j : j + ws : stride] += cols[..., i, j]
    return out


def _check_conv_args(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("convolution expects 4-D input and weight")
    k = w.shape[2]
    if w.shape[3] != k or k < 1:
        raise DimensionError(f"square kernel expected, got {w.shape[2:]}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} / padding {padding}")
    return k


def _conv_forward(xd, wd, stride, padding):
    k = wd.shape[2]
    B, C, H, W = xd.shape
    ho, wo = conv_output_size(H, k, stride, padding), conv_output_size(W, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"padded input {H}x{W} (pad {padding}) smaller than kernel {k}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = _windows(xp, k, stride, ho, wo)
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return out, xp, win, ho, wo


def _conv_input_grad(g, wd, xshape, padding, stride, k, ho, wo):
    B, C, H, W = xshape
    cols = np.tensordot(g, wd, axes=([1], [0]))  # B,ho,wo,C,k,k
    full = _col2im(cols, (B, C, H + 2 * padding, W + 2 * padding), k, stride, ho, wo)
    return full[:, :, padding : padding + H, padding : padding + W]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. ``weight`` is (Cout, Cin, k, k)."""
    k = _check_conv_args(x, weight, stride, padding)
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    out, xp, win, ho, wo = _conv_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data.reshape(1, -1, 1, 1)
    xshape, wd = x.shape, weight.data

    def bw(g):
        gx = _conv_input_grad(g, wd, xshape, padding, stride, k, ho, wo) if x.requires_grad else None
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw, "conv2d")


def transpose_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input. ``weight`` is (Cin, Cout, k, k)."""
    k = _check_conv_args(x, weight, stride, padding)
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"input has {x.shape[1]} channels, weight expects {weight.shape[0]}")
    B, _, H, W = x.shape
    Ho, Wo = tconv_output_size(H, k, stride, padding), tconv_output_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"transpose convolution of {H}x{W} yields empty output")
    Cout = weight.shape[1]
    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # B,H,W,Cout,k,k
    full = _col2im(cols, (B, Cout, Ho + 2 * padding, Wo + 2 * padding), k, stride, H, W)
    out = full[:, :, padding : padding + Ho, padding : padding + Wo]
    if bias is not None:
        if bias.shape != (Cout,):
            raise DimensionError(f"bias shape {bias.shape} does not match {Cout} outputs")
        out = out + bias.data.reshape(1, -1, 1, 1)
    xd, wd = x.data, weight.data

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        win = _windows(gp, k, stride, H, W)  # B,Cout,H,W,k,k
        gx = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = np.tensordot(xd, win, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw, "transpose_conv2d")


# -----------------------------------------------------------------------------
# batch normalization
# -----------------------------------------------------------------------------
class RunningStats:
    """Per-channel running mean/variance, updated in place during training."""

    def __init__(self, channels: int, dtype=None):
        self.mean = np.zeros(channels, dtype=dtype or DEFAULT_DTYPE)
        self.var = np.ones(channels, dtype=dtype or DEFAULT_DTYPE)

    def copy(self) -> "RunningStats":
        rs = RunningStats(len(self.mean), self.mean.dtype)
        rs.mean[:] = self.mean
        rs.var[:] = self.var
        return rs


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats | None = None,
    mode: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"gamma/beta must have length {C}")
    n = x.size // C if C else 0
    if n == 0:
        raise DegenerateInputError("batch norm over a channel with no elements")
    axes = (0, 2, 3)
    bshape = (1, C, 1, 1)
    gd, bd = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running is not None:
            unbiased = var * n / (n - 1) if n > 1 else var
            running.mean *= 1.0 - momentum
            running.mean += momentum * mean
            running.var *= 1.0 - momentum
            running.var += momentum * unbiased
    elif mode == "eval":
        if running is None:
            raise ValueError("eval mode batch norm needs running statistics")
        mean, var = running.mean.copy(), running.var.copy()
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * invstd.reshape(bshape)
    out = gd * xhat + bd

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gd
        if mode == "train":
            gx = (invstd.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), bw, "batch_norm")


# -----------------------------------------------------------------------------
# gradient checking
# -----------------------------------------------------------------------------
def numeric_grad(f: Callable[[], float], arr: np.ndarray, flat_idx: Iterable[int], h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to selected entries of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    out = []
    for i in flat_idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    build: Callable[[], Tensor],
    params: dict[str, Tensor],
    seed: int = 0,
    h: float = 1e-5,
    max_entries: int | None = 24,
) -> dict[str, float]:
    """Compare analytic and central-difference gradients of ``build()``.

    ``build`` must return a scalar tensor computed from ``params``. At most
    ``max_entries`` seed-chosen entries per parameter are probed. Returns the
    max relative error per parameter name.
    """
    for p in params.values():
        p.requires_grad = True
        p.zero_grad()
    loss = build()
    backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    rng = np.random.default_rng(seed)

    def f() -> float:
        with no_grad():
            return build().item()

    report = {}
    for name, p in params.items():
        n = p.size
        if max_entries is None or n <= max_entries:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        num = numeric_grad(f, p.data, idx, h)
        report[name] = float(rel_error(analytic[name].reshape(-1)[idx], num).max())
    return report
