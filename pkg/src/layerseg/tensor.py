"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` while one is active and at least
one input requires a gradient. Outside a tape every op is a plain numpy
computation, which is what evaluation and finite-difference checks use.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPES = {32: np.float32, 64: np.float64}
_precision = 64
_active_tapes: list["Tape"] = []


def set_precision(bits: int) -> None:
    """Set the run-wide floating point precision (32 or 64)."""
    global _precision
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _precision = bits


def get_precision() -> int:
    return _precision


def get_dtype() -> type:
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    previous = _precision
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _leaf: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != get_dtype() and _leaf:
            arr = arr.astype(get_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._leaf = _leaf

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

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def square(self) -> "Tensor":
        return square(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str = ""


@dataclass(eq=False)
class Tape:
    """Records operation nodes in execution order.

    Use as a context manager; it may be re-entered to keep recording onto the
    same graph. :meth:`backward` replays the nodes in exact reverse order.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.consumed:
            raise RuntimeError("backward() already ran on this tape; call reset() before reuse")
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        if not loss.requires_grad:
            return
        if loss.is_leaf:
            _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    _accumulate_leaf(inp, gi)
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        # free intermediates; leaves keep their gradients
        self.nodes.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def zero_grad(params: Iterator[Tensor] | Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def _record(data: np.ndarray, inputs: Sequence[Tensor], bwd, name: str = "") -> Tensor:
    if _active_tapes and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True, _leaf=False)
        _active_tapes[-1].nodes.append(Node(tuple(inputs), out, bwd, name))
        return out
    return Tensor(data, requires_grad=False, _leaf=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd, "div")


def square(x: Tensor) -> Tensor:
    return _record(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def abs_(x: Tensor) -> Tensor:
    return _record(np.abs(x.data), (x,), lambda g: (np.sign(x.data) * g,), "abs")


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # subgradient at exactly 0 is the slope
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope)
    return _record(out, (x,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def smooth_l1(x: Tensor) -> Tensor:
    """Per-element ``4x^2`` when ``|x| < 0.25`` else ``|x|``."""
    d = x.data
    small = np.abs(d) < 0.25
    out = np.where(small, 4.0 * d * d, np.abs(d))
    return _record(out, (x,), lambda g: (g * np.where(small, 8.0 * d, np.sign(d)),), "smooth_l1")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out), (x,), bwd, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis=axes, keepdims=keepdims) * (1.0 / n)


def l1_norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return tsum(abs_(x), axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    def bwd(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)

    return _record(x.data[index], (x,), bwd, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _record(
        np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast"
    )


def _shift_array(a: np.ndarray, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape[-2:]
    for b in range(a.shape[0]):
        sx, sy = int(dx[b]), int(dy[b])
        if abs(sx) >= w or abs(sy) >= h:
            continue
        dst_y = slice(max(sy, 0), h + min(sy, 0))
        src_y = slice(max(-sy, 0), h + min(-sy, 0))
        dst_x = slice(max(sx, 0), w + min(sx, 0))
        src_x = slice(max(-sx, 0), w + min(-sx, 0))
        out[b, ..., dst_y, dst_x] = a[b, ..., src_y, src_x]
    return out


def shift2d(x: Tensor, dx, dy) -> Tensor:
    """Integer translation per batch element with zero fill.

    ``dx`` moves content right, ``dy`` moves it down. ``x`` is ``(B, ..., H, W)``.
    """
    n = x.shape[0]
    dx = np.broadcast_to(np.asarray(dx, dtype=np.int64), (n,))
    dy = np.broadcast_to(np.asarray(dy, dtype=np.int64), (n,))
    return _record(
        _shift_array(x.data, dx, dy), (x,), lambda g: (_shift_array(g, -dx, -dy),), "shift2d"
    )


# ---------------------------------------------------------------- convolution


def _pad4(padding) -> tuple[int, int, int, int]:
    """Normalize padding to (top, bottom, left, right)."""
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        pads = (p, p, p, p)
    else:
        pads = tuple(int(p) for p in padding)
        if len(pads) == 2:
            pads = (pads[0], pads[0], pads[1], pads[1])
        if len(pads) != 4:
            raise ValueError(f"padding must be an int, a pair or a 4-tuple, got {padding!r}")
    if min(pads) < 0:
        raise ValueError(f"padding must be non-negative, got {padding!r}")
    return pads


def _padded(x: np.ndarray, pads) -> np.ndarray:
    t, b, l, r = pads
    if t == b == l == r == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # (N, Ho, Wo, C, kh, kw) flattened to rows of patches
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv_output_size(size: int, kernel: int, stride: int, pad_before: int, pad_after: int) -> int:
    return (size + pad_before + pad_after - kernel) // stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, pads, transposed: bool) -> None:
    if x.ndim != 4:
        raise ValueError(f"input must be NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"kernel must be 4-d, got shape {w.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.shape[1] != w.shape[0 if transposed else 1]:
        which = "kernel dim 0 (in)" if transposed else "kernel dim 1 (in)"
        raise ValueError(f"channel mismatch: input has {x.shape[1]} channels but {which} is {w.shape[0 if transposed else 1]}")
    if not transposed:
        t, b, l, r = pads
        if x.shape[2] + t + b < w.shape[2]:
            raise ValueError(f"height {x.shape[2]} + padding is smaller than kernel height {w.shape[2]}")
        if x.shape[3] + l + r < w.shape[3]:
            raise ValueError(f"width {x.shape[3]} + padding is smaller than kernel width {w.shape[3]}")


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pads):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    t, b, l, r = pads
    ho = conv_output_size(h, kh, stride, t, b)
    wo = conv_output_size(wd, kw, stride, l, r)
    cols = _im2col(_padded(x, pads), kh, kw, stride, ho, wo)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, pads, in_hw) -> np.ndarray:
    """Adjoint of convolution w.r.t. its input (scatter of kernel-weighted grads)."""
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    t, b, l, r = pads
    h, wd = in_hw
    hp, wp = h + t + b, wd + l + r
    if ho * wo >= 64:
        # channel-major layout keeps every kernel tap a contiguous block; faster on larger maps
        wm = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
        gm = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        taps = (wm @ gm).reshape(kh, kw, c, n, ho, wo)
        dxp = np.zeros((c, n, max(hp, stride * (ho - 1) + kh), max(wp, stride * (wo - 1) + kw)), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += taps[i, j]
        return dxp[:, :, t : t + h, l : l + wd].transpose(1, 0, 2, 3)
    dcols = g.transpose(0, 2, 3, 1).reshape(-1, o) @ w.reshape(o, -1)
    dcols = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, max(hp, stride * (ho - 1) + kh), max(wp, stride * (wo - 1) + kw)), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, i, j]
    return dxp[:, :, t : t + h, l : l + wd]


def _conv_weight_grad(g: np.ndarray, cols: np.ndarray, wshape) -> np.ndarray:
    o = g.shape[1]
    return (g.transpose(1, 0, 2, 3).reshape(o, -1) @ cols).reshape(wshape)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding=0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of NCHW ``x`` with an (out, in, kh, kw) kernel."""
    pads = _pad4(padding)
    _check_conv(x.data, w.data, stride, pads, transposed=False)
    out, cols = _conv_forward(x.data, w.data, stride, pads)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    in_hw = x.shape[2:]

    def bwd(g):
        gx = _conv_input_grad(g, w.data, stride, pads, in_hw) if x.requires_grad else None
        gw = _conv_weight_grad(g, cols, w.shape) if w.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record(out, inputs, bwd, "conv2d")


def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 1, padding=0, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution; kernel is (in, out, kh, kw).

    Forward equals the input-gradient of :func:`conv2d` with the same kernel, so
    output extent is ``(H - 1) * stride - pad_before - pad_after + k``.
    """
    pads = _pad4(padding)
    _check_conv(x.data, w.data, stride, pads, transposed=True)
    n, _, h, wd = x.shape
    _, co, kh, kw = w.shape
    t, b, l, r = pads
    ho = (h - 1) * stride - t - b + kh
    wo = (wd - 1) * stride - l - r + kw
    if ho < 1 or wo < 1:
        raise ValueError(f"transposed conv output would be {ho}x{wo}; padding too large for kernel {kh}x{kw}")
    out = _conv_input_grad(x.data, w.data, stride, pads, (ho, wo))
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bwd(g):
        gx = gw = None
        if x.requires_grad or w.requires_grad:
            gx, cols = _conv_forward(g, w.data, stride, pads)
        if w.requires_grad:
            # dW[i, o] = sum x[n, i, h, w] * patch(g)[n, o, kh, kw]
            gw = _conv_weight_grad(x.data, cols, w.shape)
        if not x.requires_grad:
            gx = None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record(out, inputs, bwd, "conv2d_transpose")


# ---------------------------------------------------------------- normalization


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        dtype = get_dtype()
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have length {c} (channels), got {gamma.shape} and {beta.shape}")
    axes = (0, 2, 3)
    shape = (1, c, 1, 1)
    if mode == "train":
        m = x.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean[...] = state.momentum * state.running_mean + (1 - state.momentum) * mu
        state.running_var[...] = state.momentum * state.running_var + (1 - state.momentum) * unbiased
    elif mode == "eval":
        m = None
        mu, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def bwd(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if m is None:
                gx = dxhat * inv.reshape(shape)
            else:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                gx = inv.reshape(shape) * (dxhat - s1 / m - xhat * s2 / m)
        return gx, ggamma, gbeta

    return _record(out.astype(x.dtype, copy=False), (x, gamma, beta), bwd, "batch_norm")


def _l2normalize(v: np.ndarray, eps: float) -> np.ndarray:
    return v / (np.linalg.norm(v) + eps)


def spectral_normalize(
    weight: Tensor, u_state: np.ndarray, n_power_iter: int = 1, update: bool = True, eps: float = 1e-12
) -> Tensor:
    """Divide ``weight`` by its power-iteration estimate of the top singular value.

    ``weight`` is viewed as a (shape[0], -1) matrix. ``u_state`` is updated in
    place when ``update`` is true. The estimate is treated as a function of the
    weight with ``u``/``v`` held constant, as in SN-GAN.
    """
    if n_power_iter < 1:
        raise ValueError("n_power_iter must be >= 1")
    mat = weight.data.reshape(weight.shape[0], -1)
    if u_state.shape != (mat.shape[0],):
        raise ValueError(f"u_state must have shape ({mat.shape[0]},), got {u_state.shape}")
    u = u_state.astype(mat.dtype, copy=True)
    v = _l2normalize(mat.T @ u, eps)
    if update:
        for i in range(n_power_iter):
            if i:
                v = _l2normalize(mat.T @ u, eps)
            u = _l2normalize(mat @ v, eps)
        v = _l2normalize(mat.T @ u, eps)
        u_state[...] = u
    sigma = max(float(u @ mat @ v), eps)
    out = weight.data / sigma
    uv = np.outer(u, v).reshape(weight.shape)

    def bwd(g):
        return (g / sigma - (np.sum(g * weight.data) / sigma**2) * uv,)

    return _record(out, (weight,), bwd, "spectral_normalize")


# ---------------------------------------------------------------- sampling


def grid_sample_bilinear(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of NCHW ``x`` at pixel coordinates ``grid[..., (col, row)]``.

    ``grid`` is ``(N, Ho, Wo, 2)``. Samples falling outside the input read zero.
    """
    xd, gd = x.data, grid.data
    n, c, h, w = xd.shape
    if gd.ndim != 4 or gd.shape[0] != n or gd.shape[3] != 2:
        raise ValueError(f"grid must be (N={n}, Ho, Wo, 2), got {gd.shape}")
    gx, gy = gd[..., 0], gd[..., 1]
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx, fy = gx - x0, gy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    bidx = np.arange(n).reshape(n, 1, 1)
    corners = []
    for oy, ox in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + oy, x0 + ox
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc, xc = np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)
        vals = xd[bidx, :, yc, xc] * valid[..., None]  # (N, Ho, Wo, C)
        corners.append((yc, xc, valid, vals))
    wts = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    out = sum(wt[..., None] * cr[3] for wt, cr in zip(wts, corners))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bwd(g):
        gl = g.transpose(0, 2, 3, 1)  # (N, Ho, Wo, C)
        gxin = ggrid = None
        if x.requires_grad:
            gxin = np.zeros((c, n * h * w), dtype=g.dtype)
            for wt, (yc, xc, valid, _) in zip(wts, corners):
                flat = ((bidx * h + yc) * w + xc).reshape(-1)
                contrib = (gl * (wt * valid)[..., None]).reshape(-1, c)
                for ch in range(c):
                    gxin[ch] += np.bincount(flat, weights=contrib[:, ch], minlength=n * h * w)
            gxin = gxin.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        if grid.requires_grad:
            v00, v01, v10, v11 = (cr[3] for cr in corners)
            dgx = ((v01 - v00) * (1 - fy)[..., None] + (v11 - v10) * fy[..., None]) * gl
            dgy = ((v10 - v00) * (1 - fx)[..., None] + (v11 - v01) * fx[..., None]) * gl
            ggrid = np.stack([dgx.sum(-1), dgy.sum(-1)], axis=-1)
        return gxin, ggrid

    return _record(out, (x, grid), bwd, "grid_sample_bilinear")


def identity_grid(n: int, h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    grid = np.stack([xs, ys], axis=-1).astype(get_dtype())
    return np.broadcast_to(grid, (n, h, w, 2)).copy()


def affine_grid(theta: Tensor, h: int, w: int) -> Tensor:
    """Pixel-coordinate sampling grid for (N, 2, 3) affine maps in [-1, 1] coordinates.

    Normalized coordinates put -1 and +1 on the centers of the border pixels.
    """
    n = theta.shape[0]
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    base = np.stack([xx, yy, np.ones_like(xx)], axis=-1).astype(theta.dtype)  # (H, W, 3)
    norm = np.einsum("hwk,njk->nhwj", base, theta.data)
    scale = np.array([(w - 1) / 2.0, (h - 1) / 2.0], dtype=theta.dtype)
    out = (norm + 1.0) * scale

    def bwd(g):
        return (np.einsum("nhwj,hwk->njk", g * scale, base),)

    return _record(out, (theta,), bwd, "affine_grid")
