"""Dense tensors with reverse-mode automatic differentiation.

The engine covers exactly the operations the segmentation model and its
losses need: 2D convolution, fixed box filtering, bilinear resizing,
elementwise arithmetic, sigmoid / BCE-from-logits, and reductions.
Feature maps are N x C x H x W; parameters may be any rank (conv biases
are 1-D). There is no implicit broadcasting except the conv bias over
its output channels.

Gradients are computed by recording the operation graph on the output
tensors and replaying it in reverse creation order (which is a valid
topological order, since an op's inputs always exist before its output).
Forward and backward on one graph are single-threaded and deterministic;
independent graphs may live on different threads.

Everything runs in float64 by default. `set_default_dtype(np.float32)`
switches new tensors to 32-bit storage; the test suite always runs 64-bit.
"""

from __future__ import annotations

import itertools
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError

_DEFAULT_DTYPE = np.float64
_DEBUG_CHECKS = False
_GRAD_ENABLED = True
_SEQ = itertools.count()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op finiteness assertions (debug builds)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class no_grad:
    """Context manager that suspends graph recording (evaluation passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    """A numpy array plus an optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; both operands must be Tensors.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """Named trainable tensor. Fixed filters are plain Tensors, never Parameters."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)


def _finite_or_raise(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _DEBUG_CHECKS:
        _finite_or_raise(data, op)
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, dtype=data.dtype)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        bad = [i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y]
        raise DimensionError(
            f"{op}: shape mismatch {a.shape} vs {b.shape}"
            + (f" on axes {bad}" if len(a.shape) == len(b.shape) else "")
        )


def backward(loss: Tensor) -> None:
    """Populate gradients of every tensor reachable from the scalar `loss`.

    Tensors that do not require grad (fixed filters, ground truth, frozen
    weights) are never touched; parameters the loss does not depend on keep
    their zero-initialized grads.
    """
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Collect the subgraph below the loss; reverse creation order is a
    # valid topological order for the replay.
    seen = {id(loss): loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p._backward is not None and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    _accum(loss, np.ones_like(loss.data))
    for node in sorted(seen.values(), key=lambda t: t._seq, reverse=True):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        _accum(a, g * bd)
        _accum(b, g * ad)

    return _node(ad * bd, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        _accum(a, g / bd)
        _accum(b, -g * ad / (bd * bd))

    return _node(out, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _node(-a.data, (a,), bwd, "neg")


def add_scalar(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        _accum(a, g)

    return _node(a.data + s, (a,), bwd, "add_scalar")


def mul_scalar(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        _accum(a, g * s)

    return _node(a.data * s, (a,), bwd, "mul_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _node(np.maximum(a.data, 0.0), (a,), bwd, "relu")


def abs_(a: Tensor) -> Tensor:
    # Subgradient at exactly 0 is 0 (np.sign(0) == 0).
    sign = np.sign(a.data)

    def bwd(g):
        _accum(a, g * sign)

    return _node(np.abs(a.data), (a,), bwd, "abs")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / np.maximum(out, 1e-12))

    return _node(out, (a,), bwd, "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _node(out, (a,), bwd, "sigmoid")


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise binary cross-entropy from logits, log-sum-exp stable."""
    _same_shape(logits, targets, "bce_with_logits")
    x, t = logits.data, targets.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        _accum(logits, g * (_sigmoid(x) - t))
        _accum(targets, g * (-x))

    return _node(out, (logits, targets), bwd, "bce_with_logits")


# ---------------------------------------------------------------------------
# reductions and shape ops


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is not None:
        axes = tuple(int(ax) for ax in (axes if isinstance(axes, Iterable) else (axes,)))
        for ax in axes:
            if ax < 0 or ax >= a.data.ndim:
                raise DimensionError(f"reduce_sum: axis {ax} out of range for shape {a.shape}")
    shape = a.shape

    def bwd(g):
        if axes is None:
            _accum(a, np.broadcast_to(g, shape).astype(g.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axes)
            _accum(a, np.broadcast_to(gg, shape).astype(g.dtype))

    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), bwd, "reduce_sum")


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        count = a.size
    else:
        axes_t = tuple(int(ax) for ax in (axes if isinstance(axes, Iterable) else (axes,)))
        count = int(np.prod([a.shape[ax] for ax in axes_t]))
    return mul_scalar(reduce_sum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _node(a.data.reshape(shape), (a,), bwd, "reshape")


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 4:
        raise DimensionError(f"slice_channels expects NCHW, got shape {a.shape}")
    if not (0 <= start < stop <= a.shape[1]):
        raise DimensionError(f"slice_channels [{start}:{stop}] out of range for C={a.shape[1]}")

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            _accum(a, full)

    return _node(np.ascontiguousarray(a.data[:, start:stop]), (a,), bwd, "slice_channels")


def repeat_channels(a: Tensor, reps: int) -> Tensor:
    """Tile the channel axis `reps` times (mask -> extractor input adapter)."""
    if a.data.ndim != 4:
        raise DimensionError(f"repeat_channels expects NCHW, got shape {a.shape}")
    n, c, h, w = a.shape

    def bwd(g):
        _accum(a, g.reshape(n, reps, c, h, w).sum(axis=1))

    return _node(np.tile(a.data, (1, reps, 1, 1)), (a,), bwd, "repeat_channels")


# ---------------------------------------------------------------------------
# convolution


def _check_4d(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise DimensionError(f"{what} must be 4-D NCHW, got shape {t.shape}")


def _im2col(padded: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Contiguous (N, OH, OW, C, k, k) patch matrix.

    The trailing (C, k, k) axes define the fixed accumulation order of the
    convolution sum: channel-major, then kernel-row-major.
    """
    n, c = padded.shape[:2]
    sn, sc, sh, sw = padded.strides
    view = np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, oh, ow, c, k, k),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2D cross-correlation with zero padding.

    Accumulation over (input channel, kernel row, kernel col) happens in one
    matrix product with a fixed operand layout, so results are reproducible
    run to run.
    """
    _check_4d(x, "conv2d input")
    _check_4d(weight, "conv2d weight")
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3, 5):
        raise DimensionError(f"conv2d kernel must be square with k in (1,3,5), got {kh}x{kw}")
    k = kh
    if x.shape[1] != cin:
        raise DimensionError(
            f"conv2d: input channels (axis 1) = {x.shape[1]} but weight expects {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if padding > k - 1:
        raise DimensionError(f"conv2d: padding {padding} > k-1 = {k - 1}")
    n, _, h, w = x.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: kernel {k} does not fit input {h}x{w} (pad {padding})")

    if padding:
        padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        padded = x.data
    cols = _im2col(padded, k, stride, oh, ow)
    out = np.tensordot(cols, weight.data, axes=([3, 4, 5], [1, 2, 3]))  # -> N,Oh,Ow,Cout
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bwd(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 1, 2]))  # -> Cout,Cin,k,k
            _accum(weight, gw)
        if x.requires_grad:
            _accum(x, _conv2d_input_grad(g, weight.data, (h, w), stride, padding))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bwd, "conv2d")


def _conv2d_input_grad(
    g: np.ndarray, weight: np.ndarray, in_hw, stride: int, padding: int
) -> np.ndarray:
    """dL/dx as a full correlation of the stride-dilated output grad with the
    180-degree-rotated kernel; right/bottom zero rows cover inputs no window
    reached when the stride does not tile exactly."""
    h, w = in_hw
    cout, cin, k, _ = weight.shape
    n, _, oh, ow = g.shape
    extra_h = (h + 2 * padding - k) - (oh - 1) * stride
    extra_w = (w + 2 * padding - k) - (ow - 1) * stride
    dh = (oh - 1) * stride + 1
    dw = (ow - 1) * stride + 1
    buf = np.zeros(
        (n, cout, dh + extra_h + 2 * (k - 1), dw + extra_w + 2 * (k - 1)), dtype=g.dtype
    )
    buf[:, :, k - 1 : k - 1 + dh : stride, k - 1 : k - 1 + dw : stride] = g
    rot = weight[:, :, ::-1, ::-1]
    ph = buf.shape[2] - k + 1
    pw = buf.shape[3] - k + 1
    cols = _im2col(buf, k, 1, ph, pw)
    dxp = np.tensordot(cols, rot, axes=([3, 4, 5], [0, 2, 3]))  # -> N,Ph,Pw,Cin
    dxp = dxp.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + w])


@lru_cache(maxsize=None)
def _box_kernel(k: int, dtype_name: str) -> Tensor:
    return Tensor(np.ones((1, 1, k, k), dtype=np.dtype(dtype_name)), requires_grad=False)


def box_filter(x: Tensor, k: int) -> Tensor:
    """Depthwise all-ones k x k filter, same padding, no learnable state.

    Runs each channel through the regular conv2d path (channels folded into
    the batch axis with a constant 1x1xk xk ones kernel), so it is the exact
    same arithmetic as a convolution and contributes nothing to any
    parameter table. k = 1 is the identity.
    """
    _check_4d(x, "box_filter input")
    if k % 2 == 0:
        raise DimensionError(f"box_filter kernel size must be odd, got {k}")
    if k not in (1, 3, 5):
        raise DimensionError(f"box_filter kernel size must be 1, 3, or 5, got {k}")
    if k == 1:
        return x
    n, c, h, w = x.shape
    flat = reshape(x, (n * c, 1, h, w))
    out = conv2d(flat, _box_kernel(k, x.data.dtype.name), stride=1, padding=(k - 1) // 2)
    return reshape(out, (n, c, h, w))


# ---------------------------------------------------------------------------
# bilinear resize


@lru_cache(maxsize=None)
def _resize_axis(in_size: int, out_size: int):
    """Half-pixel-center source indices and fractional weights for one axis."""
    j = np.arange(out_size, dtype=np.float64)
    src = (j + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_size - 1)
    f = src - i0
    return i0, i1, f


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear interpolation with half-pixel centers.

    The lerp form out = x0 + f*(x1 - x0) keeps constants exact and makes a
    same-size resize the identity.
    """
    _check_4d(x, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: target {out_h}x{out_w} must be >= 1")
    n, c, h, w = x.shape
    r0, r1, rf = _resize_axis(h, out_h)
    c0, c1, cf = _resize_axis(w, out_w)
    rfb = rf[None, None, :, None]
    cfb = cf[None, None, None, :]

    tmp = x.data[:, :, r0, :] + rfb * (x.data[:, :, r1, :] - x.data[:, :, r0, :])
    out = tmp[:, :, :, c0] + cfb * (tmp[:, :, :, c1] - tmp[:, :, :, c0])

    def bwd(g):
        if not x.requires_grad:
            return
        gt = np.zeros((n, c, out_h, w), dtype=g.dtype)
        for j in range(out_w):
            gt[:, :, :, c0[j]] += (1.0 - cf[j]) * g[:, :, :, j]
            gt[:, :, :, c1[j]] += cf[j] * g[:, :, :, j]
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        for i in range(out_h):
            gx[:, :, r0[i], :] += (1.0 - rf[i]) * gt[:, :, i, :]
            gx[:, :, r1[i], :] += rf[i] * gt[:, :, i, :]
        _accum(x, gx)

    return _node(np.ascontiguousarray(out), (x,), bwd, "bilinear_resize")


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """SGD with momentum and decoupled-from-nothing classic weight decay:

        v <- momentum * v + grad + weight_decay * param
        param <- param - lr * v

    Velocity buffers start at zero. `step` takes one learning rate per
    parameter group so backbone and head can ramp differently.
    """

    def __init__(self, groups: dict, momentum: float = 0.9, weight_decay: float = 0.0005):
        self.groups = {name: list(params) for name, params in groups.items()}
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {
            name: [np.zeros_like(p.data) for p in params]
            for name, params in self.groups.items()
        }

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params:
                p.zero_grad()

    def step(self, lrs) -> None:
        if not isinstance(lrs, dict):
            lrs = {name: float(lrs) for name in self.groups}
        for name, params in self.groups.items():
            lr = lrs[name]
            vs = self.velocity[name]
            for p, v in zip(params, vs):
                if not p.trainable:
                    continue
                if p.grad is None:
                    raise NumericError(f"parameter {p.name!r} has no gradient; run backward first")
                v *= self.momentum
                v += p.grad
                if self.weight_decay:
                    v += self.weight_decay * p.data
                p.data -= lr * v
