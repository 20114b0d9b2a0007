"""Dense-tensor engine with reverse-mode differentiation.

Everything is backed by numpy arrays.  A :class:`Tensor` records the
operations that produced it; calling :meth:`Tensor.backward` on a scalar
result replays the recorded closures in reverse execution order and
accumulates gradients into every reachable tensor with ``requires_grad``.

Precision is a build choice: use float64 arrays for gradient checks and
oracle comparisons, float32 for training.  Every forward and backward
result is checked for NaN/Inf unless :func:`set_finite_checks` disables it.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, NumericError, ParameterError

_FINITE_CHECKS = True
_GRAD_ENABLED = True


def set_finite_checks(enabled: bool) -> None:
    """Enable or disable NaN/Inf detection on op outputs and gradients."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class no_grad:
    """Context manager suppressing tape recording (cheap inference passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _check_finite(arr: np.ndarray, where: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """N-dimensional array participating in a differentiation tape.

    Attributes:
        data: the underlying numpy array.
        grad: gradient array of the same shape, populated by ``backward``.
        requires_grad: whether gradients should flow into this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A new leaf tensor sharing this tensor's data, cut from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Run reverse-mode differentiation from this tensor.

        Without an explicit ``seed`` the tensor must hold a single scalar;
        the seed then defaults to 1.  Visits the recorded graph in exact
        reverse execution order (topological order of the tape).
        """
        if seed is None:
            if self.data.size != 1:
                raise ParameterError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=self.data.dtype)
        if seed.shape != self.data.shape:
            raise DimensionError("backward seed shape mismatch")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, powc(other, -1.0))
        return mul(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    """Promote plain scalars/arrays to the dtype of the Tensor operand so
    float32 graphs are not silently widened."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Intermediate nodes need gradients too so their own closures can run;
    # only true leaves without requires_grad are skipped.
    if not t.requires_grad and t._backward_fn is None:
        return
    _check_finite(g, "backward")
    if t.grad is None:
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad = t.grad + g


def _compose(data: np.ndarray, parents: Sequence[Tensor],
             backward: Callable[[np.ndarray], None], name: str) -> Tensor:
    """Wrap an op result, recording parents/backward only when needed."""
    _check_finite(data, name)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _compose(data, (a, b), bwd, "add")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _compose(data, (a, b), bwd, "mul")


def powc(a, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    data = a.data ** exponent

    def bwd(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _compose(data, (a,), bwd, "powc")


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * data)

    return _compose(data, (a,), bwd, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _compose(data, (a,), bwd, "log")


def log_clamped(a, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is zero where the clamp is active."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, floor)
    data = np.log(clamped)

    def bwd(g):
        mask = (a.data > floor).astype(a.data.dtype)
        _accumulate(a, g * mask / clamped)

    return _compose(data, (a,), bwd, "log_clamped")


def absolute(a) -> Tensor:
    """Elementwise |x| with sign(x) backward (subgradient 0 at 0)."""
    a = as_tensor(a)
    data = np.abs(a.data)

    def bwd(g):
        _accumulate(a, g * np.sign(a.data))

    return _compose(data, (a,), bwd, "absolute")


def minimum_const(a, ceiling: float) -> Tensor:
    """Elementwise min(x, ceiling); gradient passes only where x < ceiling."""
    a = as_tensor(a)
    data = np.minimum(a.data, ceiling)

    def bwd(g):
        _accumulate(a, g * (a.data < ceiling).astype(a.data.dtype))

    return _compose(data, (a,), bwd, "minimum_const")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accumulate(a, g * data * (1.0 - data))

    return _compose(data, (a,), bwd, "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accumulate(a, g * (a.data > 0))

    return _compose(data, (a,), bwd, "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    data = np.where(a.data > 0, a.data, slope * a.data)

    def bwd(g):
        _accumulate(a, g * np.where(a.data > 0, 1.0, slope).astype(a.data.dtype))

    return _compose(data, (a,), bwd, "leaky_relu")


def activation(a, kind: str = "relu", slope: float = 0.2) -> Tensor:
    """Dispatch helper: ``kind`` is ``relu`` or ``leakyrelu``."""
    if kind == "relu":
        return relu(a)
    if kind == "leakyrelu":
        return leaky_relu(a, slope)
    raise ParameterError(f"unknown activation kind {kind!r}")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _compose(np.asarray(data), (a,), bwd, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _compose(data, (a,), bwd, "reshape")


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(part, g[tuple(index)])

    return _compose(data, parts, bwd, "concat")


def batch_slice(t, start: int, stop: int) -> Tensor:
    """Slice a tensor along the leading (batch) axis."""
    t = as_tensor(t)
    data = t.data[start:stop]

    def bwd(g):
        full = np.zeros_like(t.data)
        full[start:stop] = g
        _accumulate(t, full)

    return _compose(data, (t,), bwd, "batch_slice")


def matmul(a, b) -> Tensor:
    """2-D matrix product a @ b."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _compose(data, (a, b), bwd, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Affine map for B×N inputs with an M×N weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2:
        raise DimensionError("linear expects a flattened B×N input")
    if weight.data.ndim != 2 or weight.data.shape[1] != x.data.shape[1]:
        raise DimensionError(
            f"linear weight {weight.data.shape} incompatible with input {x.data.shape}")
    out = matmul(x, transpose2d(weight))
    if bias is not None:
        out = add(out, bias)
    return out


def transpose2d(a) -> Tensor:
    a = as_tensor(a)
    data = a.data.T.copy()

    def bwd(g):
        _accumulate(a, g.T)

    return _compose(data, (a,), bwd, "transpose2d")


def softmax(a, axis: int = 1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(a, data * (g - inner))

    return _compose(data, (a,), bwd, "softmax")


def softmax_channels(a) -> Tensor:
    """Per-pixel softmax across the channel axis of a B×C×H×W tensor."""
    return softmax(a, axis=1)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def _conv_windows(xp: np.ndarray, k: int, stride: int, rate: int,
                  out_h: int, out_w: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, k, k, out_h, out_w),
        strides=(sb, sc, sh * rate, sw * rate, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0,
           rate: int = 1) -> Tensor:
    """2-D convolution with sampling stride ``rate`` between kernel taps.

    The effective kernel extent is K + (K-1)(rate-1); rate=1 is standard
    convolution.  Zero padding, square kernels.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if not isinstance(rate, int) or rate < 1:
        raise ParameterError(f"rate must be an integer >= 1, got {rate}")
    if stride < 1 or padding < 0:
        raise ParameterError("stride must be >= 1 and padding >= 0")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError("conv2d expects B×C×H×W input and O×C×K×K weight")
    b, c, h, w = x.data.shape
    o, wc, k, k2 = weight.data.shape
    if k != k2:
        raise DimensionError("conv2d kernels must be square")
    if wc != c:
        raise DimensionError(f"weight expects {wc} input channels, input has {c}")
    eff = k + (k - 1) * (rate - 1)
    out_h = (h + 2 * padding - eff) // stride + 1
    out_w = (w + 2 * padding - eff) // stride + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(
            f"effective kernel {eff} exceeds padded input {h + 2 * padding}×{w + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.ascontiguousarray(_conv_windows(xp, k, stride, rate, out_h, out_w))
    cols2 = cols.reshape(b, c * k * k, out_h * out_w)
    w2 = weight.data.reshape(o, c * k * k)
    data = np.matmul(w2[None], cols2).reshape(b, o, out_h, out_w)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (o,):
            raise DimensionError(f"bias must have shape ({o},)")
        data += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(b, o, out_h * out_w))
        gw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
        _accumulate(weight, gw.reshape(weight.data.shape))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        taps = np.matmul(w2.T[None], g2).reshape(b, c, k, k, out_h, out_w)
        gxp = np.zeros_like(xp)
        span_h = (out_h - 1) * stride + 1
        span_w = (out_w - 1) * stride + 1
        for k1 in range(k):
            for kk in range(k):
                gxp[:, :, k1 * rate:k1 * rate + span_h:stride,
                    kk * rate:kk * rate + span_w:stride] += taps[:, :, k1, kk]
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        _accumulate(x, gxp)

    return _compose(data, parents, bwd, "conv2d")


def _pool_check(x: Tensor, window: int, stride: int | None) -> int:
    if stride is None:
        stride = window
    if window != stride:
        raise ParameterError("only non-overlapping pooling (window == stride) is supported")
    if window < 1:
        raise ParameterError("pooling window must be >= 1")
    if x.data.ndim != 4:
        raise DimensionError("pooling expects a B×C×H×W tensor")
    _, _, h, w = x.data.shape
    if h % window or w % window:
        raise DimensionError(
            f"spatial extents {h}×{w} not divisible by window {window}")
    return window


def maxpool2d(x, window: int, stride: int | None = None) -> Tensor:
    """Window maximum; gradient routes to the first maximal cell
    (row-major order inside the window) on ties."""
    x = as_tensor(x)
    window = _pool_check(x, window, stride)
    b, c, h, w = x.data.shape
    oh, ow = h // window, w // window
    tiles = (x.data.reshape(b, c, oh, window, ow, window)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(b, c, oh, ow, window * window))
    arg = tiles.argmax(axis=-1)
    data = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gt = np.zeros_like(tiles)
        np.put_along_axis(gt, arg[..., None], g[..., None], axis=-1)
        gx = (gt.reshape(b, c, oh, ow, window, window)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(b, c, h, w))
        _accumulate(x, gx)

    return _compose(data, (x,), bwd, "maxpool2d")


def avgpool2d(x, window: int, stride: int | None = None) -> Tensor:
    """Mean over non-overlapping windows; gradient spreads uniformly."""
    x = as_tensor(x)
    window = _pool_check(x, window, stride)
    b, c, h, w = x.data.shape
    oh, ow = h // window, w // window
    tiles = x.data.reshape(b, c, oh, window, ow, window)
    data = tiles.sum(axis=(3, 5)) / float(window * window)

    def bwd(g):
        gx = np.broadcast_to(
            g[:, :, :, None, :, None] / float(window * window),
            (b, c, oh, window, ow, window)).reshape(b, c, h, w)
        _accumulate(x, gx.copy())

    return _compose(data, (x,), bwd, "avgpool2d")


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over batch and spatial dims.

    Train mode normalizes with batch statistics and updates the running
    arrays in place (momentum 0.1); eval mode uses the running statistics.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError("batchnorm2d expects a B×C×H×W tensor")
    if x.data.shape[0] == 0:
        raise ParameterError("batchnorm2d on an empty batch")
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    c = x.data.shape[1]
    gview = reshape(gamma, (1, c, 1, 1))
    bview = reshape(beta, (1, c, 1, 1))
    if training:
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        centered = x - mu
        var = tmean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.data.reshape(c)
        running_var *= (1.0 - momentum)
        running_var += momentum * var.data.reshape(c)
        inv = powc(add(var, eps), -0.5)
        xhat = mul(centered, inv)
    else:
        mu = running_mean.reshape(1, c, 1, 1)
        inv = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
        xhat = mul(add(x, -mu), Tensor(inv))
    return add(mul(xhat, gview), bview)


def bilinear_upsample(x, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear interpolation to ``out_h``×``out_w``.

    Inference-only: the result is detached from the tape.  Corner pixels of
    the input map exactly onto corner pixels of the output.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim < 2:
        raise DimensionError("bilinear_upsample needs at least 2 spatial dims")
    h, w = arr.shape[-2:]
    if out_h < h or out_w < w:
        raise ParameterError("bilinear_upsample cannot shrink the input")
    data = _bilinear_resize(arr, out_h, out_w)
    return Tensor(data)


def _bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    if h == 1:
        ys = np.zeros(out_h)
    if w == 1:
        xs = np.zeros(out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).reshape(-1, 1)
    wx = (xs - x0).reshape(1, -1)
    p00 = arr[..., y0[:, None], x0[None, :]]
    p01 = arr[..., y0[:, None], x1[None, :]]
    p10 = arr[..., y1[:, None], x0[None, :]]
    p11 = arr[..., y1[:, None], x1[None, :]]
    top = p00 * (1 - wx) + p01 * wx
    bot = p10 * (1 - wx) + p11 * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------


class SpectralState:
    """Persistent power-iteration state for one normalized weight.

    ``u`` approximates the top left-singular vector of the weight viewed as
    a 2-D matrix (output rows × everything else) and is kept unit-norm.
    """

    def __init__(self, rows: int, rng: np.random.Generator,
                 power_iterations: int = 1, dtype=np.float64):
        u = rng.standard_normal(rows).astype(dtype)
        self.u = u / max(np.linalg.norm(u), 1e-12)
        self.power_iterations = power_iterations


def spectral_normalize(weight: Tensor, state: SpectralState) -> Tensor:
    """Divide ``weight`` by its power-iteration top singular value estimate.

    Runs ``state.power_iterations`` iterations, updating ``state.u`` in
    place; the estimate is treated as a constant in backward.
    """
    weight = as_tensor(weight)
    mat = weight.data.reshape(weight.data.shape[0], -1)
    u = state.u
    for _ in range(state.power_iterations):
        v = mat.T @ u
        v = v / max(np.linalg.norm(v), 1e-12)
        u = mat @ v
        u = u / max(np.linalg.norm(u), 1e-12)
    state.u = u
    sigma = float(u @ mat @ v)
    return mul(weight, 1.0 / max(sigma, 1e-12))


def spectral_sigma(mat: np.ndarray, iterations: int = 50) -> float:
    """Standalone power-iteration estimate of the top singular value."""
    mat = mat.reshape(mat.shape[0], -1)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(mat.shape[0])
    u /= max(np.linalg.norm(u), 1e-12)
    for _ in range(iterations):
        v = mat.T @ u
        v /= max(np.linalg.norm(v), 1e-12)
        u = mat @ v
        u /= max(np.linalg.norm(u), 1e-12)
    return float(u @ mat @ v)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor],
              eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar computation against central
    differences.

    Returns the max over all coordinates of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    Inputs must be float64; everything is evaluated in wide precision.
    """
    inputs = [as_tensor(t) for t in inputs]
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ParameterError("gradcheck requires float64 inputs")
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ParameterError("gradcheck requires a scalar-valued computation")
    out.backward()

    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = f(*inputs).item()
            flat[idx] = orig - eps
            lo = f(*inputs).item()
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic.reshape(-1)[idx]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
