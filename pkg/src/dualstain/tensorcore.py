"""Minimal dense tensors with hand-written forward/backward passes.

Every op builds its output eagerly and records a closure that maps the
output gradient to input gradients.  ``Tensor.backward`` replays those
closures in reverse topological order.  Only the ops needed by the blocks
in :mod:`dualstain.neuralblocks` and the detector are provided.

Two precisions are supported: ``"standard"`` (float32) for training and
``"high"`` (float64) for finite-difference gradient checks.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DTYPES = {"standard": np.float32, "high": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradCheckError(RuntimeError):
    """Raised when a gradient check cannot be evaluated."""


def _precision_of(dtype) -> str:
    return "high" if np.dtype(dtype) == np.float64 else "standard"


class Tensor:
    """Dense row-major array plus an optional gradient and backward closure."""

    __slots__ = ("_backward", "_parents", "data", "grad", "name", "requires_grad")

    def __init__(self, data, precision: str | None = None, requires_grad: bool = False,
                 name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if precision is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        else:
            dtype = DTYPES[precision]
        self.data = np.array(data, dtype=dtype, copy=True)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def precision(self) -> str:
        return _precision_of(self.data.dtype)

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def flat(self) -> np.ndarray:
        """Row-major flat view of the buffer."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision!r})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    # -- graph --------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """A trainable leaf: ``value`` is the tensor itself, ``grad`` matches its shape."""

    __slots__ = ()

    def __init__(self, data, precision: str | None = "standard", name: str | None = None):
        super().__init__(data, precision=precision, requires_grad=True, name=name)

    @property
    def value(self) -> Tensor:
        return self

    def astype(self, precision: str) -> Param:
        return Param(self.data, precision=precision, name=self.name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    precision = like.precision if like is not None else None
    return Tensor(np.asarray(x), precision=precision)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in ts)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    if _needs_grad(*parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def function(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap a precomputed result as a graph node.

    ``backward`` maps the output gradient to one gradient (or None) per parent.
    """
    return _make(np.asarray(data), tuple(parents), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data.astype(a.data.dtype, copy=False)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    bd = b.data.astype(a.data.dtype, copy=False)
    out = a.data * bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    bd = b.data.astype(a.data.dtype, copy=False)
    out = a.data / bd

    def backward(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)

    return _make(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside ``[lo, hi]``."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, cuts, axis=axis)))


def pad(x: Tensor, widths, value: float = 0.0) -> Tensor:
    """Constant padding; ``widths`` as for ``np.pad``."""
    out = np.pad(x.data, widths, mode="constant", constant_values=value)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _make(out, (x,), lambda g: (g[sl],))


def crop(x: Tensor, slices) -> Tensor:
    slices = tuple(slices)
    out = x.data[slices]

    def backward(g):
        full = np.zeros_like(x.data)
        full[slices] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), backward)


def roll(x: Tensor, shifts, axes) -> Tensor:
    out = np.roll(x.data, shifts, axes)
    neg = tuple(-s for s in np.atleast_1d(shifts))
    return _make(out, (x,), lambda g: (np.roll(g, neg, axes),))


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[index]`` along axis 0."""
    index = np.asarray(index)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, pad_: int) -> int:
    span = n + 2 * pad_ - k
    if span < 0:
        raise ShapeError(f"window {k} with pad {pad_} larger than extent {n}")
    return span // stride + 1


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with an OCkk kernel.

    The sum is evaluated with an im2col gather followed by one matrix product;
    the result is the same arithmetic as the direct quadruple loop.
    """
    N, C, H, W = x.shape
    O, Ck, kh, kw = k.shape
    if Ck != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {k.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if pad < 0:
        raise ShapeError("conv2d pad must be >= 0")
    Ho = _out_extent(H, kh, stride, pad)
    Wo = _out_extent(W, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, C, kh, kw) -> (N*Ho*Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, -1)
    kmat = k.data.reshape(O, -1)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data.reshape(1, O)
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
        gk = (gm.T @ cols).reshape(k.shape)
        gcols = (gm @ kmat).reshape(N, Ho, Wo, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        gb = gm.sum(axis=0).reshape(bias.shape) if bias is not None else None
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, k, bias) if bias is not None else (x, k)
    return _make(out, parents, backward)


def maxpool2d(x: Tensor, kernel: int, stride: int = 1, pad: int = 0,
              pad_value: float = -np.inf) -> Tensor:
    """Sliding-window max over NCHW; gradient goes to the first argmax."""
    if kernel < 1:
        raise ShapeError("maxpool kernel must be >= 1")
    N, C, H, W = x.shape
    if kernel > H + 2 * pad or kernel > W + 2 * pad:
        raise ShapeError(f"maxpool kernel {kernel} larger than padded input {x.shape}")
    Ho = (H + 2 * pad - kernel) // stride + 1
    Wo = (W + 2 * pad - kernel) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                constant_values=pad_value) if pad else x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, :(Ho - 1) * stride + 1:stride, :(Wo - 1) * stride + 1:stride]
    flatwin = win.reshape(N, C, Ho, Wo, kernel * kernel)
    arg = flatwin.argmax(axis=-1)
    out = np.take_along_axis(flatwin, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        di, dj = np.divmod(arg, kernel)
        rows = np.arange(Ho).reshape(1, 1, Ho, 1) * stride + di
        cols = np.arange(Wo).reshape(1, 1, 1, Wo) * stride + dj
        n_idx = np.arange(N).reshape(N, 1, 1, 1)
        c_idx = np.arange(C).reshape(1, C, 1, 1)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        np.add.at(gxp, (np.broadcast_to(n_idx, arg.shape), np.broadcast_to(c_idx, arg.shape),
                        rows, cols), g)
        return (gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp,)

    return _make(np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is taken as 0."""
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = d * cdf

    def backward(g):
        return (g * (cdf + d * _INV_SQRT2PI * np.exp(-0.5 * d * d)),)

    return _make(out.astype(d.dtype, copy=False), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; ``-inf`` entries get exactly zero weight."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    d = x.data
    z = d - d.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shape {gamma.shape} does not match {x.shape}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        n = d.shape[-1]
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        red = tuple(range(d.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gamma, beta), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None
                    ) -> Tensor:
    """Sum of binary cross-entropy terms, stable for large |logit|."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=z.dtype)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((w * loss).sum(), dtype=z.dtype)

    def backward(g):
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return (g * w * (p - t),)

    return _make(out, (logits,), backward)


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               skip: dict[int, np.ndarray] | None = None, floor: float = 1e-3) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` is re-evaluated with each coordinate of each parameter nudged by
    ``+-eps``.  The error for a coordinate is ``|a - n| / max(|a|, |n|, s)``
    where ``s = floor * max|analytic|`` keeps near-zero coordinates from
    dominating.  ``skip`` maps a parameter index to a boolean mask of
    coordinates to leave out (kink neighborhoods).
    """
    params = list(params)
    for p in params:
        if p.precision != "high":
            raise GradCheckError("grad_check requires high-precision parameters")
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise GradCheckError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise GradCheckError(f"function value is not finite: {out.data}")
    out.backward()
    analytic = [p.grad.copy() for p in params]
    numeric = []
    for pi, p in enumerate(params):
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(
                    f"non-finite function value perturbing parameter {pi} coordinate {i}")
            nflat[i] = (fp - fm) / (2 * eps)
        numeric.append(num)
    scale = max((np.abs(a).max() for a in analytic if a.size), default=0.0)
    s = max(floor * scale, 1e-12)
    worst = 0.0
    for pi, (a, n) in enumerate(zip(analytic, numeric)):
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), s)
        if skip is not None and pi in skip:
            err = np.where(skip[pi], 0.0, err)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
