"""Dense NCHW tensors with a reverse-mode gradient tape.

Only the kernels the segmentation networks need are provided: 2-D
cross-correlation, max pooling, nearest upsampling, batch norm, a few
elementwise maps and reductions.  Every op that touches a tensor with
``requires_grad`` set is appended to the innermost active :class:`Tape`;
:func:`backward` replays that record in reverse.

    >>> w = Tensor([2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * Tensor([1.0, 4.0])).sum()
    >>> backward(tape, loss)[w]
    array([1., 4.])
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "ConvParams",
    "BatchNormParams",
    "backward",
    "gradcheck",
    "gradcheck_report",
    "GradcheckReport",
    "conv2d",
    "maxpool2d",
    "upsample_nearest",
    "relu",
    "sigmoid",
    "log",
    "batchnorm",
    "concat",
    "kaiming_uniform",
]


class Tensor:
    """A numpy array that can take part in taped differentiation."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return len(self.data)

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tsum(self) * (1.0 / self.size)


# ---------------------------------------------------------------------------
# tape


_local = threading.local()


def _active_tapes() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _note_branch(pattern: np.ndarray) -> None:
    """Log which side of a kink each element took, if gradcheck is listening."""
    sink = getattr(_local, "branches", None)
    if sink is not None:
        sink.append(pattern)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    grad_fn: Callable


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    A tape is single-use: after :func:`backward` consumes it, further use
    raises :class:`TapeError`.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc):
        stack = _active_tapes()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor, loss_grad=None, params: Optional[Iterable[Tensor]] = None):
        return backward(self, loss, loss_grad, params)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out: Tensor, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    if not any(t.requires_grad for t in inputs):
        return out
    stack = _active_tapes()
    if not stack:
        return out
    tape = stack[-1]
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    out.requires_grad = True
    tape.records.append(_Record(out, tuple(inputs), grad_fn))
    return out


def backward(tape: Tape, loss: Tensor, loss_grad=None, params: Optional[Iterable[Tensor]] = None) -> dict:
    """Propagate ``loss_grad`` (default ones) back through ``tape``.

    Returns a dict mapping each leaf tensor that required grad to its
    gradient array.  Tensors listed in ``params`` are always present,
    with a zero gradient when the loss does not depend on them.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    tape.consumed = True
    seed = np.ones_like(loss.data) if loss_grad is None else np.asarray(
        loss_grad.data if isinstance(loss_grad, Tensor) else loss_grad, dtype=loss.dtype
    )
    if seed.shape != loss.shape:
        raise ShapeError(f"loss_grad shape {seed.shape} != loss shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): seed}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        produced.add(id(rec.out))
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.grad_fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            leaves[key] = t
    result = {}
    for key, t in leaves.items():
        if key not in produced and key in grads:
            result[t] = grads[key]
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    tape.records = []
    return result


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b)
    out = Tensor(a.data + b.data)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad / bd)

    def grad_fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _record(out, (a, b), grad_fn)


def tsum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    out = Tensor(np.asarray(a.data.sum(), dtype=dtype))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def log(a: Tensor, floor: float = 1e-7) -> Tensor:
    """Natural log with the argument clamped below at ``floor``."""
    clipped = np.maximum(a.data, floor)
    out = Tensor(np.log(clipped))
    live = a.data >= floor
    _note_branch(live)
    return _record(out, (a,), lambda g: (np.where(live, g / clipped, 0.0).astype(a.dtype),))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    _note_branch(mask)
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype))
    return _record(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _logistic(x.data)
    return _record(Tensor(s), (x,), lambda g: (g * s * (1 - s),))


def _logistic(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _record(out, tensors, grad_fn)


# ---------------------------------------------------------------------------
# spatial kernels


@dataclass
class ConvParams:
    """Weights of a 2-D convolution: weight is (C_out, C_in, K, K)."""

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv weight must be (C_out, C_in, K, K), got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match C_out={self.weight.shape[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def num_params(self) -> int:
        k = self.kernel
        return k * k * self.c_in * self.c_out + (self.c_out if self.bias is not None else 0)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"non-integral conv output: ({size} + 2*{pad} - {k}) / {stride} + 1")
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlate ``x`` (N, C_in, H, W) with ``p.weight``."""
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[1] != p.c_in:
        raise ShapeError(f"conv2d expects (N, {p.c_in}, H, W) input, got {x.shape}")
    n, c, h, w = x.shape
    k, s, pad = p.kernel, p.stride, p.padding
    ho, wo = _conv_out(h, k, s, pad), _conv_out(w, k, s, pad)
    wd = p.weight.data
    w2 = wd.reshape(p.c_out, -1)
    if k == 1 and pad == 0:
        xs = x.data[:, :, ::s, ::s] if s > 1 else x.data
        cols = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        cols = _im2col(xp, k, s, ho, wo)
    out = np.matmul(w2, cols)  # (N, C_out, Ho*Wo)
    if p.bias is not None:
        out += p.bias.data[None, :, None]
    out = Tensor(out.reshape(n, p.c_out, ho, wo).astype(x.dtype, copy=False))

    inputs = [x, p.weight] + ([p.bias] if p.bias is not None else [])

    def grad_fn(g):
        g2 = g.reshape(n, p.c_out, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)  # (N, C_in*K*K, Ho*Wo)
            if k == 1 and pad == 0 and s == 1:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(n, c, k, k, ho, wo)
                gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, i, j]
                gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        grads = [gx, gw.astype(wd.dtype, copy=False)]
        if p.bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return tuple(grads)

    return _record(out, inputs, grad_fn)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d window {k} does not divide spatial dims {h}x{w}")
    ho, wo = h // k, w // k
    blocks = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = blocks.argmax(axis=-1)
    _note_branch(arg)
    out = Tensor(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0])

    def grad_fn(g):
        gb = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _record(out, (x,), grad_fn)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    x = _as_tensor(x)
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3))
    return _record(out, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


# ---------------------------------------------------------------------------
# batch norm


@dataclass
class BatchNormParams:
    """Per-channel normalization state.

    ``running_mean``/``running_var`` are buffers, not trainable.  With
    ``affine`` off the layer has no trainable parameters at all.
    """

    num_channels: int
    affine: bool = True
    eps: float = 1e-5
    momentum: float = 0.1
    dtype: type = np.float32
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None

    def __post_init__(self):
        c = self.num_channels
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=self.dtype)
        if self.running_var is None:
            self.running_var = np.ones(c, dtype=self.dtype)
        if self.affine and self.weight is None:
            self.weight = Tensor(np.ones(c, dtype=self.dtype), requires_grad=True)
            self.bias = Tensor(np.zeros(c, dtype=self.dtype), requires_grad=True)
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias] if self.affine else []

    def num_params(self) -> int:
        return 2 * self.num_channels if self.affine else 0


def batchnorm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Normalize each channel of ``x`` (N, C, H, W).

    In training mode batch statistics are used and the running
    statistics are updated in place (unbiased variance, as is customary).
    """
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[1] != p.num_channels:
        raise ShapeError(f"batchnorm expects (N, {p.num_channels}, H, W), got {x.shape}")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        p.running_mean *= 1 - p.momentum
        p.running_mean += p.momentum * mean.astype(p.running_mean.dtype)
        p.running_var *= 1 - p.momentum
        p.running_var += p.momentum * unbiased.astype(p.running_var.dtype)
    else:
        mean, var = p.running_mean, p.running_var
    inv = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None].astype(x.dtype)) * inv[None, :, None, None]
    if p.affine:
        out = xhat * p.weight.data[None, :, None, None] + p.bias.data[None, :, None, None]
        inputs = (x, p.weight, p.bias)
    else:
        out = xhat
        inputs = (x,)
    out = Tensor(out.astype(x.dtype, copy=False))

    def grad_fn(g):
        gxhat = g * p.weight.data[None, :, None, None] if p.affine else g
        if training:
            s1 = gxhat.sum(axis=axes, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv[None, :, None, None] / m * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv[None, :, None, None]
        if not p.affine:
            return (gx,)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record(out, inputs, grad_fn)


# ---------------------------------------------------------------------------
# init and gradient checking


def kaiming_uniform(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """He-uniform init with fan-in scaling and ReLU gain."""
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class GradcheckReport:
    max_error: float
    checked: int
    skipped: int  # stencils that crossed a relu / maxpool / log-clamp kink

    @property
    def total(self) -> int:
        return self.checked + self.skipped


def _eval_branches(model, inputs):
    _local.branches = []
    try:
        value = float(model(inputs).data)
        return value, _local.branches
    finally:
        _local.branches = None


def _same_branches(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck_report(
    model, inputs, h: float = 1e-4, params: Optional[Sequence[Tensor]] = None, skip_kinks: bool = True
) -> GradcheckReport:
    """Compare taped gradients with central differences, one element at a time.

    ``model(inputs)`` must return a scalar :class:`Tensor`.  Parameters
    default to ``model.parameters()``.  Relative error is
    ``|a - n| / max(|a|, |n|, 1e-6)`` so that gradients at the
    round-off floor do not dominate.  Batch-norm buffers are restored
    after every evaluation when the model exposes ``buffers()``.

    A central difference is only meaningful when the loss is smooth over
    ``[x - h, x + h]``.  With ``skip_kinks`` the branch taken by every
    relu, maxpool and clamped log is recorded at ``x`` and at both
    probes; elements whose probes land on a different branch are
    counted in ``skipped`` instead of being scored.
    """
    params = list(model.parameters() if params is None else params)
    if not params:
        return GradcheckReport(0.0, 0, 0)
    snapshot = _snapshot(model)
    _local.branches = []
    try:
        with Tape() as tape:
            loss = model(inputs)
        base = _local.branches
    finally:
        _local.branches = None
    analytic = backward(tape, loss, params=params)
    _restore(model, snapshot)

    worst, checked, skipped = 0.0, 0, 0
    for p in params:
        flat = p.data.reshape(-1)
        ga = analytic[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp, bp = _eval_branches(model, inputs)
            _restore(model, snapshot)
            flat[i] = orig - h
            fm, bm = _eval_branches(model, inputs)
            _restore(model, snapshot)
            flat[i] = orig
            if skip_kinks and not (_same_branches(base, bp) and _same_branches(base, bm)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            denom = max(abs(ga[i]), abs(num), 1e-6)
            worst = max(worst, abs(ga[i] - num) / denom)
            checked += 1
    return GradcheckReport(float(worst), checked, skipped)


def gradcheck(model, inputs, h: float = 1e-4, params: Optional[Sequence[Tensor]] = None) -> float:
    """Worst relative error over kink-free stencils; see :func:`gradcheck_report`."""
    return gradcheck_report(model, inputs, h, params).max_error


def _snapshot(model):
    bufs = getattr(model, "buffers", None)
    return [b.copy() for b in bufs()] if bufs else None


def _restore(model, snapshot):
    if snapshot is None:
        return
    for b, saved in zip(model.buffers(), snapshot):
        b[...] = saved
