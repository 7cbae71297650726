"""Dense tensors with reverse-mode automatic differentiation.

Every value flowing through the scan kernels, the projector branches and the
loss functions is a ``Tensor``: a numpy array plus an optional gradient
accumulator.  Operations record themselves on an execution-ordered tape (one
record per op, held by the output tensor); ``Tensor.backward`` replays the
records in strict reverse execution order, which is always a valid
topological order of the DAG.

Broadcasting follows the numpy rule: shapes align on trailing axes and
extent-1 axes stretch.  Gradients of broadcast operands are summed back to
the operand's own shape.

All op boundaries check for NaN/Inf and raise ``NonFiniteError`` so that a
diverging computation fails loudly instead of propagating garbage.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float64


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared at an op boundary."""


class DetachedTensorError(RuntimeError):
    """Backward was requested through a tensor outside any recorded graph."""


_seq = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Suspend tape recording; outputs created inside are detached."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _ensure_finite(arr, op):
    # One reduction instead of a full isfinite scan: any NaN/Inf poisons the
    # sum.  A finite-but-huge sum overflow would be a false alarm, so confirm
    # with the exact check before raising.
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite result in op '{op}'")


def _unbroadcast(g, shape):
    """Sum gradient g back down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class _Record:
    """One executed op: inputs, a pull-back closure, and its execution index."""

    __slots__ = ("inputs", "pullback", "seq", "name")

    def __init__(self, inputs, pullback, name):
        self.inputs = inputs
        self.pullback = pullback
        self.seq = next(_seq)
        self.name = name


class Tensor:
    """N-dimensional array participating in reverse-mode differentiation.

    `data` is a contiguous numpy array (float32 or float64; float64 is the
    default so tests run at full precision, training configs opt into
    float32).  `grad` is lazily allocated by backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "_record", "_detached")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        _ensure_finite(self.data, "constant")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._record = None
        self._detached = False

    # -- construction helpers ------------------------------------------------

    @classmethod
    def _from_op(cls, data, inputs, pullback, name):
        _ensure_finite(data, name)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._record = None
        out._detached = False
        needs = any(t.requires_grad for t in inputs)
        if needs and _grad_enabled:
            out.requires_grad = True
            out._record = _Record(inputs, pullback, name)
        else:
            out.requires_grad = False
            out._detached = needs and not _grad_enabled
        return out

    @staticmethod
    def _wrap(other, like):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=like.data.dtype))

    def detach(self) -> "Tensor":
        out = Tensor(self.data.copy())
        out._detached = True
        return out

    # -- shape & repr --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise ValueError(f"expected a scalar tensor, got shape {self.shape}")

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = Tensor._wrap(other, self)
        a, b = self, other

        def pull(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))

        return Tensor._from_op(a.data + b.data, (a, b), pull, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._wrap(other, self)
        a, b = self, other

        def pull(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.data.shape))

        return Tensor._from_op(a.data - b.data, (a, b), pull, "sub")

    def __rsub__(self, other):
        return Tensor._wrap(other, self) - self

    def __mul__(self, other):
        other = Tensor._wrap(other, self)
        a, b = self, other

        def pull(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return Tensor._from_op(a.data * b.data, (a, b), pull, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._wrap(other, self)
        a, b = self, other
        out_data = a.data / b.data

        def pull(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

        return Tensor._from_op(out_data, (a, b), pull, "div")

    def __rtruediv__(self, other):
        return Tensor._wrap(other, self) / self

    def __neg__(self):
        a = self

        def pull(g):
            if a.requires_grad:
                _accum(a, -g)

        return Tensor._from_op(-a.data, (a,), pull, "neg")

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a, n = self, float(exponent)

        def pull(g):
            if a.requires_grad:
                _accum(a, g * n * a.data ** (n - 1.0))

        return Tensor._from_op(a.data ** n, (a,), pull, "pow")

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def pull(g):
            if a.requires_grad:
                _accum(a, g * out_data)

        return Tensor._from_op(out_data, (a,), pull, "exp")

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def pull(g):
            if a.requires_grad:
                _accum(a, g * 0.5 / out_data)

        return Tensor._from_op(out_data, (a,), pull, "sqrt")

    def abs(self):
        a = self

        def pull(g):
            if a.requires_grad:
                _accum(a, g * np.sign(a.data))

        return Tensor._from_op(np.abs(a.data), (a,), pull, "abs")

    def sigmoid(self):
        a = self
        out_data = expit(a.data)

        def pull(g):
            if a.requires_grad:
                _accum(a, g * out_data * (1.0 - out_data))

        return Tensor._from_op(out_data, (a,), pull, "sigmoid")

    def silu(self):
        a = self
        s = expit(a.data)

        def pull(g):
            if a.requires_grad:
                _accum(a, g * (s + a.data * s * (1.0 - s)))

        return Tensor._from_op(a.data * s, (a,), pull, "silu")

    def softplus(self):
        # log(1 + e^x) in the overflow-safe form log1p(e^-|x|) + max(x, 0).
        a = self
        out_data = np.log1p(np.exp(-np.abs(a.data))) + np.maximum(a.data, 0.0)

        def pull(g):
            if a.requires_grad:
                _accum(a, g * expit(a.data))

        return Tensor._from_op(out_data, (a,), pull, "softplus")

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def pull(g):
            if not a.requires_grad:
                return
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape))

        return Tensor._from_op(np.asarray(out_data), (a,), pull, "sum")

    def mean(self, axis=None, keepdims=False):
        a = self
        count = a.data.size if axis is None else np.prod(
            [a.data.shape[ax] for ax in np.atleast_1d(axis)]
        )
        out_data = a.data.mean(axis=axis, keepdims=keepdims)

        def pull(g):
            if not a.requires_grad:
                return
            gg = g / count
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape))

        return Tensor._from_op(np.asarray(out_data), (a,), pull, "mean")

    # -- shape manipulation -----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def pull(g):
            if a.requires_grad:
                _accum(a, g.reshape(a.data.shape))

        return Tensor._from_op(np.ascontiguousarray(a.data.reshape(shape)), (a,), pull, "reshape")

    def transpose(self, axes):
        a = self
        inv = tuple(np.argsort(axes))

        def pull(g):
            if a.requires_grad:
                _accum(a, np.ascontiguousarray(g.transpose(inv)))

        return Tensor._from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), pull, "transpose")

    def unsqueeze(self, axis):
        a = self

        def pull(g):
            if a.requires_grad:
                _accum(a, np.squeeze(g, axis=axis))

        return Tensor._from_op(np.expand_dims(a.data, axis), (a,), pull, "unsqueeze")

    def __getitem__(self, key):
        a = self
        out_data = np.ascontiguousarray(a.data[key])
        advanced = _is_advanced(key)

        def pull(g):
            if not a.requires_grad:
                return
            z = np.zeros_like(a.data)
            if advanced:
                np.add.at(z, key, g)
            else:
                z[key] += g
            _accum(a, z)

        return Tensor._from_op(out_data, (a,), pull, "getitem")

    def take(self, indices, axis):
        """Gather along one axis; duplicate indices accumulate on backward."""
        a = self
        idx = np.asarray(indices)
        out_data = np.take(a.data, idx, axis=axis)
        key = (slice(None),) * axis + (idx,)

        def pull(g):
            if a.requires_grad:
                z = np.zeros_like(a.data)
                np.add.at(z, key, g)
                _accum(a, z)

        return Tensor._from_op(np.ascontiguousarray(out_data), (a,), pull, "take")

    # -- linear algebra ---------------------------------------------------------

    def __matmul__(self, other):
        other = Tensor._wrap(other, self)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must have ndim >= 2")

        def pull(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

        return Tensor._from_op(a.data @ b.data, (a, b), pull, "matmul")

    # -- backward ----------------------------------------------------------------

    def backward(self):
        """Populate gradients of every requires-grad leaf reachable from self.

        Self must be scalar.  Constants (no recorded ops, not detached) are a
        silent no-op; explicitly detached tensors raise.
        """
        if self._detached:
            raise DetachedTensorError("backward through a detached tensor")
        if self.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        if self._record is None:
            if self.requires_grad:
                _accum(self, np.ones_like(self.data))
            return
        tape = GradTape.of(self)
        _accum(self, np.ones_like(self.data))
        tape.replay()


class GradTape:
    """Ordered record of the ops behind one output, replayed in reverse.

    Records live on their output tensors; this object collects the ones
    reachable from `root` and orders them by execution index so that replay
    visits them newest-first.
    """

    __slots__ = ("root", "entries")

    def __init__(self, root, entries):
        self.root = root
        self.entries = entries

    @classmethod
    def of(cls, root: Tensor) -> "GradTape":
        seen = set()
        entries = []
        stack = [root]
        while stack:
            t = stack.pop()
            rec = t._record
            if rec is None or id(t) in seen:
                continue
            seen.add(id(t))
            entries.append((rec.seq, t))
            stack.extend(rec.inputs)
        entries.sort(key=lambda e: e[0], reverse=True)
        return cls(root, entries)

    def replay(self):
        for _, t in self.entries:
            if t.grad is None:
                continue
            t._record.pullback(t.grad)

    def op_names(self):
        return [t._record.name for _, t in self.entries]


def _accum(t, g):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _is_advanced(key):
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


# -- free-function ops --------------------------------------------------------


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def pull(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = (slice(None),) * axis + (slice(lo, hi),)
                _accum(t, g[sl])

    return Tensor._from_op(out_data, tuple(tensors), pull, "concat")


def stack(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def pull(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    return Tensor._from_op(out_data, tuple(tensors), pull, "stack")


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Select a where mask else b.  The mask is a constant boolean array."""
    mask = np.asarray(mask, dtype=bool)
    a = Tensor._wrap(a, b if isinstance(b, Tensor) else a)
    b = Tensor._wrap(b, a)

    def pull(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.where(mask, g, 0.0), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.where(mask, 0.0, g), b.data.shape))

    return Tensor._from_op(np.where(mask, a.data, b.data), (a, b), pull, "where")


def conv1d_depthwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 1-D convolution along the second-to-last axis.

    x: [..., L, C]; weight: [C, W] with odd W; zero padding keeps length L.
    Group count equals channel count, so channels never mix.
    """
    kw = weight.data.shape[1]
    if kw % 2 != 1:
        raise ValueError("kernel width must be odd")
    L = x.data.shape[-2]
    if L < 1:
        raise ValueError("sequence length must be >= 1")
    pad = kw // 2
    pad_spec = [(0, 0)] * (x.data.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, pad_spec)
    out_data = np.zeros_like(x.data)
    for j in range(kw):
        out_data += xp[..., j : j + L, :] * weight.data[:, j]
    inputs = [x, weight]
    if bias is not None:
        out_data = out_data + bias.data
        inputs.append(bias)

    def pull(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(kw):
                gxp[..., j : j + L, :] += g * weight.data[:, j]
            _accum(x, gxp[..., pad : pad + L, :] if pad else gxp)
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            reduce_axes = tuple(range(g.ndim - 1))
            for j in range(kw):
                gw[:, j] = (g * xp[..., j : j + L, :]).sum(axis=reduce_axes)
            _accum(weight, gw)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=tuple(range(g.ndim - 1))))

    return Tensor._from_op(out_data, tuple(inputs), pull, "conv1d_depthwise")


def l2_norm(x: Tensor, axis=None, keepdims=False) -> Tensor:
    return (x * x).sum(axis=axis, keepdims=keepdims).sqrt()


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two flat vectors."""
    num = (a * b).sum()
    return num / (l2_norm(a) * l2_norm(b))


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


# -- gradient checking ----------------------------------------------------------


def gradient_check(f, point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must map `point` to a scalar Tensor.  The error at each coordinate is
    |analytic - numeric| / max(1, |analytic|); the max over coordinates is
    returned.  Run at float64 for meaningful tolerances.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point.requires_grad = True
    point.grad = None
    out = f(point)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("f must return a scalar Tensor")
    out.backward()
    analytic = (
        point.grad.copy() if point.grad is not None else np.zeros_like(point.data)
    )

    numeric = np.zeros_like(point.data)
    flat = point.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(point).item()
            flat[i] = orig - step
            down = f(point).item()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * step)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
