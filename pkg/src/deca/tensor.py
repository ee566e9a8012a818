"""Dense tensors with tape-style reverse-mode autodiff on numpy.

Float32 is the training dtype; wrap construction and forward passes in
``default_dtype(np.float64)`` when verifying gradients. The tape is rebuilt
on every forward pass; gradients accumulate until explicitly zeroed.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the construction dtype (e.g. float64 for checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def _unbroadcast(grad, shape):
    # Reduce a broadcasted gradient back to `shape`.
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense array plus the closure that routes gradients to its inputs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        # Already-float arrays keep their dtype so a float64 graph stays
        # float64 even outside the default_dtype context.
        if not (isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES):
            data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- introspection ----------------------------------------------------

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
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._item_err()

    def _item_err(self):
        raise ContractError(f"item() needs a scalar, got shape {self.shape}")

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff ----------------------------------------------------------

    def backward(self):
        """Populate grads of every requires_grad tensor reachable from self.

        Only defined for scalar outputs of a recorded graph; gradients add
        onto whatever is already stored.
        """
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a detached tensor (no graph recorded)")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        # Non-leaf grads are scratch space for this pass only.
        for node in topo:
            if node._backward is not None:
                node.grad = None

    # -- op helpers ----------------------------------------------------------

    @staticmethod
    def _coerce(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def _unary(self, out_data, grad_fn):
        if not self.requires_grad:
            return Tensor(out_data)
        src = self

        def backward(g):
            src._accumulate(grad_fn(g))

        return Tensor(out_data, True, (src,), backward)

    def _binary(self, other, out_data, grad_a, grad_b):
        a, b = self, other
        if not (a.requires_grad or b.requires_grad):
            return Tensor(out_data)

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad_a(g), a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(grad_b(g), b.shape))

        return Tensor(out_data, True, (a, b), backward)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        return self._binary(other, self.data + other.data, lambda g: g, lambda g: g)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        return self._binary(other, self.data - other.data, lambda g: g, lambda g: -g)

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __neg__(self):
        return self._unary(-self.data, lambda g: -g)

    def __mul__(self, other):
        other = self._coerce(other)
        return self._binary(
            other,
            self.data * other.data,
            lambda g: g * other.data,
            lambda g: g * self.data,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        return self._binary(
            other,
            self.data / other.data,
            lambda g: g / other.data,
            lambda g: -g * self.data / (other.data * other.data),
        )

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ContractError("only scalar exponents are supported")
        out = self.data**p
        return self._unary(out, lambda g: g * p * self.data ** (p - 1))

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shapes do not conform: {a.shape} vs {b.shape}")
        try:
            out = np.matmul(a, b)
        except ValueError as e:
            raise DimensionError(f"matmul broadcast failed: {a.shape} vs {b.shape}") from e

        def grad_a(g):
            return np.matmul(g, np.swapaxes(b, -1, -2))

        def grad_b(g):
            return np.matmul(np.swapaxes(a, -1, -2), g)

        src_a, src_b = self, other
        if not (src_a.requires_grad or src_b.requires_grad):
            return Tensor(out)

        def backward(g):
            if src_a.requires_grad:
                src_a._accumulate(_unbroadcast_matmul(grad_a(g), a.shape))
            if src_b.requires_grad:
                src_b._accumulate(_unbroadcast_matmul(grad_b(g), b.shape))

        return Tensor(out, True, (src_a, src_b), backward)

    # -- elementwise functions -------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return self._unary(out, lambda g: g * out)

    def log(self):
        return self._unary(np.log(self.data), lambda g: g / self.data)

    def sqrt(self):
        out = np.sqrt(self.data)
        return self._unary(out, lambda g: g * 0.5 / out)

    def tanh(self):
        out = np.tanh(self.data)
        return self._unary(out, lambda g: g * (1.0 - out * out))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return self._unary(out, lambda g: g * out * (1.0 - out))

    def abs(self):
        return self._unary(np.abs(self.data), lambda g: g * np.sign(self.data))

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        src = self

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, src.shape).copy()

        return self._unary(np.asarray(out), grad_fn)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else _axis_size(self.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.shape
        out = self.data.reshape(shape)
        return self._unary(out, lambda g: g.reshape(src_shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return self._unary(self.data.transpose(axes), lambda g: g.transpose(inv))

    def __getitem__(self, idx):
        out = self.data[idx]
        src = self
        basic = _is_basic_index(idx)

        def grad_fn(g):
            full = np.zeros_like(src.data)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return full

        return self._unary(out, grad_fn)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int)) or i is Ellipsis or i is None for i in items)


def _axis_size(shape, axis):
    if isinstance(axis, int):
        return shape[axis]
    return int(np.prod([shape[a] for a in axis]))


def _unbroadcast_matmul(grad, shape):
    # Like _unbroadcast, but only over the batch dims of a matmul operand.
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Parameter(Tensor):
    """A named, trainable leaf. Grad is allocated eagerly so untouched
    parameters report exact zeros."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)


# -- free functions --------------------------------------------------------


def concat(tensors, axis=0):
    tensors = [Tensor._coerce(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    if not any(t.requires_grad for t in tensors):
        return Tensor(out)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor(out, True, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [Tensor._coerce(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    if not any(t.requires_grad for t in tensors):
        return Tensor(out)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(part)

    return Tensor(out, True, tuple(tensors), backward)


def index_select(t, axis, indices):
    """Gather along one axis with an integer index array (grad scatter-adds)."""
    t = Tensor._coerce(t)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(t.data, indices, axis=axis)
    src = t

    def grad_fn(g):
        full = np.zeros_like(src.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return full

    return t._unary(out, grad_fn)


def sigmoid(t):
    return Tensor._coerce(t).sigmoid()


def tanh(t):
    return Tensor._coerce(t).tanh()


def exp(t):
    return Tensor._coerce(t).exp()


def log(t):
    return Tensor._coerce(t).log()


def log_sigmoid(t):
    """Numerically stable log(sigmoid(x)) as one tape node."""
    t = Tensor._coerce(t)
    x = t.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return t._unary(out, lambda g: g * _sigmoid(-x))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(t):
    """Tanh-form Gaussian error linear unit, fused forward/backward."""
    t = Tensor._coerce(t)
    x = t.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    th = np.tanh(inner)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner)

    return t._unary(0.5 * x * (1.0 + th), grad_fn)


def softmax(t, axis):
    """Softmax along one axis; the max-shift is treated as a constant."""
    t = Tensor._coerce(t)
    shift = t.data.max(axis=axis, keepdims=True)
    e = (t - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def assert_all_finite(*arrays, context=""):
    """NaN/Inf scan; raises NumericError naming the offending entry."""
    for i, a in enumerate(arrays):
        data = a.data if isinstance(a, Tensor) else np.asarray(a)
        if not np.all(np.isfinite(data)):
            where = f" (entry {i})" if len(arrays) > 1 else ""
            raise NumericError(f"non-finite values detected{where}: {context}")


def finite_diff_check(f, params, eps=1e-4, max_coords_per_param=None, rng=None):
    """Compare backward() gradients of the scalar ``f()`` against central
    differences over the given parameters.

    Returns the max relative error with denominator max(|analytic|, |numeric|,
    1e-8). ``max_coords_per_param`` limits the probed coordinates per tensor
    (seeded choice via ``rng``), which keeps large models tractable.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss during finite_diff_check")
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        g_flat = g.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = f().item()
            flat[c] = orig - eps
            f_minus = f().item()
            flat[c] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError("non-finite evaluation during finite_diff_check")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(g_flat[c]), abs(numeric), 1e-8)
            worst = max(worst, abs(g_flat[c] - numeric) / denom)
    return worst
