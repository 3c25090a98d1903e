"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every value in the toolkit is a `Tensor` wrapping a float64 numpy array.
Operations that touch a gradient-requiring tensor are recorded, in execution
order, on a per-thread `Tape`; `backward(loss)` replays the tape in reverse.
Tensors not attached to any recording are plain immutable values.
"""

import math
import threading

import numpy as np


class DimensionError(ValueError):
    """Shapes do not satisfy an operation's contract."""


class TapeStateError(RuntimeError):
    """Backward requested on a tape that was already consumed."""


_STATE = threading.local()


def _state():
    if not hasattr(_STATE, "tape"):
        _STATE.tape = Tape()
        _STATE.grad_enabled = True
    return _STATE


class Tape:
    """Ordered record of executed ops; inputs always precede their ops."""

    def __init__(self):
        self._records = []
        self._spent = False

    def __len__(self):
        return len(self._records)

    def record(self, out, backward_fn):
        self._records.append((out, backward_fn))

    def reset(self):
        self._records.clear()
        self._spent = False


def active_tape():
    return _state().tape


def reset_tape():
    _state().tape.reset()


class no_grad:
    """Context manager that disables op recording."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state().grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (
            self.shape, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _recordable(*tensors):
    st = _state()
    return st.grad_enabled and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors)


def _record(out, backward_fn):
    out.requires_grad = True
    _state().tape.record(out, backward_fn)


def _acc(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Reduce gradient `g` back to `shape` after trailing-aligned broadcast."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Populate .grad of every gradient-requiring tensor reachable from loss.

    The loss must be scalar; a second call without `reset_tape()` raises.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("backward requires a scalar loss tensor")
    tape = _state().tape
    if tape._spent:
        raise TapeStateError(
            "tape already consumed by a previous backward; call reset_tape()")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._records):
        if out.grad is not None:
            fn(out.grad)
    tape._spent = True


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# elementwise ops


def _binary(a, b, fwd, bwd_a, bwd_b):
    a_t = _as_tensor(a)
    b_is_scalar = not isinstance(b, Tensor)
    b_t = _as_tensor(b)
    try:
        np.broadcast_shapes(a_t.shape, b_t.shape)
    except ValueError:
        raise DimensionError(
            "shapes %s and %s are not broadcast-compatible"
            % (a_t.shape, b_t.shape))
    out = Tensor(fwd(a_t.data, b_t.data))
    if _recordable(a_t, None if b_is_scalar else b_t):
        def fn(g):
            _acc(a_t, _unbroadcast(bwd_a(g, a_t.data, b_t.data), a_t.shape))
            if not b_is_scalar:
                _acc(b_t, _unbroadcast(bwd_b(g, a_t.data, b_t.data), b_t.shape))
        _record(out, fn)
    return out


def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def elementwise(a, b, kind):
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError("unknown elementwise kind: %r" % (kind,))


def neg(a):
    out = Tensor(-a.data)
    if _recordable(a):
        _record(out, lambda g: _acc(a, -g))
    return out


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    """a (..., m, k) @ b (k, n). b must be 2-D."""
    a_t, b_t = _as_tensor(a), _as_tensor(b)
    if a_t.ndim < 2 or b_t.ndim != 2 or a_t.shape[-1] != b_t.shape[0]:
        raise DimensionError(
            "matmul shape mismatch: %s @ %s" % (a_t.shape, b_t.shape))
    out = Tensor(a_t.data @ b_t.data)
    if _recordable(a_t, b_t):
        def fn(g):
            _acc(a_t, g @ b_t.data.T)
            k, n = b_t.shape
            _acc(b_t, a_t.data.reshape(-1, k).T @ g.reshape(-1, n))
        _record(out, fn)
    return out


def transpose(a):
    if a.ndim != 2:
        raise DimensionError("transpose expects a matrix, got %s" % (a.shape,))
    out = Tensor(a.data.T)
    if _recordable(a):
        _record(out, lambda g: _acc(a, g.T))
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


_ACTIVATIONS = {
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(float)),
    "swish": (lambda x: x * _sigmoid(x),
              lambda x, y: (lambda s: s + x * s * (1.0 - s))(_sigmoid(x))),
}


def activation(a, kind):
    try:
        fwd, dfn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError("unknown activation kind: %r" % (kind,))
    out = Tensor(fwd(a.data))
    if _recordable(a):
        _record(out, lambda g: _acc(a, g * dfn(a.data, out.data)))
    return out


def sigmoid(a):
    return activation(a, "sigmoid")


def tanh(a):
    return activation(a, "tanh")


def relu(a):
    return activation(a, "relu")


def swish(a):
    return activation(a, "swish")


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a, axis=None):
    out = Tensor(a.data.sum(axis=axis))
    if _recordable(a):
        def fn(g):
            if axis is None:
                _acc(a, np.full_like(a.data, g))
            else:
                _acc(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())
        _record(out, fn)
    return out


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis=axis), 1.0 / n)


def _seq_sum(x, axis):
    """Strictly left-to-right sum, keepdims; trailing zeros are exact no-ops.

    numpy's pairwise summation regroups addends depending on the axis length,
    which breaks bit-exact prefix equivalence of masked reductions.
    """
    c = np.cumsum(x, axis=axis)
    return np.take(c, [-1], axis=axis)


def log_sum_exp(a, axis):
    """Max-shifted LSE; -inf entries carry zero mass, all-(-inf) gives -inf."""
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError("axis %d invalid for shape %s" % (axis, a.shape))
    m = np.max(a.data, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = _seq_sum(np.exp(a.data - m_safe), axis)
    with np.errstate(divide="ignore"):
        res = np.where(np.isfinite(m), m_safe + np.log(s), m)
    out = Tensor(np.squeeze(res, axis=axis))
    if _recordable(a):
        def fn(g):
            w = np.exp(a.data - np.where(np.isfinite(res), res, 0.0))
            w = np.where(np.isfinite(a.data) & np.isfinite(res), w, 0.0)
            _acc(a, np.expand_dims(g, axis) * w)
        _record(out, fn)
    return out


def softmax(a, axis=-1):
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    y = e / _seq_sum(e, axis)
    out = Tensor(y)
    if _recordable(a):
        def fn(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _acc(a, y * (g - dot))
        _record(out, fn)
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    if _recordable(a):
        _record(out, lambda g: _acc(a, g.reshape(a.shape)))
    return out


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx])
    if _recordable(a):
        def fn(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            _acc(a, full)
        _record(out, fn)
    return out


def concat(tensors, axis):
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _recordable(*tensors):
        sizes = [t.shape[axis] for t in tensors]
        def fn(g):
            offset = 0
            for t, s in zip(tensors, sizes):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + s)
                _acc(t, g[tuple(idx)])
                offset += s
        _record(out, fn)
    return out


def gather_rows(a, indices):
    """Select rows by index; duplicates allowed (grads scatter-add)."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx])
    if _recordable(a):
        def fn(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _acc(a, full)
        _record(out, fn)
    return out


# ---------------------------------------------------------------------------
# normalization and convolution


def layer_norm(x, gain, bias, eps=1e-5):
    """Zero-mean/unit-variance over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            "layer_norm affine shapes %s/%s do not match last axis %d"
            % (gain.shape, bias.shape, d))
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = Tensor(xh * gain.data + bias.data)
    if _recordable(x, gain, bias):
        def fn(g):
            _acc(bias, g.reshape(-1, d).sum(axis=0))
            _acc(gain, (g * xh).reshape(-1, d).sum(axis=0))
            gh = g * gain.data
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xh * (gh * xh).mean(axis=-1, keepdims=True))
            _acc(x, dx)
        _record(out, fn)
    return out


def depthwise_conv1d(x, kernel, padding):
    """Per-channel 1-D convolution over a T x d sequence.

    `causal` pads k-1 zeros on the left; `same` (odd k) pads symmetrically.
    """
    if x.ndim != 2 or kernel.ndim != 2 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            "conv shapes %s / %s disagree" % (x.shape, kernel.shape))
    k = kernel.shape[0]
    if k < 1:
        raise DimensionError("kernel size must be >= 1")
    if padding == "causal":
        left, right = k - 1, 0
    elif padding == "same":
        if k % 2 == 0:
            raise DimensionError("`same` padding requires odd kernel size")
        left = right = (k - 1) // 2
    else:
        raise ValueError("unknown padding: %r" % (padding,))
    T, d = x.shape
    xpad = np.zeros((T + left + right, d))
    xpad[left:left + T] = x.data
    y = np.zeros((T, d))
    for j in range(k):
        y += kernel.data[j] * xpad[j:j + T]
    out = Tensor(y)
    if _recordable(x, kernel):
        def fn(g):
            dk = np.zeros_like(kernel.data)
            dxp = np.zeros_like(xpad)
            for j in range(k):
                dk[j] = (g * xpad[j:j + T]).sum(axis=0)
                dxp[j:j + T] += g * kernel.data[j]
            _acc(kernel, dk)
            _acc(x, dxp[left:left + T])
        _record(out, fn)
    return out


def zeros(shape):
    return Tensor(np.zeros(shape))


NEG_INF = -math.inf
