"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a fresh :class:`Tensor`; inputs are never mutated. When any
input requires a gradient the result remembers its parents and a closure that
maps the output gradient to one gradient per parent. :meth:`Tensor.backward`
replays those closures in reverse creation order, which is the execution order
of the forward pass.
"""
from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

MASK_SENTINEL = -1e9
DEFAULT_IGNORE_INDEX = -100

CHECK_FINITE = True

_seq = itertools.count()
_grad_enabled = True
_gelu_fault = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward",
                 "_seq", "_consumed", "_retain")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self._consumed = False
        self._retain = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def retain_grad(self):
        """Keep the gradient of this intermediate tensor after backward."""
        self._retain = True
        return self

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operators
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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def backward(self):
        backward(self)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_gradient_fault(enabled):
    """Corrupt the GeLU derivative. Negative control for gradient checking only."""
    global _gelu_fault
    _gelu_fault = bool(enabled)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError("non-finite values produced")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_seq)
    out._consumed = False
    out._retain = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GeLU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = _as_tensor(x)
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd ** 3))
    out = 0.5 * xd * (1.0 + t)

    def backward_fn(g):
        d = 0.5 * (1.0 + t)
        if not _gelu_fault:
            d = d + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * d,)

    return _result(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=()):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def take_rows(table, ids):
    """Gather rows of a 2-D table; ``ids`` may have any integer shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("row ids must be integers")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"row id out of range for table with {n} rows")

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), backward_fn)


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------

def tensor_sum(a):
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tensor_mean(a):
    n = a.data.size
    return _result(np.asarray(a.data.mean()), (a,),
                   lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward_fn)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x``; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[1])

    def backward_fn(g):
        g2 = g.reshape(-1, weight.shape[1])
        grads = [(g2 @ weight.data.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward_fn)


def softmax_rows(x, bias=None):
    """Softmax over the last axis after adding an additive mask bias.

    ``bias`` holds 0 for allowed entries and the large negative sentinel for
    forbidden ones; it broadcasts against ``x`` and carries no gradient.
    """
    x = _as_tensor(x)
    z = x.data
    if bias is not None:
        b = bias.data if isinstance(bias, Tensor) else np.asarray(bias, dtype=np.float64)
        if not (b > MASK_SENTINEL / 2).any(axis=-1).all():
            raise ValueError("softmax row with every entry masked")
        z = z + b
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def layer_norm(x, gain, offset, eps=1e-5):
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or offset.shape != (d,):
        raise ValueError(f"layer_norm affine parameters must have shape ({d},)")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data + offset.data

    def backward_fn(g):
        g2 = g.reshape(-1, d)
        gxhat = g * gain.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _result(out, (x, gain, offset), backward_fn)


def cross_entropy(logits, labels, ignore_index=DEFAULT_IGNORE_INDEX):
    """Mean negative log-softmax over rows whose label is not ``ignore_index``.

    ``logits`` is (..., N); ``labels`` has the leading shape.
    """
    n = logits.shape[-1]
    z = logits.data.reshape(-1, n)
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise ValueError("labels and logits disagree on the number of rows")
    keep = y != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every row is ignored")
    if ((y[keep] < 0) | (y[keep] >= n)).any():
        raise ValueError(f"label outside [0, {n})")
    rows = np.nonzero(keep)[0]
    zk = z[rows]
    m = zk.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(zk - m).sum(axis=1))
    loss = (lse - zk[np.arange(count), y[rows]]).sum() / count

    def backward_fn(g):
        p = np.exp(zk - lse[:, None])
        p[np.arange(count), y[rows]] -= 1.0
        full = np.zeros_like(z)
        full[rows] = p * (g / count)
        return (full.reshape(logits.shape),)

    return _result(np.asarray(loss), (logits,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def graph(loss):
    """Nodes reachable from ``loss`` that take part in differentiation,
    in execution (creation) order."""
    seen = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._seq)


def backward(loss):
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if loss._consumed:
        raise RuntimeError("backward already ran for this loss; rebuild the graph first")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._retain:
            node.grad = g.copy()
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    loss._consumed = True


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


def finite_diff_check(f, x, h=1e-5, atol=1e-6, indices=None):
    """Largest ``|analytic - central| / (|central| + atol)`` over elements of ``x``.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. ``indices``
    optionally restricts the check to some flat positions.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    leaf = Tensor(x.data, requires_grad=True)
    loss = f(leaf)
    loss.backward()
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
    flat = range(x.data.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in flat:
            probe = x.data.copy()
            probe.flat[i] += h
            up = f(Tensor(probe)).item()
            probe.flat[i] -= 2 * h
            down = f(Tensor(probe)).item()
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError("non-finite value during finite differencing")
            central = (up - down) / (2 * h)
            worst = max(worst, abs(analytic.flat[i] - central) / (abs(central) + atol))
    return worst
