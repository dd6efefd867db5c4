"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation creates a node with a monotonically increasing
``node_id``.  The ids double as the computation tape: ``backward`` collects the
nodes reachable from the loss and replays their backward closures in
decreasing id order, which is exactly reverse execution order.

Gradients accumulate across repeated ``backward`` calls; call
:func:`zero_grad` (or set ``t.grad = None``) between independent passes.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

from .errors import ContractError, DimensionError, NumericError, VocabularyError

_ids = itertools.count()
_local = threading.local()


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def record_decisions():
    """Collect the discrete choices (ReLU patterns, argmaxes) made by ops.

    Used by the gradient checker to discard finite-difference probes that
    straddle a kink.
    """
    prev = getattr(_local, "decisions", None)
    log = []
    _local.decisions = log
    try:
        yield log
    finally:
        _local.decisions = prev


def _note_decision(arr):
    log = getattr(_local, "decisions", None)
    if log is not None:
        log.append(np.array(arr, copy=True))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.name = name
        self._parents = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        """Backpropagate from this tensor into every reachable requires-grad tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed grad shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any requires-grad tensor")

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node.node_id in nodes:
                continue
            nodes[node.node_id] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        tape = sorted(nodes.values(), key=lambda n: n.node_id, reverse=True)

        pending = {self.node_id: grad}
        for node in tape:
            g = pending.pop(node.node_id, None)
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def zero_grad(params):
    for p in params:
        p.grad = None


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out.name = None
    needs = False
    for p in parents:
        if p.requires_grad:
            needs = True
            break
    if needs and getattr(_local, "grad_enabled", True):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor):
        ref = b.data.dtype
        a = Tensor(np.asarray(a, dtype=ref))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return a, b


# -- elementwise arithmetic -----------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise ContractError("power supports scalar exponents only")
    e = float(exponent)

    def backward(g):
        return (g * e * a.data ** (e - 1.0),)

    return _result(a.data ** e, (a,), backward)


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    active = a.data > 0
    _note_decision(active)
    return _result(np.where(active, a.data, 0.0).astype(a.dtype, copy=False), (a,),
                   lambda g: (g * active,))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- shape manipulation ---------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[t.shape for t in tensors]}: {exc}") from None
    return _result(data, tuple(tensors), backward)


def index(a, key):
    """Basic or advanced indexing; the backward scatter-adds into ``a``."""
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(out, copy=True) if np.ndim(out) else np.asarray(out), (a,), backward)


def take_along_axis(a, idx, axis):
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def backward(g):
        # idx may repeat along axis, so accumulate explicitly
        full = np.zeros_like(a.data)
        grid = list(np.indices(out.shape, sparse=True))
        grid[axis % a.ndim] = np.broadcast_to(idx, out.shape)
        np.add.at(full, tuple(grid), g)
        return (full,)

    return _result(out, (a,), backward)


def pick(a, idx):
    """``out[...] = a[..., idx[...]]``: one entry per row along the last axis."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != a.shape[:-1]:
        raise DimensionError(f"pick index shape {idx.shape} != leading shape {a.shape[:-1]}")
    k = a.shape[-1]
    flat = idx.reshape(-1)
    rows = np.arange(flat.size)
    out = a.data.reshape(-1, k)[rows, flat].reshape(idx.shape)

    def backward(g):
        full = np.zeros((flat.size, k), dtype=g.dtype)
        full[rows, flat] = g.reshape(-1)
        return (full.reshape(a.shape),)

    return _result(out, (a,), backward)


def select_expert(a, expert):
    """From ``a`` of shape ``[T, E, H, d]`` take ``a[t, expert[t, h], h]`` -> ``[T, H, d]``."""
    t, e, h, d = a.shape
    expert = np.asarray(expert, dtype=np.intp)
    rt = np.arange(t)[:, None]
    rh = np.arange(h)[None, :]
    out = a.data[rt, expert, rh]

    def backward(g):
        full = np.zeros_like(a.data)
        full[rt, expert, rh] = g
        return (full,)

    return _result(out, (a,), backward)


def gather_rows(a, rows):
    """Select rows ``a[rows]`` along axis 0 (rows assumed unique)."""
    rows = np.asarray(rows, dtype=np.intp)
    n = a.shape[0]

    def backward(g):
        full = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        full[rows] = g
        return (full,)

    return _result(a.data[rows], (a,), backward)


def scatter_rows(parts, rows_list, n_rows):
    """Inverse of :func:`gather_rows`: place ``parts[i]`` at ``rows_list[i]`` in a zero array."""
    if not parts:
        raise ContractError("scatter_rows needs at least one part")
    rows_list = [np.asarray(r, dtype=np.intp) for r in rows_list]
    first = parts[0]
    data = np.zeros((n_rows,) + first.shape[1:], dtype=first.dtype)
    for part, rows in zip(parts, rows_list):
        data[rows] = part.data

    def backward(g):
        return tuple(g[rows] for rows in rows_list)

    return _result(data, tuple(parts), backward)


# -- reductions -----------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def max_pool_over_time(x, mask=None):
    """Max over the time axis (``-2``) of ``[..., N, d]``.

    ``mask`` (shape ``[..., N]``, True = valid) excludes padded positions.
    Gradient flows to the argmax, lowest index on ties.
    """
    data = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ContractError("max_pool_over_time: a sequence has no valid positions")
        data = np.where(mask[..., None], data, -np.inf)
    arg = np.argmax(data, axis=-2)[..., None, :]
    _note_decision(arg)
    out = np.take_along_axis(x.data, arg, axis=-2)[..., 0, :]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg, g[..., None, :], axis=-2)
        return (full,)

    return _result(out, (x,), backward)


def mean_pool_over_time(x, mask=None):
    if mask is None:
        return mean(x, axis=-2)
    w = np.asarray(mask, dtype=x.dtype)
    counts = w.sum(axis=-1, keepdims=True)
    if (counts == 0).any():
        raise ContractError("mean_pool_over_time: a sequence has no valid positions")
    return tsum(x * Tensor(w[..., None] / counts[..., None]), axis=-2)


# -- linear algebra -------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    sa, sb = a.data.shape, b.data.shape
    if len(sa) < 2 or len(sb) < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


# -- normalisation / probability -------------------------------------------

def softmax(x, axis=-1):
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x, axis=-1):
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    scale = 1.0 / x.shape[-1]
    mu = x.data.sum(axis=-1, keepdims=True) * scale
    centered = x.data - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) * scale
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.sum(axis=-1, keepdims=True) * scale
                        - xhat * ((dxhat * xhat).sum(axis=-1, keepdims=True) * scale))
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward)


def bce_with_logits(logits, labels):
    """Elementwise binary cross-entropy on raw scores (stable form)."""
    y = np.asarray(labels, dtype=logits.dtype)
    z = logits.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        return (g * (_sigmoid(z) - y),)

    return _result(out, (logits,), backward)


# -- embeddings -----------------------------------------------------------

def embedding_lookup(table, ids, channel=None):
    """Rows of ``table`` for integer ``ids`` of any shape; grads scatter-add back."""
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids[(ids < 0) | (ids >= vocab)].flat[0])
        raise VocabularyError(channel, bad, vocab)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), backward)


def shard_rows(vocab_size, num_shards):
    """Rows per shard for contiguous-block sharding: ``ceil(V / num_shards)``."""
    return -(-vocab_size // num_shards)


def sharded_lookup(shards, ids, vocab_size, channel=None):
    """Embedding lookup over a table split into contiguous row blocks.

    Id ``i`` lives in shard ``i // rows`` at local row ``i % rows`` where
    ``rows = ceil(V / len(shards))``.  Output and gradients match a
    monolithic :func:`embedding_lookup` bit for bit.
    """
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = int(ids[(ids < 0) | (ids >= vocab_size)].flat[0])
        raise VocabularyError(channel, bad, vocab_size)
    rows = shard_rows(vocab_size, len(shards))
    owner = ids // rows
    local = ids % rows
    dim = shards[0].shape[1]
    out = np.empty(ids.shape + (dim,), dtype=shards[0].dtype)
    selections = []
    for s, shard in enumerate(shards):
        sel = owner == s
        selections.append(sel)
        if sel.any():
            out[sel] = shard.data[local[sel]]

    def backward(g):
        grads = []
        for shard, sel in zip(shards, selections):
            full = np.zeros_like(shard.data)
            if sel.any():
                np.add.at(full, local[sel], g[sel])
            grads.append(full)
        return tuple(grads)

    return _result(out, tuple(shards), backward)
