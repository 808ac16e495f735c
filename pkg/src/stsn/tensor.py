"""A small reverse-mode autodiff engine over numpy arrays.

Tensors record onto an explicit :class:`Tape` when one is active::

    with Tape() as tape:
        x = tensor_from([3], [1.0, 2.0, 3.0], requires_grad=True)
        loss = total(mul(x, x))
        grads = tape.backward(loss)
    grads[x]  # -> Tensor [2, 4, 6]

A tape is single use: one forward pass, one backward sweep.
"""

import contextvars
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "TensorError",
    "NonFiniteError",
    "record_op",
    "tensor_from",
    "unary_elementwise",
    "exp",
    "relu",
    "negate",
    "sigmoid",
    "binary_elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "concat_channels",
    "channel_slice",
    "softmax_over_leading_axis",
    "total",
    "mean",
    "channel_cosine",
    "backward",
    "finite_difference_grad",
]


class TensorError(ValueError):
    """Raised on shape, value or tape misuse."""


class NonFiniteError(TensorError):
    """A value that must be finite is inf or nan."""


_ACTIVE_TAPE = contextvars.ContextVar("stsn_active_tape", default=None)


@dataclass
class _Node:
    parents: tuple
    backward_fn: object  # grad_out -> tuple of parent grads (None = no contribution)
    dims: tuple
    leaf: bool = False


class Tape:
    """Ordered record of differentiable ops; parents always precede children."""

    def __init__(self):
        self.nodes = []
        self.frozen = False
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def _add(self, node):
        if self.frozen:
            raise TensorError("tape already consumed")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def backward(self, loss):
        """Reverse sweep from a scalar ``loss``; returns a :class:`GradientMap` over leaves."""
        if self.frozen:
            raise TensorError("tape already consumed")
        if loss.dims != ():
            raise TensorError(f"loss must be a scalar, got dims {loss.dims}")
        if loss.tape is not self or loss.node_id is None:
            raise TensorError("loss was not produced on this tape")
        self.frozen = True
        grads = {loss.node_id: np.ones((), dtype=loss.data.dtype)}
        leaves = GradientMap()
        for nid in range(loss.node_id, -1, -1):
            node = self.nodes[nid]
            g = grads.pop(nid, None)
            if node.leaf:
                if g is None:
                    g = np.zeros(node.dims)
                leaves[nid] = Tensor(g)
                continue
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        # leaves recorded after the loss are unreachable
        for nid in range(loss.node_id + 1, len(self.nodes)):
            node = self.nodes[nid]
            if node.leaf:
                leaves[nid] = Tensor(np.zeros(node.dims))
        self.nodes = []
        return leaves


class GradientMap(dict):
    """Mapping ``node_id -> Tensor``; also indexable by the leaf Tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return dict.__getitem__(self, key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return dict.__contains__(self, key)


class Tensor:
    """Dense real array. ``data`` is read-only; ``dims`` never change."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self.tape = None
        if self.requires_grad:
            tape = _ACTIVE_TAPE.get()
            if tape is not None:
                self.tape = tape
                self.node_id = tape._add(_Node((), None, arr.shape, leaf=True))

    @property
    def dims(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return np.array(self.data)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(dims={list(self.dims)}, requires_grad={self.requires_grad})"


def _tracked(t, tape):
    return tape is not None and t.tape is tape and t.node_id is not None


def record_op(out_data, parents, backward_fn):
    """Wrap ``out_data`` as a Tensor and, if any parent is on the active tape, record it.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per parent.
    """
    tape = _ACTIVE_TAPE.get()
    out = Tensor(out_data)
    if tape is None:
        return out
    ids = tuple(p.node_id if _tracked(p, tape) else None for p in parents)
    if all(i is None for i in ids):
        return out
    out.requires_grad = True
    out.tape = tape
    out.node_id = tape._add(_Node(ids, backward_fn, out.data.shape))
    return out


def tensor_from(dims, values, requires_grad=False, dtype=np.float64):
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise TensorError(f"dims must be positive, got {dims}")
    arr = np.asarray(values, dtype=dtype).ravel()
    if arr.size != math.prod(dims):
        raise TensorError(f"{arr.size} values do not fill dims {list(dims)}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite input value")
    return Tensor(arr.reshape(dims).copy(), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise TensorError("exp overflow")
    return record_op(out, (a,), lambda g: (g * out,))


def relu(a):
    mask = a.data > 0
    return record_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def negate(a):
    return record_op(-a.data, (a,), lambda g: (-g,))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record_op(out, (a,), lambda g: (g * out * (1.0 - out),))


_UNARY = {"exp": exp, "relu": relu, "negate": negate}


def unary_elementwise(kind, a):
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise TensorError(f"unknown unary op {kind!r}") from None
    return fn(a)


def _is_map_of(m, x):
    return len(x.dims) == 3 and len(m.dims) == 3 and m.dims[0] == 1 and x.dims[0] > 1 and m.dims[1:] == x.dims[1:]


def _check_broadcast(a, b):
    """Which operand (if any) broadcasts as a ``[1,h,w]`` map over the other's channels.

    Returns ``(a_is_map, b_is_map)``.
    """
    if a.dims == b.dims:
        return False, False
    if _is_map_of(b, a):
        return False, True
    if _is_map_of(a, b):
        return True, False
    raise TensorError(f"incompatible dims {list(a.dims)} and {list(b.dims)}")


def _unbroadcast(g, bcast):
    return g.sum(axis=0, keepdims=True) if bcast else g


def add(a, b):
    ba, bb = _check_broadcast(a, b)
    return record_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, ba), _unbroadcast(g, bb)))


def sub(a, b):
    ba, bb = _check_broadcast(a, b)
    return record_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, ba), -_unbroadcast(g, bb)))


def mul(a, b):
    ba, bb = _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ba), _unbroadcast(g * ad, bb)))


def div(a, b):
    ba, bb = _check_broadcast(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise TensorError("division by zero")
    out = ad / bd
    return record_op(out, (a, b), lambda g: (_unbroadcast(g / bd, ba), _unbroadcast(-g * out / bd, bb)))


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def binary_elementwise(kind, a, b):
    try:
        fn = _BINARY[kind]
    except KeyError:
        raise TensorError(f"unknown binary op {kind!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------


def concat_channels(*tensors):
    """Concatenate ``[c_i, h, w]`` tensors along the channel axis."""
    if len(tensors) < 2:
        raise TensorError("concat_channels needs at least two tensors")
    hw = tensors[0].dims[1:]
    for t in tensors:
        if len(t.dims) != 3 or t.dims[1:] != hw:
            raise TensorError(f"spatial mismatch: {list(t.dims)} vs {list(hw)}")
    sizes = [t.dims[0] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=0)

    def bw(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return record_op(out, tensors, bw)


def channel_slice(x, start, stop):
    """Channels ``start:stop`` of a ``[c, h, w]`` tensor."""
    c = x.dims[0]
    if not 0 <= start < stop <= c:
        raise TensorError(f"bad channel range {start}:{stop} for {c} channels")
    shape = x.dims
    dtype = x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[start:stop] = g
        return (full,)

    return record_op(x.data[start:stop], (x,), bw)


def softmax_over_leading_axis(x):
    """Per-location softmax over axis 0 of an ``[m, h, w]`` tensor."""
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("non-finite softmax input")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=0, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=0, keepdims=True)),)

    return record_op(out, (x,), bw)


def total(x):
    shape, dtype = x.dims, x.dtype
    return record_op(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean(x):
    shape, dtype = x.dims, x.dtype
    n = x.data.size
    return record_op(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=dtype),))


def channel_cosine(a, b, eps=1e-8):
    """Per-location cosine similarity over channels: ``[c,h,w] x [c,h,w] -> [1,h,w]``.

    ``<a, b> / (|a| |b| + eps)``.
    """
    if a.dims != b.dims or len(a.dims) != 3:
        raise TensorError(f"channel_cosine needs equal [c,h,w] dims, got {a.dims}, {b.dims}")
    ad, bd = a.data, b.data
    dot = (ad * bd).sum(axis=0, keepdims=True)
    na = np.sqrt((ad * ad).sum(axis=0, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=0, keepdims=True))
    den = na * nb + eps
    out = dot / den

    def bw(g):
        # d/da: b/den - dot * nb * (a/na) / den^2  (the norm term vanishes where na == 0)
        safe_na = np.where(na > 0, na, 1.0)
        safe_nb = np.where(nb > 0, nb, 1.0)
        ga = g * (bd / den - out * nb * ad / (safe_na * den))
        gb = g * (ad / den - out * na * bd / (safe_nb * den))
        return ga, gb

    return record_op(out, (a, b), bw)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def backward(loss):
    """Run the reverse sweep on the tape that produced ``loss``."""
    if loss.tape is None:
        raise TensorError("loss is not on a tape")
    return loss.tape.backward(loss)


def finite_difference_grad(f, x, eps=1e-3):
    """Central-difference gradient of scalar ``f`` at ``x``, one element at a time."""
    if not eps > 0:
        raise TensorError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    flat = base.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(f(Tensor(base.copy())))
        flat[i] = orig - eps
        fm = _scalar(f(Tensor(base.copy())))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError("non-finite function value in finite differences")
        grad[i] = (fp - fm) / (2 * eps)
    return Tensor(grad.reshape(base.shape))


def _scalar(v):
    if isinstance(v, Tensor):
        return float(v.data)
    return float(v)
