"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a Wengert list: every operation executed while a ``Tape`` is
active appends one node (inputs, output, backward rule) in execution order.
``backward`` walks the list once in reverse, so topological order comes for
free and each node is visited exactly once.

Everything is 64-bit. There is no broadcasting magic beyond what numpy does;
gradients of broadcast operands are summed back to the operand's shape.

Non-differentiable points never silently return zero gradient: use
``straight_through`` to declare the surrogate at the call site (the forward
value is replaced, the backward pass flows through the relaxed input).

Tapes are thread-local. Tensors that are not attached to a tape are plain
immutable values and safe to share across threads.
"""

from __future__ import annotations

import math
import threading

import numpy as np

_LOCAL = threading.local()
_DEBUG_NAN = False


def set_debug_nan(enabled: bool) -> None:
    """Toggle the NaN guard: when on, any op producing a non-finite value
    aborts with the op name."""
    global _DEBUG_NAN
    _DEBUG_NAN = bool(enabled)


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, optionally participating in gradient taping.

    ``grad`` is populated (and accumulated across repeated ``backward``
    calls) only for leaves, i.e. tensors created with ``requires_grad=True``
    rather than produced by an op.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are coerced to constant tensors
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)


class _Node:
    __slots__ = ("output", "inputs", "vjp", "name")

    def __init__(self, output, inputs, vjp, name):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp
        self.name = name


class Tape:
    """Append-only record of operations, used as a context manager.

    Nodes are stored in execution order, so inputs of every node were
    recorded before the node itself.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Raises if ``loss`` is not scalar. Repeated calls without clearing grads
    accumulate.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced = {id(node.output) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        partials = node.vjp(g)
        for inp, gi in zip(node.inputs, partials):
            if gi is None:
                continue
            key = id(inp)
            holders[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, g in grads.items():
        t = holders[key]
        if t.requires_grad and key not in produced:
            g = np.asarray(g, dtype=np.float64)
            t.grad = g.copy() if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(name, data, inputs, vjp) -> Tensor:
    if _DEBUG_NAN and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"op '{name}' produced non-finite values")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, vjp, name))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _make("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _make("div", a.data / b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (-g,)

    return _make("neg", -a.data, (a,), vjp)


def power(a, p: float) -> Tensor:
    """a ** p for a float exponent. For non-integer p the base must be > 0."""
    a = _as_tensor(a)
    p = float(p)
    out_data = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make("power", out_data, (a,), vjp)


# ---------------------------------------------------------------------------
# transcendental ops


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)

    def vjp(g):
        return (g * y,)

    return _make("exp", y, (a,), vjp)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (g / a.data,)

    return _make("log", np.log(a.data), (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _make("sigmoid", y, (a,), vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _make("tanh", y, (a,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dy,)

    return _make("gelu", y, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with the usual subgradient: 1 strictly inside (lo, hi), else 0."""
    a = _as_tensor(a)
    y = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * inside,)

    return _make("clip", y, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make("sum", out_data, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return _make("mean", out_data, (a,), vjp)


def frobenius_sq(a) -> Tensor:
    """Sum of squared entries (the squared Frobenius norm)."""
    a = _as_tensor(a)
    out_data = np.float64((a.data * a.data).sum())

    def vjp(g):
        return (2.0 * g * a.data,)

    return _make("frobenius_sq", out_data, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
        return ga, gb

    return _make("matmul", out_data, (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make("reshape", a.data.reshape(shape), (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make("transpose", a.data.transpose(axes), (a,), vjp)


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _make("concatenate", out_data, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# indexing along the token axis


def gather(a, indices, axis: int = 0) -> Tensor:
    """Select rows (or slices along ``axis``) by a 1-D integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError(f"gather expects 1-D indices, got shape {idx.shape}")
    n = a.data.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for axis of size {n}")
    out_data = np.take(a.data, idx, axis=axis)
    dest = (slice(None),) * axis + (idx,)

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, dest, g)
        return (z,)

    return _make("gather", out_data, (a,), vjp)


def scatter_rows(values, indices, length: int) -> Tensor:
    """Place rows of ``values`` at ``indices`` of a zero tensor of ``length`` rows.

    Indices must be distinct; a collision is a contract violation.
    """
    values = _as_tensor(values)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != values.data.shape[0]:
        raise ValueError("scatter_rows needs one index per value row")
    if len(np.unique(idx)) != idx.size:
        raise ValueError("scatter_rows indices collide")
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise IndexError(f"scatter index out of range for length {length}")
    out_data = np.zeros((length,) + values.data.shape[1:], dtype=np.float64)
    out_data[idx] = values.data

    def vjp(g):
        return (g[idx],)

    return _make("scatter_rows", out_data, (values,), vjp)


def embedding(table, ids) -> Tensor:
    """Look up rows of ``table`` by an integer id array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range for vocabulary of size {vocab}")
    out_data = table.data[ids]

    def vjp(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        return (z,)

    return _make("embedding", out_data, (table,), vjp)


# ---------------------------------------------------------------------------
# fused composites


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make("softmax", y, (a,), vjp)


def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = _as_tensor(logits)
    x = logits.data
    if x.ndim != 2:
        raise ValueError(f"cross_entropy expects (batch, classes) logits, got {x.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    batch, k = x.shape
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    picked = x[np.arange(batch), labels]
    out_data = np.float64((lse - picked).mean())

    def vjp(g):
        p = np.exp(x - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(batch), labels] -= 1.0
        return (g * p / batch,)

    return _make("cross_entropy", out_data, (logits,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def vjp(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (a,), vjp)


def layer_norm(x, gain, bias, epsilon: float = 1e-5, dim_mask=None) -> Tensor:
    """Normalize over the last axis, then apply the affine (gain, bias).

    With ``dim_mask`` (a constant binary vector over the last axis) the
    statistics are computed over unmasked entries only and masked entries
    are zeroed; this makes masked execution match a model whose masked
    feature dimensions are physically removed.
    """
    if epsilon <= 0:
        raise ValueError("layer_norm epsilon must be > 0")
    x = _as_tensor(x)
    gain, bias = _as_tensor(gain), _as_tensor(bias)
    if dim_mask is None:
        mu = tmean(x, axis=-1, keepdims=True)
        xc = sub(x, mu)
        var = tmean(mul(xc, xc), axis=-1, keepdims=True)
        inv = power(add(var, epsilon), -0.5)
        return add(mul(mul(xc, inv), gain), bias)
    m = np.asarray(dim_mask, dtype=np.float64)
    kept = float(m.sum())
    if kept <= 0:
        raise ValueError("layer_norm dim_mask keeps no dimensions")
    mu = div(tsum(mul(x, m), axis=-1, keepdims=True), kept)
    xc = mul(sub(x, mu), m)
    var = div(tsum(mul(xc, xc), axis=-1, keepdims=True), kept)
    inv = power(add(var, epsilon), -0.5)
    return mul(add(mul(mul(xc, inv), gain), bias), m)


# ---------------------------------------------------------------------------
# surrogate-gradient hooks


def straight_through(soft: Tensor, hard) -> Tensor:
    """Forward the ``hard`` values, backpropagate as if they were ``soft``.

    This is the explicit surrogate hook for non-differentiable points
    (argmax, clamp): the identity gradient of the relaxed path is used.
    """
    soft = _as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.data.shape:
        raise ValueError(f"straight_through shape mismatch: {hard.shape} vs {soft.data.shape}")

    def vjp(g):
        return (g,)

    return _make("straight_through", hard.copy(), (soft,), vjp)


def detach(a) -> Tensor:
    """A constant copy: same values, no tape participation."""
    a = _as_tensor(a)
    return Tensor(a.data.copy())
