"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (row-major, float32 or float64). The graph is
rebuilt on every forward pass: each op output keeps a record of its
operands and a local backward rule, and ``backward()`` replays those
records in reverse topological order. float64 exists for gradient
checking; training runs in float32.
"""

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError

LAYER_NORM_EPS = 1e-5

_grad_enabled = True
_flop_counter = None


@contextmanager
def no_grad():
    """Disable op recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def count_flops():
    """Count matmul multiply-adds (2*m*k*n each) executed in the block."""
    global _flop_counter
    prev = _flop_counter
    _flop_counter = [0]
    try:
        yield _flop_counter
    finally:
        _flop_counter = prev


def _as_array(data, dtype):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Node:
    """One recorded primitive op: operands plus a local backward rule."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn  # grad_out -> list of per-input grads


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_node", "_backward_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._node = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        """Accumulated gradient; zeros if nothing has flowed here yet."""
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    # convenience operators; the functional API below is canonical
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"


class Graph:
    """Ops reachable from one output, operands always before their users."""

    def __init__(self, ordered):
        self.ordered = ordered  # list of Tensors with nodes, topo order

    @classmethod
    def build(cls, out):
        ordered, visited, stack = [], set(), [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                ordered.append(t)
                continue
            if id(t) in visited or t._node is None:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                stack.append((inp, False))
        return cls(ordered)

    def run(self, out):
        if out._node is None:
            if out.requires_grad:
                seed = np.ones_like(out.data)
                out._grad = seed if out._grad is None else out._grad + seed
            return
        grads = {id(out): np.ones_like(out.data)}
        for t in reversed(self.ordered):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                t._grad = g if t._grad is None else t._grad + g
            for inp, gin in t._node.backward_fn(g):
                if gin is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp._grad = gin if inp._grad is None else inp._grad + gin
                else:
                    acc = grads.get(id(inp))
                    grads[id(inp)] = gin if acc is None else acc + gin


def backward(loss):
    """Populate .grad of every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise ContractError("backward() already ran for this output; rebuild the forward pass")
    Graph.build(loss).run(loss)
    loss._backward_done = True


def _record(out, op, inputs, backward_fn):
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcastable(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not align") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product of 2-D tensors [m,k] @ [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    if _flop_counter is not None:
        _flop_counter[0] += 2 * a.shape[0] * a.shape[1] * b.shape[1]
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _record(out, "matmul", [a, b], bwd)


def add(a, b):
    _check_broadcastable(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _record(out, "add", [a, b], bwd)


def sub(a, b):
    _check_broadcastable(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _record(out, "sub", [a, b], bwd)


def mul(a, b):
    _check_broadcastable(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return [(a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))]

    return _record(out, "mul", [a, b], bwd)


def div(a, b):
    _check_broadcastable(a, b, "div")
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return [(a, ga), (b, gb)]

    return _record(out, "div", [a, b], bwd)


def scale(x, c):
    c = float(c)
    out = Tensor(x.data * c)
    return _record(out, "scale", [x], lambda g: [(x, g * c)])


def add_scalar(x, c):
    c = float(c)
    out = Tensor(x.data + c)
    return _record(out, "add_scalar", [x], lambda g: [(x, g)])


def transpose(x):
    if x.data.ndim != 2:
        raise DimensionError(f"transpose: needs a 2-D tensor, got {x.shape}")
    out = Tensor(x.data.T.copy())
    return _record(out, "transpose", [x], lambda g: [(x, g.T)])


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: needs at least one tensor")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base):
            raise DimensionError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        if other[:axis] + other[axis + 1:] != base[:axis] + base[axis + 1:]:
            raise DimensionError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(idx)]))
        return pieces

    return _record(out, "concat", tensors, bwd)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise DimensionError(f"narrow: [{start}, {start + length}) outside axis {axis} of {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx].copy())

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return [(x, gx)]

    return _record(out, "narrow", [x], bwd)


def split(x, sizes, axis=0):
    """Partition along an axis; int = that many equal parts. Inverse of concat."""
    total = x.shape[axis]
    if isinstance(sizes, int):
        if sizes <= 0 or total % sizes != 0:
            raise DimensionError(f"split: {sizes} parts do not divide axis of size {total}")
        sizes = [total // sizes] * sizes
    if int(np.sum(sizes)) != total:
        raise DimensionError(f"split: sizes {sizes} do not cover axis of size {total}")
    outs, start = [], 0
    for n in sizes:
        outs.append(narrow(x, axis, start, n))
        start += n
    return tuple(outs)


def gather_rows(x, ids):
    """Row gather x[ids]; backward scatter-adds into the gathered rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if x.data.ndim != 2:
        raise DimensionError(f"gather_rows: needs a 2-D table, got {x.shape}")
    out = Tensor(x.data[ids])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, ids, g)
        return [(x, gx)]

    return _record(out, "gather_rows", [x], bwd)


def softmax(x, axis=-1):
    """Stable softmax; slices along `axis` sum to 1."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return [(x, y * (g - dot))]

    return _record(out, "softmax", [x], bwd)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize the last axis, then apply learnable gain and bias."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs feature dim {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        dxhat = g * gain.data
        gx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return [(x, gx), (gain, g_gain), (bias, g_bias)]

    return _record(out, "layer_norm", [x, gain, bias], bwd)


def relu(x):
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record(out, "relu", [x], lambda g: [(x, g * mask)])


def tanh(x):
    y = np.tanh(x.data)
    out = Tensor(y)
    return _record(out, "tanh", [x], lambda g: [(x, g * (1.0 - y * y))])


def sigmoid(x):
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-x.data)),
                 np.exp(x.data) / (1.0 + np.exp(x.data)))
    out = Tensor(y)
    return _record(out, "sigmoid", [x], lambda g: [(x, g * y * (1.0 - y))])


def log(x):
    out = Tensor(np.log(x.data))
    return _record(out, "log", [x], lambda g: [(x, g / x.data)])


def clip(x, lo, hi):
    """Clamp values; gradient passes only through the interior."""
    out = Tensor(np.clip(x.data, lo, hi))
    mask = (x.data > lo) & (x.data < hi)
    return _record(out, "clip", [x], lambda g: [(x, g * mask)])


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy's naming
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return [(x, np.broadcast_to(g, x.shape).copy())]
        ge = g if keepdims else np.expand_dims(g, axis)
        return [(x, np.broadcast_to(ge, x.shape).copy())]

    return _record(out, "sum", [x], bwd)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.shape[axis]
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return [(x, np.broadcast_to(g / n, x.shape).copy())]
        ge = g if keepdims else np.expand_dims(g, axis)
        return [(x, np.broadcast_to(ge / n, x.shape).copy())]

    return _record(out, "mean", [x], bwd)


def l1_norm(x):
    """Sum of absolute values -> scalar."""
    out = Tensor(np.abs(x.data).sum())
    return _record(out, "l1_norm", [x], lambda g: [(x, g * np.sign(x.data))])


# compositions (no backward rules of their own)

def minimum(a, b):
    return sub(b, relu(sub(b, a)))


def maximum(a, b):
    return add(a, relu(sub(b, a)))


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_difference_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar function at x, per element.

    f takes a Tensor and returns a scalar (Tensor or float); x is left
    untouched. Runs in whatever precision x carries.
    """
    if h <= 0:
        raise ContractError("finite_difference_grad: h must be positive")

    def evaluate(arr):
        with no_grad():
            r = f(Tensor(arr))
        return r.item() if isinstance(r, Tensor) else float(r)

    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += h
        up = evaluate(bumped.reshape(base.shape))
        bumped[i] -= 2 * h
        down = evaluate(bumped.reshape(base.shape))
        flat[i] = (up - down) / (2 * h)
    return grad


def gradient_mismatch(analytic, numeric, rel_tol=1e-6, abs_tol=1e-6):
    """Worst per-element violation factor vs the dual tolerance rule.

    Elements with |analytic| < abs_tol are held to |diff| <= abs_tol, the
    rest to |diff| / |analytic| <= rel_tol. Returns the max ratio of the
    observed error to its own tolerance (<= 1 means pass).
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    small = np.abs(analytic) < abs_tol
    ratio = np.where(small, diff / abs_tol, diff / (np.abs(analytic) * rel_tol + np.finfo(np.float64).tiny))
    return float(ratio.max()) if ratio.size else 0.0
