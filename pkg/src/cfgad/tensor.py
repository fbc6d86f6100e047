"""Dense float64 tensors with tape-based reverse-mode autodiff.

Small by design: matrices and vectors, the elementwise ops and reductions
needed by the layers in this package, and an Adam optimizer. The tape is
define-by-run; a graph supports exactly one backward pass and is freed
afterwards. One tape per training context, one thread per tape.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{op} produced non-finite values")


class Tensor:
    """A dense float64 array plus optional gradient.

    `data` is a C-contiguous ndarray; `grad` (same shape) is populated by
    backward() on every reachable tensor with requires_grad=True.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, values, requires_grad=False):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A constant copy sharing no tape history."""
        return Tensor(self.data.copy())

    def tolist(self):
        return self.data.tolist()

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Populates .grad on every reachable requires_grad tensor, then frees
        the graph: a second call on the same loss raises.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._done:
            raise RuntimeError(
                "backward already ran on this graph; rebuild the forward pass "
                "(and zero_grad the parameters) before calling backward again"
            )
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
            node._done = True
        # free the tape
        for node in order:
            node._backward = None
            node._parents = ()

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    _check_finite(data, op)
    tracked = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = tracked
    out._done = False
    if tracked:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _binary_shapes(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} are not identical "
                         "(only scalar and same-shape operands are supported)")


# -- elementwise ---------------------------------------------------------


def add(a, b):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        out_data = a.data + float(b)

        def bw(g):
            _accum(a, g)

        return _make(out_data, (a,), bw, "add")
    b = as_tensor(b)
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(out_data, (a, b), bw, "add")


def sub(a, b):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    b = as_tensor(b)
    _binary_shapes(a, b, "sub")
    out_data = a.data - b.data

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(out_data, (a, b), bw, "sub")


def mul(a, b):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    b = as_tensor(b)
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out_data, (a, b), bw, "mul")


def scale(a, c):
    """Multiply by a Python scalar."""
    a = as_tensor(a)
    c = float(c)
    out_data = a.data * c

    def bw(g):
        _accum(a, g * c)

    return _make(out_data, (a,), bw, "scale")


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw, "tanh")


def sigmoid(a):
    a = as_tensor(a)
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out_data[~pos] = ez / (1.0 + ez)

    def bw(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw, "sigmoid")


def relu(a):
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _make(out_data, (a,), bw, "relu")


LEAKY_SLOPE = 0.2  # conventional slope for attention logits


def leaky_relu(a, slope=LEAKY_SLOPE):
    a = as_tensor(a)
    out_data = np.where(a.data >= 0, a.data, slope * a.data)

    def bw(g):
        _accum(a, g * np.where(a.data >= 0, 1.0, slope))

    return _make(out_data, (a,), bw, "leaky_relu")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bw, "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    out_data = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), bw, "log")


def clamp(a, lo, hi):
    """Clip values to [lo, hi]; gradient passes through inside the bounds."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def bw(g):
        _accum(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _make(out_data, (a,), bw, "clamp")


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "exp": exp,
    "log": log,
}


def elementwise(op, *operands):
    """Dispatch an elementwise op by name."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# -- structural ops ------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.data.shape} by {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bw, "matmul")


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")
    out_data = np.ascontiguousarray(a.data.T)

    def bw(g):
        _accum(a, g.T)

    return _make(out_data, (a,), bw, "transpose")


def sum_all(a):
    """Sum all entries into a 1-element tensor."""
    a = as_tensor(a)
    out_data = np.array([a.data.sum()])

    def bw(g):
        _accum(a, np.full_like(a.data, g.item()))

    return _make(out_data, (a,), bw, "sum_all")


def sum_rows(a):
    """Row sums of a matrix, shape (m, 1)."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"sum_rows expects a matrix, got shape {a.data.shape}")
    out_data = a.data.sum(axis=1, keepdims=True)

    def bw(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), bw, "sum_rows")


def add_rowvec(a, b):
    """Add a (n,) or (1, n) row vector to every row of an (m, n) matrix.

    Explicit op rather than silent broadcasting.
    """
    a, b = as_tensor(a), as_tensor(b)
    row = b.data.reshape(1, -1)
    if a.data.ndim != 2 or a.data.shape[1] != row.shape[1]:
        raise ShapeError(f"add_rowvec: matrix {a.data.shape} vs row vector {b.data.shape}")
    out_data = a.data + row

    def bw(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0).reshape(b.data.shape))

    return _make(out_data, (a, b), bw, "add_rowvec")


def concat_cols(tensors):
    """Concatenate matrices along columns."""
    tensors = [as_tensor(t) for t in tensors]
    rows = {t.data.shape[0] for t in tensors}
    if any(t.data.ndim != 2 for t in tensors) or len(rows) != 1:
        raise ShapeError(f"concat_cols: incompatible shapes {[t.data.shape for t in tensors]}")
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    widths = [t.data.shape[1] for t in tensors]

    def bw(g):
        off = 0
        for t, w in zip(tensors, widths):
            _accum(t, g[:, off:off + w])
            off += w

    return _make(out_data, tuple(tensors), bw, "concat_cols")


def concat_rows(tensors):
    """Stack matrices along rows."""
    tensors = [as_tensor(t) for t in tensors]
    cols = {t.data.shape[1] for t in tensors}
    if any(t.data.ndim != 2 for t in tensors) or len(cols) != 1:
        raise ShapeError(f"concat_rows: incompatible shapes {[t.data.shape for t in tensors]}")
    out_data = np.concatenate([t.data for t in tensors], axis=0)
    heights = [t.data.shape[0] for t in tensors]

    def bw(g):
        off = 0
        for t, h in zip(tensors, heights):
            _accum(t, g[off:off + h, :])
            off += h

    return _make(out_data, tuple(tensors), bw, "concat_rows")


def take_rows(a, indices):
    """Select rows by index (duplicates allowed); gradients scatter-add back."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows expects a matrix, got shape {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row index out of range for {a.data.shape[0]} rows")
    out_data = a.data[idx].copy()

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _make(out_data, (a,), bw, "take_rows")


def softmax_rows(a):
    """Row-wise softmax, stabilized by max subtraction."""
    a = as_tensor(a)
    x = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    shifted = x - x.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    p = ex / ex.sum(axis=1, keepdims=True)
    out_data = p.reshape(a.data.shape)

    def bw(g):
        g2 = g.reshape(p.shape)
        dot = (g2 * p).sum(axis=1, keepdims=True)
        _accum(a, (p * (g2 - dot)).reshape(a.data.shape))

    return _make(out_data, (a,), bw, "softmax_rows")


# -- parameter init and Adam ----------------------------------------------


def glorot(shape, rng):
    """Glorot-uniform initialized parameter tensor."""
    fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], shape[0])
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


@dataclass
class AdamState:
    """Moment buffers for a list of parameters."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One in-place Adam update with bias correction.

    `params` and `grads` are parallel lists of ndarrays; moment buffers are
    created lazily on the first call.
    """
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params vs {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"adam_step: state holds {len(state.m)} buffers for {len(params)} params")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"adam_step: param {p.shape} vs grad {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Adam bound to a list of parameter Tensors."""

    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)
