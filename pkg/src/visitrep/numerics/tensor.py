"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records the value plus vector-Jacobian closures for the
parents that need gradients. Calling ``backward()`` on a scalar walks the
recorded graph in reverse topological order and accumulates gradients into
the leaves. All arithmetic is float64; checkpointing elsewhere narrows to
float32, never this module.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "add",
    "mul",
    "matmul",
    "concat",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "masked_fill",
    "layer_norm",
    "mean",
    "tsum",
    "log",
    "clip",
    "transpose",
    "reshape",
    "gather_rows",
    "slice_axis",
    "uniform_init",
]


def _check_values(arr: np.ndarray, op: str, allow_neg_inf: bool = False) -> None:
    """Reject NaN always; reject infinities except -inf where masking allows it."""
    if np.isnan(arr).any():
        raise ValueError(f"{op}: NaN in input")
    if allow_neg_inf:
        if np.isposinf(arr).any():
            raise ValueError(f"{op}: +inf in input")
    elif np.isinf(arr).any():
        raise ValueError(f"{op}: non-finite input")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the recorded closures needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_values(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        # (parent, closure) pairs, populated only by _make_node.
        self._vjps: tuple = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make_node(data: np.ndarray, parents_and_vjps) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        vjps = tuple((p, fn) for p, fn in parents_and_vjps if p.requires_grad)
        out._vjps = vjps
        out.requires_grad = bool(vjps)
        return out

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if not self._vjps:
            raise ValueError("backward called before any forward computation was recorded")

        # Iterative postorder: children before parents in `topo`.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._vjps:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._vjps:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = np.array(contrib, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + contrib
            if node._vjps:
                # Interior grads are only needed once; free them eagerly.
                node.grad = None
        self.grad = np.ones_like(self.data)

    # -- operator sugar --------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return float(other)
        return Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            return shift(self, other)
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        other = self._coerce(other)
        if isinstance(other, float):
            return shift(self, -other)
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms ----------------------------------------------------------

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def softmax(self):
        return softmax(self)

    def log(self):
        return log(self)

    def clip(self, lo: float, hi: float):
        return clip(self, lo, hi)

    def mean(self, axis=None):
        return mean(self, axis)

    def sum(self, axis=None):
        return tsum(self, axis)

    def transpose(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, shape)


class Parameter(Tensor):
    """A named trainable leaf; its gradient buffer persists across steps."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform[-1/sqrt(fan_in), +1/sqrt(fan_in)] initial values."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, size=shape)


# -- kernels -------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_values(a.data, "add")
    _check_values(b.data, "add")
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} are not broadcastable")
    return Tensor._make_node(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_values(a.data, "mul")
    _check_values(b.data, "mul")
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} are not broadcastable")
    ad, bd = a.data, b.data
    return Tensor._make_node(
        out,
        [
            (a, lambda g: _unbroadcast(g * bd, ad.shape)),
            (b, lambda g: _unbroadcast(g * ad, bd.shape)),
        ],
    )


def scale(a: Tensor, s: float) -> Tensor:
    _check_values(a.data, "scale")
    s = float(s)
    return Tensor._make_node(a.data * s, [(a, lambda g: g * s)])


def shift(a: Tensor, s: float) -> Tensor:
    _check_values(a.data, "shift")
    return Tensor._make_node(a.data + float(s), [(a, lambda g: g)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_values(a.data, "matmul")
    _check_values(b.data, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)

    return Tensor._make_node(out, [(a, vjp_a), (b, vjp_b)])


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty tensor list")
    for t in tensors:
        _check_values(t.data, "concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ValueError(f"concat: incompatible shapes {shapes} along axis {axis}")

    pairs = []
    offset = 0
    for t in tensors:
        width = t.shape[axis]
        start = offset

        def vjp(g, start=start, width=width):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, start + width)
            return g[tuple(index)]

        pairs.append((t, vjp))
        offset += width
    return Tensor._make_node(out, pairs)


def sigmoid(a: Tensor) -> Tensor:
    _check_values(a.data, "sigmoid")
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make_node(out, [(a, lambda g: g * out * (1.0 - out))])


def tanh(a: Tensor) -> Tensor:
    _check_values(a.data, "tanh")
    out = np.tanh(a.data)
    return Tensor._make_node(out, [(a, lambda g: g * (1.0 - out * out))])


def relu(a: Tensor) -> Tensor:
    _check_values(a.data, "relu")
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return Tensor._make_node(out, [(a, lambda g: g * mask)])


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis. -inf logits (from masked_fill)
    contribute exactly zero probability; a fully masked row is an error."""
    _check_values(a.data, "softmax", allow_neg_inf=True)
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise ValueError("softmax: a row is fully masked (all logits are -inf)")
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (g - inner) * out

    return Tensor._make_node(out, [(a, vjp)])


def masked_fill(a: Tensor, mask: np.ndarray) -> Tensor:
    """Set entries where mask is True to -inf (for consumption by softmax)."""
    _check_values(a.data, "masked_fill")
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise ValueError(f"masked_fill: mask must be boolean, got dtype {mask.dtype}")
    if mask.shape != a.shape:
        raise ValueError(f"masked_fill: mask shape {mask.shape} != logits shape {a.shape}")
    out = np.where(mask, -np.inf, a.data)
    keep = ~mask
    return Tensor._make_node(out, [(a, lambda g: g * keep)])


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    _check_values(a.data, "layer_norm")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = (x - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * out).mean(axis=-1, keepdims=True)
        return inv * (g - gm - out * gym)

    return Tensor._make_node(out, [(a, vjp)])


def mean(a: Tensor, axis=None) -> Tensor:
    _check_values(a.data, "mean")
    if axis is None:
        out = np.asarray(a.data.mean())
        size = a.data.size
        shape = a.data.shape
        return Tensor._make_node(out, [(a, lambda g: np.broadcast_to(g / size, shape).copy())])
    out = a.data.mean(axis=axis)
    count = a.data.shape[axis]
    shape = a.data.shape

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy()

    return Tensor._make_node(out, [(a, vjp)])


def tsum(a: Tensor, axis=None) -> Tensor:
    _check_values(a.data, "sum")
    if axis is None:
        out = np.asarray(a.data.sum())
        shape = a.data.shape
        return Tensor._make_node(out, [(a, lambda g: np.broadcast_to(g, shape).copy())])
    out = a.data.sum(axis=axis)
    shape = a.data.shape

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return Tensor._make_node(out, [(a, vjp)])


def log(a: Tensor) -> Tensor:
    _check_values(a.data, "log")
    if (a.data <= 0.0).any():
        raise ValueError("log: non-positive input")
    out = np.log(a.data)
    ad = a.data
    return Tensor._make_node(out, [(a, lambda g: g / ad)])


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is 1 strictly inside the interval, else 0."""
    _check_values(a.data, "clip")
    if not lo < hi:
        raise ValueError(f"clip: require lo < hi, got [{lo}, {hi}]")
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return Tensor._make_node(out, [(a, lambda g: g * inside)])


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    _check_values(a.data, "transpose")
    if a.ndim < 2:
        raise ValueError(f"transpose: needs at least 2 dims, got shape {a.shape}")
    out = a.data.swapaxes(-1, -2).copy()
    return Tensor._make_node(out, [(a, lambda g: g.swapaxes(-1, -2))])


def reshape(a: Tensor, shape) -> Tensor:
    _check_values(a.data, "reshape")
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    out = a.data.reshape(shape)
    orig = a.data.shape
    return Tensor._make_node(out, [(a, lambda g: g.reshape(orig))])


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-d tensor; gradients scatter-add back into the rows."""
    _check_values(a.data, "gather_rows")
    if a.ndim != 2:
        raise ValueError(f"gather_rows: expected a 2-d table, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError(f"gather_rows: indices must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(
            f"gather_rows: index out of range for table with {a.shape[0]} rows"
        )
    out = a.data[idx]
    shape = a.data.shape

    def vjp(g):
        z = np.zeros(shape, dtype=np.float64)
        np.add.at(z, idx, g)
        return z

    return Tensor._make_node(out, [(a, vjp)])


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; gradient scatters into the slice."""
    _check_values(a.data, "slice_axis")
    if not 0 <= axis < a.ndim:
        raise ValueError(f"slice_axis: axis {axis} out of range for shape {a.shape}")
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice_axis: [{start}, {stop}) invalid for axis of length {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index].copy()
    shape = a.data.shape

    def vjp(g):
        z = np.zeros(shape, dtype=np.float64)
        z[index] = g
        return z

    return Tensor._make_node(out, [(a, vjp)])
