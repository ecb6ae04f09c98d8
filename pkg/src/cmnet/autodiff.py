"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every operation returns a fresh ``Tensor`` that remembers its
parents and a closure propagating the output adjoint backwards, so a forward
pass implicitly records the tape. Tapes are built per utterance and are
single-use: ``backward`` refuses to run twice on the same seed.

All values are 64-bit floats. ``softmax`` and ``logsumexp`` subtract the
slice maximum before exponentiation.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ParameterStore",
    "ShapeError",
    "ContractError",
    "DeterminismError",
    "const",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "stack",
    "sigmoid",
    "tanh",
    "softmax",
    "logsumexp",
    "mean",
    "tsum",
    "amax",
    "embedding_lookup",
    "dropout",
    "backward",
    "gradients",
    "grad_check",
    "grad_check_report",
]


class ShapeError(Exception):
    """Input shapes do not conform for an operation."""


class ContractError(Exception):
    """An operation was invoked outside its contract."""


class DeterminismError(Exception):
    """A loss builder returned different values on identical evaluations."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """One node of the tape: a float64 ndarray plus adjoint plumbing.

    ``parents`` and ``_vjp`` are empty/None for leaves (parameters,
    constants). ``grad`` is allocated lazily during the backward sweep.
    """

    __slots__ = ("data", "op", "parents", "grad", "_vjp", "_used")

    def __init__(self, data, op="leaf", parents=(), vjp=None):
        self.data = _as_array(data)
        self.op = op
        self.parents = parents
        self.grad = None
        self._vjp = vjp
        self._used = False

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
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return tslice(self, key)


class Parameter(Tensor):
    """Named leaf tensor. Frozen parameters get zero adjoints, never updates."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, op="param")
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.data.shape}{flag})"


class ParameterStore:
    """Ordered, name-unique collection of model parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ContractError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def trainable(self):
        return [p for p in self._params.values() if p.trainable]

    def manifest(self):
        """(name, shape, trainable) rows sorted by name."""
        return sorted(
            (p.name, tuple(p.data.shape), p.trainable) for p in self._params.values()
        )

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self._params.values()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self._params.values():
            src = state[p.name]
            if src.shape != p.data.shape:
                raise ShapeError(
                    f"parameter {p.name}: stored shape {src.shape} != model shape {p.data.shape}"
                )
            p.data = src.astype(np.float64).copy()


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def const(x) -> Tensor:
    """Leaf holding a constant (gradients are computed but never read)."""
    return Tensor(x, op="const")


def _acc(node: Tensor, g: np.ndarray) -> None:
    # grads are never mutated in place, so sharing/view aliasing is safe
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    out = Tensor(a.data + b.data, op="add", parents=(a, b))

    def vjp(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    out._vjp = vjp
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, op="neg", parents=(a,))
    out._vjp = lambda g: _acc(a, -g)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)
    out = Tensor(a.data - b.data, op="sub", parents=(a, b))

    def vjp(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    out._vjp = vjp
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)
    out = Tensor(a.data * b.data, op="mul", parents=(a, b))

    def vjp(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    out._vjp = vjp
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = Tensor(a.data @ b.data, op="matmul", parents=(a, b))

    def vjp(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    out._vjp = vjp
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got shape {a.data.shape}")
    out = Tensor(a.data.T, op="transpose", parents=(a,))
    out._vjp = lambda g: _acc(a, g.T)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if -1 not in shape and int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view shape {a.data.shape} as {shape}")
    out = Tensor(a.data.reshape(shape), op="reshape", parents=(a,))
    out._vjp = lambda g: _acc(a, g.reshape(a.data.shape))
    return out


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty input list")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat(axis={axis}): shapes {[p.data.shape for p in parts]} do not conform"
        )
    out = Tensor(data, op="concat", parents=tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(p, g[tuple(idx)])

    out._vjp = vjp
    return out


def stack(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("stack: empty input list")
    shapes = {p.data.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = Tensor(np.stack([p.data for p in parts], axis=axis), op="stack", parents=tuple(parts))

    def vjp(g):
        for i, p in enumerate(parts):
            _acc(p, np.take(g, i, axis=axis))

    out._vjp = vjp
    return out


def tslice(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key], op="slice", parents=(a,))

    def vjp(g):
        z = np.zeros_like(a.data)
        z[key] = g
        _acc(a, z)

    out._vjp = vjp
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(s, op="sigmoid", parents=(a,))
    out._vjp = lambda g: _acc(a, g * s * (1.0 - s))
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t, op="tanh", parents=(a,))
    out._vjp = lambda g: _acc(a, g * (1.0 - t * t))
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, op="softmax", parents=(a,))

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _acc(a, s * (g - dot))

    out._vjp = vjp
    return out


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    tot = e.sum(axis=axis, keepdims=True)
    val = m + np.log(tot)
    out = Tensor(val if keepdims else np.squeeze(val, axis=axis), op="logsumexp", parents=(a,))
    soft = e / tot

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        _acc(a, g * soft)

    out._vjp = vjp
    return out


def mean(a: Tensor, axis: int = 0, keepdims: bool = False) -> Tensor:
    n = a.data.shape[axis]
    val = a.data.mean(axis=axis, keepdims=keepdims)
    out = Tensor(val, op="mean", parents=(a,))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        _acc(a, np.broadcast_to(g / n, a.data.shape))

    out._vjp = vjp
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    val = a.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor(val, op="sum", parents=(a,))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        _acc(a, np.broadcast_to(g, a.data.shape))

    out._vjp = vjp
    return out


def amax(a: Tensor, axis: int = 0, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient routes to the first argmax (ties broken low)."""
    val = a.data.max(axis=axis, keepdims=keepdims)
    arg = a.data.argmax(axis=axis)
    out = Tensor(val, op="max", parents=(a,))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        z = np.zeros_like(a.data)
        np.put_along_axis(z, np.expand_dims(arg, axis=axis), g, axis=axis)
        _acc(a, z)

    out._vjp = vjp
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-d table; adjoint scatter-adds into the table."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding-lookup: table must be 2-d, got {table.data.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    out = Tensor(table.data[idx], op="lookup", parents=(table,))

    def vjp(g):
        z = np.zeros_like(table.data)
        np.add.at(z, idx, g)
        _acc(table, z)

    out._vjp = vjp
    return out


def dropout(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a fixed (already scaled) mask; identity when mask is None."""
    if mask is None:
        return a
    m = _as_array(mask)
    if m.shape != a.data.shape:
        raise ShapeError(f"dropout: mask shape {m.shape} != input shape {a.data.shape}")
    out = Tensor(a.data * m, op="dropout", parents=(a,))
    out._vjp = lambda g: _acc(a, g * m)
    return out


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------


def _topo(seed: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(seed, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(seed: Tensor) -> None:
    """Propagate adjoints from a scalar seed through its tape, once."""
    if seed.data.size != 1:
        raise ContractError(f"backward: seed must be scalar, got shape {seed.data.shape}")
    if seed._used:
        raise ContractError("backward: tape already consumed")
    seed._used = True
    order = _topo(seed)
    for node in order:
        node.grad = None
    seed.grad = np.ones_like(seed.data)
    for node in reversed(order):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


def gradients(seed: Tensor, params) -> dict[str, np.ndarray]:
    """Backward from ``seed``; gradient per parameter name.

    Trainable parameters unreachable from the seed, and frozen parameters,
    map to zero arrays of matching shape.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(seed)
    out = {}
    for p in params:
        if p.trainable and p.grad is not None:
            out[p.name] = p.grad
        else:
            out[p.name] = np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def grad_check_report(loss_builder, params, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients, per parameter.

    ``loss_builder`` must deterministically map the current parameter values
    to a scalar Tensor on a fresh tape. Relative error per entry is
    |a - n| / max(1e-8, |a| + |n|).
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    params = list(params)
    first = float(loss_builder().data)
    second = float(loss_builder().data)
    if first != second:
        raise DeterminismError(
            f"loss builder is not deterministic: {first!r} != {second!r}"
        )
    analytic = gradients(loss_builder(), params)
    report: dict[str, float] = {}
    for p in params:
        if not p.trainable:
            continue
        flat = p.data.reshape(-1)
        a = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_builder().data)
            flat[i] = orig - eps
            f_minus = float(loss_builder().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(a[i] - numeric) / max(1e-8, abs(a[i]) + abs(numeric))
            if err > worst:
                worst = err
        report[p.name] = worst
    return report


def grad_check(loss_builder, params, eps: float = 1e-5) -> float:
    """Overall max relative error over all trainable parameter entries."""
    report = grad_check_report(loss_builder, params, eps)
    return max(report.values(), default=0.0)
