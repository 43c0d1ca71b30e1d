"""Dense reverse-mode automatic differentiation over float64 numpy arrays.

Every op records its inputs and a gradient function on the output tensor.
`backward` walks the recorded graph in reverse topological order and
accumulates gradients into every tensor with ``requires_grad``.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DegenerateEmbeddingError, DimensionError, NumericError

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A node in the compute graph: a float64 array plus optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_op", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._prev: Tuple["Tensor", ...] = ()
        self._op = "leaf"
        self._grad_fn: Optional[GradFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._prev

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


Operand = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(x: Operand) -> Tensor:
    """Wrap non-tensor input as a constant (no gradient) tensor."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _lift(x: Operand, like: Tensor) -> Tensor:
    # python scalars combine with any shape by materializing a full constant
    if isinstance(x, (int, float)):
        return Tensor(np.full(like.shape, float(x)))
    return as_tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], kind: str, grad_fn: GradFn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._op = kind
        out._grad_fn = grad_fn
    else:
        out._op = kind
    return out


OPS: Dict[str, Callable[..., Tensor]] = {}


def register(kind: str):
    def wrap(fn):
        OPS[kind] = fn
        return fn
    return wrap


def forward_op(kind: str, *inputs: Operand, **kwargs) -> Tensor:
    """Dispatch a registered op by name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}; registered: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


# ---- ops ----

@register("matmul")
def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or (a.data.ndim == 1 and b.data.ndim == 1):
        raise DimensionError("matmul needs a matrix operand", [a.shape, b.shape])
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise DimensionError("matmul inner dimensions differ", [a.shape, b.shape])
    A, B = a.data, b.data

    def grad_fn(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2:
            return np.outer(g, B), A.T @ g
        return B @ g, np.outer(A, g)

    return _make(A @ B, (a, b), "matmul", grad_fn)


@register("add")
def add(a: Operand, b: Operand) -> Tensor:
    """Elementwise sum; also adds a (D,) bias to every row of an (N, D) matrix."""
    if isinstance(a, Tensor):
        b = _lift(b, a)
    elif isinstance(b, Tensor):
        a = _lift(a, b)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make(a.data + b.data, (a, b), "add", lambda g: (g, g.sum(axis=0)))
    raise DimensionError("add needs equal shapes or a row-wise bias", [a.shape, b.shape])


@register("mul")
def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("mul needs equal shapes", [a.shape, b.shape])
    A, B = a.data, b.data
    return _make(A * B, (a, b), "mul", lambda g: (g * B, g * A))


@register("neg")
def neg(a: Operand) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


@register("scale")
def scale(a: Operand, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


@register("relu")
def relu(a: Operand) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


@register("exp")
def exp(a: Operand) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


@register("log")
def log(a: Operand, floor: Optional[float] = None) -> Tensor:
    """Natural log. With `floor`, inputs below it are clamped and pass no gradient."""
    a = as_tensor(a)
    if floor is None:
        if np.any(a.data <= 0):
            raise NumericError("log of a non-positive value")
        v = a.data
        return _make(np.log(v), (a,), "log", lambda g: (g / v,))
    v = np.maximum(a.data, floor)
    live = a.data > floor
    return _make(np.log(v), (a,), "log", lambda g: (np.where(live, g / v, 0.0),))


def _rows(a: Tensor, kind: str) -> np.ndarray:
    if a.data.ndim not in (1, 2):
        raise DimensionError(f"{kind} needs a vector or matrix", [a.shape])
    return a.data


@register("softmax_rows")
def softmax_rows(a: Operand) -> Tensor:
    a = as_tensor(a)
    x = _rows(a, "softmax_rows")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    s = z / z.sum(axis=-1, keepdims=True)
    return _make(s, (a,), "softmax_rows", lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


@register("dot")
def dot(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError("dot needs two vectors of equal length", [a.shape, b.shape])
    A, B = a.data, b.data
    return _make(np.dot(A, B), (a, b), "dot", lambda g: (g * B, g * A))


@register("l2_normalize_rows")
def l2_normalize_rows(a: Operand) -> Tensor:
    a = as_tensor(a)
    x = _rows(a, "l2_normalize_rows")
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateEmbeddingError("cannot normalize a zero row")
    y = x / norms
    return _make(y, (a,), "l2_normalize_rows", lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,))


@register("sum")
def sum(a: Operand) -> Tensor:  # noqa: A001 - mirrors the op name
    a = as_tensor(a)
    shape = a.shape
    return _make(np.sum(a.data), (a,), "sum", lambda g: (np.full(shape, float(g)),))


@register("mean")
def mean(a: Operand) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ContractError("mean of an empty tensor")
    shape, n = a.shape, a.size
    return _make(np.mean(a.data), (a,), "mean", lambda g: (np.full(shape, float(g) / n),))


@register("sum_rows")
def sum_rows(a: Operand) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("sum_rows needs a matrix", [a.shape])
    cols = a.shape[1]
    return _make(a.data.sum(axis=1), (a,), "sum_rows", lambda g: (np.repeat(g[:, None], cols, axis=1),))


@register("transpose")
def transpose(a: Operand) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose needs a matrix", [a.shape])
    return _make(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


@register("take_rows")
def take_rows(a: Operand, index) -> Tensor:
    """Row gather. An int index returns a vector, an index array a matrix."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("take_rows needs a matrix", [a.shape])
    idx = index if isinstance(index, (int, np.integer)) else np.asarray(index, dtype=np.int64)
    shape = a.shape

    def grad_fn(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _make(a.data[idx], (a,), "take_rows", grad_fn)


@register("gather")
def gather(a: Operand, rows, cols) -> Tensor:
    """out[i, j] = a[rows[i, j], cols[i, j]]."""
    a = as_tensor(a)
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    if a.data.ndim != 2 or r.shape != c.shape:
        raise DimensionError("gather needs a matrix and index arrays of equal shape", [a.shape, r.shape, c.shape])
    shape = a.shape

    def grad_fn(g):
        z = np.zeros(shape)
        np.add.at(z, (r, c), g)
        return (z,)

    return _make(a.data[r, c], (a,), "gather", grad_fn)


@register("stack")
def stack(tensors: Sequence[Operand]) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("stack of an empty sequence")
    if len({t.shape for t in ts}) != 1:
        raise DimensionError("stack needs equal shapes", [t.shape for t in ts])
    return _make(np.stack([t.data for t in ts]), ts, "stack", lambda g: tuple(g[i] for i in range(len(ts))))


@register("block")
def block(*inputs: Operand) -> Tensor:
    """Scalar zero that stays attached to `inputs` but sends them zero gradient."""
    ts = [as_tensor(t) for t in inputs]
    shapes = [t.shape for t in ts]
    return _make(np.float64(0.0), ts, "block", lambda g: tuple(np.zeros(s) for s in shapes))


# ---- graph ----

@dataclass
class OpRecord:
    node_id: int
    kind: str
    input_ids: Tuple[int, ...]
    output: Tensor


@dataclass
class ComputeGraph:
    """Operation records in topological order (inputs before outputs)."""

    nodes: List[OpRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


def trace(root: Tensor) -> ComputeGraph:
    order: List[Tensor] = []
    visited = set()
    stack_: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in reversed(node._prev):
            if id(parent) not in visited:
                stack_.append((parent, False))
    ids = {id(t): i for i, t in enumerate(order)}
    return ComputeGraph([OpRecord(i, t._op, tuple(ids[id(p)] for p in t._prev), t) for i, t in enumerate(order)])


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from `root`.

    Leaf gradients accumulate across calls; use `zero_grad` between steps.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root is not attached to any requires_grad tensor")
    graph = trace(root)
    for rec in graph.nodes:
        if not rec.output.is_leaf:
            rec.output.grad = None
    root.grad = np.ones_like(root.data)
    for rec in reversed(graph.nodes):
        node = rec.output
        if node._grad_fn is None or node.grad is None:
            continue
        for parent, g in zip(node._prev, node._grad_fn(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(parent.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
    for rec in graph.nodes:
        if rec.output.requires_grad and rec.output.grad is None:
            rec.output.grad = np.zeros_like(rec.output.data)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """theta <- theta - lr * grad; parameters without a gradient are left alone."""
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad


def grad_check(f: Callable[[Tensor], Tensor], x: Operand, step: float = 1e-5) -> float:
    """Max relative error between `backward` and central differences.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ContractError(f"grad_check step must be positive, got {step}")
    x0 = as_tensor(x).data.copy()
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    else:
        analytic = np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        numeric.flat[i] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2 * step)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericError("grad_check met a non-finite gradient")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    worst = float(err.max()) if err.size else 0.0
    logger.debug(f"grad_check over {x0.size} coordinates: max relative error {worst:.3e}")
    return worst
