"""Small dense-tensor reverse-mode autodiff on top of numpy.

Every learned component in the package (the quantized autoencoder, the token
model, the diffusion actor and critics, the refinement encoder) is built from
the operations defined here.  Tensors record their parents when created, and
:func:`backward` walks that record in reverse topological order.

Storage is float32 by default.  Reductions (``matmul``, ``sum``, ``mean``) run
in float64 and are cast back.  Code that needs float64 end to end, like the
gradient audits, wraps itself in :func:`precision`.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

BCE_EPS = 1e-7

_local = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


class ShapeError(ValueError):
    """Raised when operand dims are incompatible for an operation."""


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "grad", "op", "name")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool = False,
        op: str = "leaf",
        name: str | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad: np.ndarray | None = None
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, dims={self.dims}, dtype={self.data.dtype})"

    # operator sugar; every method maps onto a registered op
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


def _node(value: np.ndarray, parents, backward_fn, op: str, dtype) -> Tensor:
    out = np.asarray(value)
    if out.dtype != dtype:
        out = out.astype(dtype)
    if __debug__ and out.size and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    return Tensor(out, parents=tuple(parents), backward_fn=backward_fn, op=op)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand 1 dims {b.dims} do not match operand 0 dims {a.dims}")


def _trailing(op: str, a: Tensor, b: Tensor) -> int:
    """Return how many leading axes of ``a`` ``b`` is broadcast over."""
    if a.shape == b.shape:
        return 0
    if b.ndim == 0:
        return a.ndim
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return a.ndim - b.ndim
    raise ShapeError(f"{op}: operand 1 dims {b.dims} are neither equal to nor a trailing suffix of operand 0 dims {a.dims}")


def _reduce_lead(g: np.ndarray, lead: int) -> np.ndarray:
    if lead == 0:
        return g
    return g.sum(axis=tuple(range(lead)), dtype=np.float64).astype(g.dtype)


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-dimension bias."""
    lead = _trailing("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, _reduce_lead(g, lead)), "add", a.data.dtype)


def sub(a: Tensor, b: Tensor) -> Tensor:
    lead = _trailing("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -_reduce_lead(g, lead)), "sub", a.data.dtype)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a trailing-dimension gain."""
    lead = _trailing("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, _reduce_lead(g * ad, lead)), "mul", ad.dtype)


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale", a.data.dtype)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square", ad.dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``(m,k)@(k,)``, ``(...,m,k)@(k,n)`` with a shared right operand,
    and ``(...,m,k)@(...,k,n)`` with identical leading dims.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 1:
        raise ShapeError(f"matmul: operand 0 must have rank >= 2, got dims {a.dims}")
    if ad.shape[-1] != bd.shape[0 if bd.ndim <= 2 else -2]:
        raise ShapeError(f"matmul: operand 1 dims {b.dims} incompatible with operand 0 dims {a.dims}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: operand 1 leading dims {b.dims[:-2]} differ from operand 0 {a.dims[:-2]}")
    dtype = ad.dtype
    a64, b64 = ad.astype(np.float64), bd.astype(np.float64)
    out = a64 @ b64

    def back(g):
        g64 = g.astype(np.float64)
        if bd.ndim == 1:
            ga = g64[..., None] * b64
            gb = np.einsum("...i,...ij->j", g64, a64) if ad.ndim > 2 else a64.T @ g64
        elif bd.ndim == 2:
            ga = g64 @ b64.T
            gb = a64.reshape(-1, ad.shape[-1]).T @ g64.reshape(-1, bd.shape[-1])
        else:
            ga = g64 @ np.swapaxes(b64, -1, -2)
            gb = np.swapaxes(a64, -1, -2) @ g64
        return ga.astype(dtype), gb.astype(dtype)

    return _node(out, (a, b), back, "matmul", dtype)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,), "relu", a.data.dtype)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp", a.data.dtype)


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log", ad.dtype)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),), "tanh", a.data.dtype)


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid", a.data.dtype)


def clip(a: Tensor, lo, hi) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    lo_arr = np.asarray(lo, dtype=a.data.dtype)
    hi_arr = np.asarray(hi, dtype=a.data.dtype)
    inside = (a.data >= lo_arr) & (a.data <= hi_arr)
    return _node(np.clip(a.data, lo_arr, hi_arr), (a,), lambda g: (g * inside,), "clip", a.data.dtype)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), back, "softmax", a.data.dtype)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _node(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax", a.data.dtype)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine terms; compose with mul/add)."""
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def back(g):
        g64 = g.astype(np.float64)
        gx = inv / n * (n * g64 - g64.sum(axis=-1, keepdims=True) - xhat * (g64 * xhat).sum(axis=-1, keepdims=True))
        return (gx.astype(a.data.dtype),)

    return _node(xhat, (a,), back, "layer_norm", a.data.dtype)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty operand list")
    ref = tensors[0]
    ax = axis % ref.ndim
    for i, t in enumerate(tensors[1:], start=1):
        if t.ndim != ref.ndim or any(t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax):
            raise ShapeError(f"concat: operand {i} dims {t.dims} incompatible with operand 0 dims {ref.dims} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back, "concat", ref.data.dtype)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(None), 0))``."""
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _node(out, (a,), back, "slice", a.data.dtype)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape", a.data.dtype)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose", a.data.dtype)


def repeat(a: Tensor, n: int, axis: int) -> Tensor:
    """Insert a new axis at ``axis`` and tile ``a`` ``n`` times along it."""
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _node(out, (a,), lambda g: (g.sum(axis=axis, dtype=np.float64).astype(a.data.dtype),), "repeat", a.data.dtype)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather ``table[idx]``; gradient scatters back into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be rank 2, got dims {table.dims}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table with {table.shape[0]} rows")

    def back(g):
        full = np.zeros(table.shape, dtype=np.float64)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]).astype(np.float64))
        return (full.astype(table.data.dtype),)

    return _node(table.data[idx], (table,), back, "embedding", table.data.dtype)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _node(out, (a,), back, "sum", a.data.dtype)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    _check_same("mse", pred, target)
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    n = diff.size

    def back(g):
        gd = (2.0 / n) * float(g) * diff
        return gd.astype(pred.data.dtype), (-gd).astype(target.data.dtype)

    return _node((diff * diff).sum() / n, (pred, target), back, "mse", pred.data.dtype)


def bce(pred: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy with predictions clamped to ``[eps, 1-eps]``.

    ``reduction`` is ``"mean"`` (per element) or ``"sum"``.  Target receives
    no gradient.
    """
    _check_same("bce", pred, target)
    p = np.clip(pred.data.astype(np.float64), BCE_EPS, 1 - BCE_EPS)
    y = target.data.astype(np.float64)
    inside = (pred.data >= BCE_EPS) & (pred.data <= 1 - BCE_EPS)
    val = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    div = val.size if reduction == "mean" else 1

    def back(g):
        gp = float(g) * (-(y / p) + (1 - y) / (1 - p)) / div * inside
        return gp.astype(pred.data.dtype), None

    return _node(val.sum() / div, (pred, target), back, "bce", pred.data.dtype)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in value; the result is a constant as far as backward is concerned."""
    return Tensor(x.data.copy(), op="stop_gradient")


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "square": square,
    "relu": relu,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "clip": clip,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "repeat": repeat,
    "embedding": embedding,
    "sum": sum_,
    "mean": mean,
    "mse": mse,
    "bce": bce,
    "stop_gradient": stop_gradient,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch an operation by name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


class Graph:
    """Nodes reachable from a root, in topological order (parents first)."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _toposort(root)
        self.gradients: dict[Tensor, np.ndarray] = {}

    def parameters(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.parents and n.requires_grad]


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) for every trainable leaf reachable from root.

    Leaf ``.grad`` fields are overwritten (not summed across calls).  Returns
    the mapping leaf -> gradient.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got dims {root.dims}")
    graph = graph or Graph(root)
    adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                graph.gradients[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
    for leaf in graph.parameters():
        if leaf not in graph.gradients:
            graph.gradients[leaf] = np.zeros_like(leaf.data)
        leaf.grad = graph.gradients[leaf]
    return graph.gradients


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x.data``, in place."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-3) -> float:
    """Largest relative error between reverse-mode and central-difference gradients."""
    params = list(params)
    grads = backward(f())
    worst = 0.0
    for p in params:
        ad = grads.get(p, np.zeros_like(p.data))
        worst = max(worst, relative_error(ad, numeric_grad(f, p, h)))
    return worst
