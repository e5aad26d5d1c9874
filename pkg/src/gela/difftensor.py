"""Small reverse-mode differentiable tensor core on top of numpy float64 arrays.

Every primitive records its parents and an adjoint closure on the output
tensor.  ``backward`` linearises the graph into a :class:`Tape` (a
topological order), replays it in reverse and then consumes it.

Broadcasting is deliberately limited: two operands must either share a shape
or one shape must be a suffix of the other (a bias broadcast over leading
rows).  Anything else needs an explicit ``reshape``.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_grad_enabled = contextvars.ContextVar("gela_grad_enabled", default=True)

PRIMITIVES = (
    "matmul", "add", "sub", "mul", "div", "neg", "scale", "softmax",
    "log_softmax", "sigmoid", "tanh", "gelu", "relu", "layer_norm", "embedding",
    "concat", "masked_mean", "transpose", "reshape", "getitem", "sum", "mean",
    "exp", "log", "abs", "maximum", "minimum", "l2_normalize",
)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies every element is finite (any inf or nan propagates)
    with np.errstate(over="ignore", invalid="ignore"):
        total = float(np.add.reduce(arr, axis=None))
    if not math.isfinite(total) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# elementwise binary ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, b)
    if isinstance(a, (int, float)):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward, "maximum")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward, "minimum")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


# elementwise unary -----------------------------------------------------------

def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _make(x.data * on, (x,), lambda g: (g * on,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v * v * v)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make(out, (x,), backward, "gelu")


# normalisation ---------------------------------------------------------------

def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance (no affine part)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv
    n = x.shape[-1]

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _make(out, (x,), backward, "layer_norm")


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (x,), backward, "l2_normalize")


# linear algebra ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    vec_a = a.ndim == 1
    vec_b = b.ndim == 1
    ad = a.data[None, :] if vec_a else a.data
    bd = b.data[:, None] if vec_b else b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, shapes {a.shape} and {b.shape}")
    if ad.ndim == 2 and bd.ndim > 2:
        raise ShapeError(f"matmul: batch only on the left operand, shapes {a.shape} and {b.shape}")
    out = ad @ bd
    full_shape = out.shape

    def backward(g):
        gg = np.reshape(g, full_shape)
        ga = gg @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and gg.ndim > 2:
            # fold the batch into rows: one GEMM instead of a batched product and a sum
            gb = ad.reshape(-1, ad.shape[-1]).T @ gg.reshape(-1, gg.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ gg
        if vec_a:
            ga = ga[..., 0, :]
        if vec_b:
            gb = gb[..., 0]
        return ga, gb

    if vec_a:
        out = out[..., 0, :]
    if vec_b:
        out = out[..., 0]
    return _make(out, (a, b), backward, "matmul")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs ndim >= 2, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (x,), backward, "getitem")


def _is_basic_index(index) -> bool:
    """Integers and slices never repeat an element, so plain assignment suffices."""
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) for i in parts)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; the adjoint scatters into a dense table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table shape {table.shape}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), backward, "embedding")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat")


def masked_mean(x, mask) -> Tensor:
    """Mean of the rows of ``x`` selected (or weighted) by ``mask`` along axis 0."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[:1]:
        raise ShapeError(f"masked_mean: mask shape {m.shape} does not match rows of {x.shape}")
    total = m.sum()
    if total <= 0:
        raise ContractError("masked_mean: mask selects no rows")
    w = m / total
    out = np.tensordot(w, x.data, axes=(0, 0))

    def backward(g):
        return (np.multiply.outer(w, g),)

    return _make(out, (x,), backward, "masked_mean")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# autodiff ------------------------------------------------------------------------

@dataclass
class Tape:
    """Topologically ordered record of the primitives feeding one scalar."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def is_topological(self) -> bool:
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        return all(pos[id(p)] < pos[id(n)] for n in self.nodes for p in n._parents if id(p) in pos)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay_backward(self, seed: np.ndarray) -> list[Tensor]:
        """Run adjoints in exact reverse order; returns the visit order."""
        visited = []
        self.nodes[-1].grad = seed
        interim = {id(self.nodes[-1])}
        for node in reversed(self.nodes):
            visited.append(node)
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if not p.requires_grad:
                    continue
                if p._parents and id(p) not in interim:
                    p.grad = None
                    interim.add(id(p))
                p.grad = g if p.grad is None else p.grad + g
        return visited

    def consume(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad ancestor.

    Leaf gradients add onto whatever is already stored, so repeated calls
    accumulate like a batch sum.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor with no differentiable ancestors (empty tape)")
    tape = Tape.from_root(loss)
    tape.replay_backward(np.ones_like(loss.data))
    tape.consume()
    return tape


# finite differences ---------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    failures: list[tuple[int, tuple[int, ...], float, float]] = field(default_factory=list)

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.max_rel_error:.3e} checked={self.n_checked} failures={len(self.failures)}"


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return float(np.abs(analytic - numeric) / max(np.abs(analytic), np.abs(numeric), floor))


def grad_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    *,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of ``f(x)`` against central differences.

    ``x`` may be one tensor or a list of tensors; ``f`` is always called with
    ``x`` exactly as passed.  With ``max_coords`` only that many coordinates
    are probed per tensor, half of them drawn from entries with a non-zero
    analytic gradient.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    failures = []
    n = 0
    with no_grad():
        for k, t in enumerate(xs):
            flat = t.data.reshape(-1)
            coords = _pick_coords(analytic[k].reshape(-1), max_coords, rng)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + step
                fp = f(x).item()
                flat[c] = orig - step
                fm = f(x).item()
                flat[c] = orig
                num = (fp - fm) / (2 * step)
                ana = analytic[k].reshape(-1)[c]
                err = relative_error(ana, num, floor)
                n += 1
                worst = max(worst, err)
                if err > tol:
                    failures.append((k, np.unravel_index(c, t.shape), float(ana), float(num)))
    for t, (rg, g) in zip(xs, saved):
        t.requires_grad, t.grad = rg, g
    return GradCheckReport(not failures, worst, n, failures)


def _pick_coords(g: np.ndarray, max_coords: int | None, rng: np.random.Generator) -> Iterable[int]:
    size = g.size
    if max_coords is None or max_coords >= size:
        return range(size)
    nonzero = np.flatnonzero(g)
    half = min(len(nonzero), max_coords // 2)
    chosen = set(rng.choice(nonzero, size=half, replace=False).tolist()) if half else set()
    rest = [i for i in rng.permutation(size).tolist() if i not in chosen]
    chosen.update(rest[: max_coords - len(chosen)])
    return sorted(chosen)
