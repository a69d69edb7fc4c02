"""Dense float tensors recorded on a reverse-mode differentiation tape.

Every differentiable operation appends one node to the active tape at the
moment it runs, so topological order coincides with creation order and
``backward`` can simply walk the node list in reverse.  Gradients accumulate
additively in a fixed sequential order, which makes repeated backward runs
over identical tapes bit-reproducible.

Forward computation runs in 32-bit floats by default.  The engine-wide
``precision`` context switches every subsequently created tensor to another
dtype; gradient checking uses ``precision("float64")``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "accumulate",
    "active_tape",
    "add",
    "backward",
    "concat",
    "crop",
    "current_dtype",
    "custom_op",
    "finite_diff_grad",
    "gather_rows",
    "matmul",
    "mul",
    "no_grad",
    "pad_reflect",
    "precision",
    "reset_tape",
    "reshape",
    "sub",
    "tensor",
    "transpose",
    "zeros_like",
]

_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def current_dtype() -> np.dtype:
    """Dtype used for newly created tensors."""
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the engine-wide tensor dtype.

    ``precision("float64")`` is the 64-bit mode used for finite-difference
    gradient checks; normal forward/training work stays in float32.
    """
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / oracle evals)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """Contiguous row-major float array, optionally tracked for gradients.

    Tensors are treated as immutable after creation; only the ``grad``
    buffer is written to (by ``backward``) and cleared (by the optimizer).
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; scalars are wrapped as constant tensors
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return _sum_all(self)

    def mean(self) -> "Tensor":
        return _mean_all(self)

    def abs(self) -> "Tensor":
        return _abs(self)


class Tape:
    """Ordered record of executed ops; backward walks it newest-first."""

    def __init__(self):
        self.nodes: list[tuple[str, Tensor, Callable[[np.ndarray], None]]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False


_TAPE = Tape()


def active_tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.reset()


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``, allocating the buffer on first use."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def custom_op(
    name: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap a forward result as a tape node.

    ``backward_fn`` receives the output gradient and must route input
    gradients through :func:`accumulate` itself.
    """
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_id = len(_TAPE.nodes)
        _TAPE.nodes.append((name, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Nodes are visited in strict reverse creation order; tensors used more
    than once accumulate their gradients additively.  Raises if the loss is
    not scalar or if the tape was already consumed without a reset.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if _TAPE.consumed:
        raise RuntimeError("tape already consumed; call reset_tape() before another backward")
    _TAPE.consumed = True
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for _name, out, backward_fn in reversed(_TAPE.nodes):
        if out.grad is not None:
            backward_fn(out.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a gradient over the axes a forward op broadcast along."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward_fn(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    return custom_op("add", out_data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward_fn(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(-g, b.data.shape))

    return custom_op("sub", out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward_fn(g):
        accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return custom_op("mul", out_data, (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must match exactly; d(A·B) routes as
    dA = g·Bᵀ and dB = Aᵀ·g.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects rank >= 2 operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: inner dims {a.data.shape} x {b.data.shape} do not agree")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(f"matmul: batch dims {a.data.shape} x {b.data.shape} differ")
    out_data = a.data @ b.data

    def backward_fn(g):
        accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return custom_op("matmul", out_data, (a, b), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")
    old_shape = x.data.shape
    out_data = np.ascontiguousarray(x.data).reshape(shape)

    def backward_fn(g):
        accumulate(x, g.reshape(old_shape))

    return custom_op("reshape", out_data, (x,), backward_fn)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes (defaults to full reversal); backward applies the inverse."""
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    inverse = np.argsort(axes)
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def backward_fn(g):
        accumulate(x, g.transpose(inverse))

    return custom_op("transpose", out_data, (x,), backward_fn)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of an empty list")
    rank = parts[0].ndim
    if not -rank <= axis < rank:
        raise ValueError(f"concat: axis {axis} out of range for rank {rank}")
    axis = axis % rank
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * rank
            sl[axis] = slice(lo, hi)
            accumulate(p, g[tuple(sl)])

    return custom_op("concat", out_data, tuple(parts), backward_fn)


def pad_reflect(x: Tensor, pad: Sequence[tuple[int, int]]) -> Tensor:
    """Reflect-pad per axis; ``pad`` holds one (before, after) pair per axis.

    Implemented as an index gather so the backward pass is an exact
    scatter-add of the output gradient back onto the source positions.
    """
    pad = tuple((int(b), int(a)) for b, a in pad)
    if len(pad) != x.ndim:
        raise ValueError(f"pad_reflect: need {x.ndim} pad pairs, got {len(pad)}")
    data = x.data
    index_per_axis: list[np.ndarray | None] = []
    for axis, (before, after) in enumerate(pad):
        if before < 0 or after < 0:
            raise ValueError("pad_reflect: negative pad")
        if before == 0 and after == 0:
            index_per_axis.append(None)
            continue
        n = data.shape[axis]
        idx = np.pad(np.arange(n), (before, after), mode="reflect")
        data = np.take(data, idx, axis=axis)
        index_per_axis.append(idx)

    original_shape = x.data.shape

    def backward_fn(g):
        for axis in reversed(range(len(pad))):
            idx = index_per_axis[axis]
            if idx is None:
                continue
            reduced_shape = g.shape[:axis] + (original_shape[axis],) + g.shape[axis + 1:]
            reduced = np.zeros(reduced_shape, dtype=g.dtype)
            np.add.at(np.moveaxis(reduced, axis, 0), idx, np.moveaxis(g, axis, 0))
            g = reduced
        accumulate(x, g)

    return custom_op("pad_reflect", data, (x,), backward_fn)


def crop(x: Tensor, bounds: Sequence[tuple[int, int]]) -> Tensor:
    """Slice ``[start, stop)`` per axis; backward pastes into a zero buffer."""
    bounds = tuple((int(b), int(e)) for b, e in bounds)
    if len(bounds) != x.ndim:
        raise ValueError(f"crop: need {x.ndim} bounds, got {len(bounds)}")
    for (start, stop), extent in zip(bounds, x.data.shape):
        if not (0 <= start < stop <= extent):
            raise ValueError(f"crop: bounds {bounds} invalid for shape {x.data.shape}")
    region = tuple(slice(b, e) for b, e in bounds)
    out_data = x.data[region].copy()

    def backward_fn(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[region] += g

    return custom_op("crop", out_data, (x,), backward_fn)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """out[k] = table[index[k]] for a 2-D table; backward scatter-adds rows."""
    if table.ndim != 2:
        raise ValueError("gather_rows expects a 2-D table")
    index = np.asarray(index, dtype=np.int64).ravel()
    out_data = table.data[index]

    def backward_fn(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, index, g)

    return custom_op("gather_rows", out_data, (table,), backward_fn)


def _sum_all(x: Tensor) -> Tensor:
    out_data = x.data.sum()

    def backward_fn(g):
        accumulate(x, g)

    return custom_op("sum", out_data, (x,), backward_fn)


def _mean_all(x: Tensor) -> Tensor:
    count = x.size
    out_data = x.data.mean()

    def backward_fn(g):
        accumulate(x, g / count)

    return custom_op("mean", out_data, (x,), backward_fn)


def _abs(x: Tensor) -> Tensor:
    # |.| uses subgradient 0 at the origin
    out_data = np.abs(x.data)

    def backward_fn(g):
        accumulate(x, g * np.sign(x.data))

    return custom_op("abs", out_data, (x,), backward_fn)


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> Tensor:
    """Central-difference gradient of a scalar function, computed in 64-bit.

    ``f`` must be deterministic; it is evaluated 2·size(x) times on perturbed
    copies of ``x`` with tape recording disabled.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    base = np.asarray(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_grad = grad.reshape(-1)
    with precision(np.float64), no_grad():
        for i in range(flat_base.size):
            bumped = flat_base.copy()
            bumped[i] = flat_base[i] + h
            f_plus = float(f(Tensor(bumped.reshape(base.shape))).data)
            bumped[i] = flat_base[i] - h
            f_minus = float(f(Tensor(bumped.reshape(base.shape))).data)
            flat_grad[i] = (f_plus - f_minus) / (2.0 * h)
    with precision(np.float64):
        return Tensor(grad)
