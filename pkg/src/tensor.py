"""Dense tensors on numpy with a reverse-mode tape.

Every operation returns a new Tensor; when gradient tracking is on and any
input participates in the tape, the output carries a TapeNode whose backward
closure maps the output gradient to one gradient per input.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes or a 0-d operand, matmul accepts one shared 2-D operand, and
layer_norm applies a trailing-axis affine. Everything else is explicit
(`repeat`, `reshape`, `permute`).
"""
from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Literal, Mapping, Sequence

import numpy as np

from src.errors import (
    ContractError,
    DegenerateRowError,
    DimensionError,
    InputError,
    NumericDomainError,
    NumericError,
)

logger = logging.getLogger(__name__)

UnaryKind = Literal["exp", "log", "tanh", "sigmoid", "neg", "square", "sqrt", "elu_plus_one"]
ReduceKind = Literal["sum", "mean", "max"]
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float64))


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Set the dtype new tensors get on the current thread (float64 or float32)."""
    previous = get_default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward: BackwardFn
    saved: dict = field(default_factory=dict)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data: np.ndarray = np.array(data, dtype=dtype or get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node: TapeNode | None = None

    @classmethod
    def from_op(
        cls,
        op: str,
        data: np.ndarray,
        inputs: Sequence["Tensor"],
        backward: BackwardFn,
        saved: dict | None = None,
    ) -> "Tensor":
        """Wrap an op result, recording it on the tape when any input is tracked."""
        data = np.asarray(data)
        if not np.all(np.isfinite(data)):
            raise NumericError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        out.node = TapeNode(op, tuple(inputs), backward, saved or {}) if out.requires_grad else None
        return out

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{nm})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def mT(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_operand(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_operand(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_operand(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_operand(other, self), self)

    def __neg__(self):
        return map_unary(self, "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce(self, axis, "sum")

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce(self, axis, "mean")

    def max(self, axis: int | None = None) -> "Tensor":
        return reduce(self, axis, "max")

    def exp(self) -> "Tensor":
        return map_unary(self, "exp")

    def log(self) -> "Tensor":
        return map_unary(self, "log")

    def tanh(self) -> "Tensor":
        return map_unary(self, "tanh")

    def sigmoid(self) -> "Tensor":
        return map_unary(self, "sigmoid")

    def sqrt(self) -> "Tensor":
        return map_unary(self, "sqrt")

    def square(self) -> "Tensor":
        return map_unary(self, "square")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        return permute(self, axes)


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return Tensor(x, dtype=like.dtype)
    if isinstance(x, np.ndarray):
        return Tensor(x, dtype=like.dtype)
    raise ContractError(f"unsupported operand type {type(x).__name__}")


def const(values, shape: tuple[int, ...] | None = None, dtype=None) -> Tensor:
    """Untracked tensor, optionally expanded to `shape` (a constant, not a tape op)."""
    arr = np.asarray(values, dtype=dtype or get_default_dtype())
    if shape is not None:
        arr = np.broadcast_to(arr, shape)
    return Tensor(arr, dtype=arr.dtype)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary(op: str, a, b, fwd, grads) -> Tensor:
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
    out = fwd(a.data, b.data)

    def backward(g):
        ga, gb = grads(g, a.data, b.data, out)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return Tensor.from_op(op, out, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y, o: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y, o: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y, o: (g * y, g * x))


def div(a, b) -> Tensor:
    return _binary("div", a, b, np.divide, lambda g, x, y, o: (g / y, -g * o / y))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match or one side is 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a and lead_b and lead_a != lead_b:
        raise DimensionError(f"matmul leading extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if not lead_a and ga.ndim > 2:
            ga = ga.reshape(-1, *a.shape).sum(axis=0)
        if not lead_b and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return Tensor.from_op("matmul", out, (a, b), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def map_unary(x: Tensor, kind: UnaryKind) -> Tensor:
    d = x.data
    if kind == "exp":
        y = np.exp(d)
        grad = lambda g: g * y
    elif kind == "log":
        if np.any(d <= 0):
            raise NumericDomainError("log of a non-positive value")
        y = np.log(d)
        grad = lambda g: g / d
    elif kind == "tanh":
        y = np.tanh(d)
        grad = lambda g: g * (1.0 - y * y)
    elif kind == "sigmoid":
        y = _sigmoid(d)
        grad = lambda g: g * y * (1.0 - y)
    elif kind == "neg":
        y = -d
        grad = lambda g: -g
    elif kind == "square":
        y = d * d
        grad = lambda g: 2.0 * d * g
    elif kind == "sqrt":
        if np.any(d < 0):
            raise NumericDomainError("sqrt of a negative value")
        y = np.sqrt(d)
        grad = lambda g: np.where(y > 0, 0.5 * g / np.where(y > 0, y, 1.0), 0.0)
    elif kind == "elu_plus_one":
        pos = d > 0
        ex = np.exp(np.minimum(d, 0.0))
        y = np.where(pos, d + 1.0, ex)
        grad = lambda g: g * np.where(pos, 1.0, ex)
    else:
        raise ContractError(f"unknown unary kind {kind!r}")
    return Tensor.from_op(kind, y, (x,), lambda g: (grad(g),))


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def _max_indices(x: Tensor, axis: int | None) -> tuple[np.ndarray, np.ndarray]:
    if x.size == 0 or (axis is not None and x.shape[axis] == 0):
        raise DimensionError(f"max over an empty axis of shape {x.shape}")
    if axis is None:
        idx = np.asarray(np.argmax(x.data))
        return x.data.reshape(-1)[idx], idx
    idx = np.argmax(x.data, axis=axis)
    return np.take_along_axis(x.data, np.expand_dims(idx, axis), axis).squeeze(axis), idx


def reduce(x: Tensor, axis: int | None = None, kind: ReduceKind = "sum") -> Tensor:
    """Sum, mean or max along `axis` (all axes when None); the axis is dropped."""
    if axis is not None:
        axis = _check_axis(x, axis)
    count = x.size if axis is None else x.shape[axis]

    def expand(g):
        if axis is None:
            return np.broadcast_to(g, x.shape)
        return np.broadcast_to(np.expand_dims(g, axis), x.shape)

    if kind == "sum":
        out = x.data.sum(axis=axis)
        return Tensor.from_op("sum", out, (x,), lambda g: (np.array(expand(g)),))
    if kind == "mean":
        if count == 0:
            raise DimensionError(f"mean over an empty axis of shape {x.shape}")
        out = x.data.mean(axis=axis)
        return Tensor.from_op("mean", out, (x,), lambda g: (np.array(expand(g)) / count,))
    if kind == "max":
        out, idx = _max_indices(x, axis)

        def backward(g):
            hot = np.zeros_like(x.data)
            if axis is None:
                hot.reshape(-1)[idx] = 1.0
            else:
                np.put_along_axis(hot, np.expand_dims(idx, axis), 1.0, axis)
            return (hot * expand(g),)

        return Tensor.from_op("max", out, (x,), backward, saved={"argmax": idx})
    raise ContractError(f"unknown reduce kind {kind!r}")


def max_with_indices(x: Tensor, axis: int | None = None) -> tuple[Tensor, np.ndarray]:
    out = reduce(x, axis, "max")
    if out.node is not None:
        return out, out.node.saved["argmax"]
    return out, _max_indices(x, None if axis is None else _check_axis(x, axis))[1]


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    """Inclusive prefix sum along `axis`."""
    axis = _check_axis(x, axis)
    out = np.cumsum(x.data, axis=axis)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return Tensor.from_op("cumsum", out, (x,), backward)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax over the last axis; masked entries get weight exactly 0.

    `mask` is a constant boolean array matching the trailing axes of `x`
    (e.g. one N x N causal pattern shared by every batch and head).
    """
    if x.ndim < 1 or x.shape[-1] == 0:
        raise DegenerateRowError(f"softmax over empty rows, shape {x.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim > x.ndim or mask.shape != x.shape[x.ndim - mask.ndim:]:
            raise DimensionError(f"mask shape {mask.shape} does not match {x.shape}")
        full = np.broadcast_to(mask, x.shape)
        if not np.all(full.any(axis=-1)):
            raise DegenerateRowError("softmax row with every entry masked")
        z = np.where(full, x.data, -np.inf)
    else:
        z = x.data
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op("softmax_rows", y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply `gain` and `bias`."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match {d}")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).reshape(-1, d).sum(axis=0), g.reshape(-1, d).sum(axis=0)

    return Tensor.from_op("layer_norm", out, (x, gain, bias), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return Tensor.from_op("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    a1, a2 = _check_axis(x, a1), _check_axis(x, a2)
    out = np.swapaxes(x.data, a1, a2)
    return Tensor.from_op("swapaxes", out, (x,), lambda g: (np.swapaxes(g, a1, a2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {x.shape}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    out = np.transpose(x.data, axes)
    return Tensor.from_op("permute", out, (x,), lambda g: (np.transpose(g, inverse),))


def _basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _basic_index(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op("getitem", np.array(out), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty sequence")
    axis = _check_axis(tensors[0], axis)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor.from_op("concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def repeat(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at `axis` (output coordinates) holding `n` copies of `x`."""
    if not -(x.ndim + 1) <= axis <= x.ndim:
        raise DimensionError(f"repeat axis {axis} out of range for shape {x.shape}")
    axis = axis % (x.ndim + 1)
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return Tensor.from_op("repeat", out, (x,), lambda g: (g.sum(axis=axis),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` (V x d) for integer `ids` of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"token ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor.from_op("embedding", out, (table,), backward)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    out = np.maximum(x.data, floor)
    return Tensor.from_op("clamp_min", out, (x,), lambda g: (g * (x.data > floor),))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in reversed(t.node.inputs):
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `.grad` of every tracked leaf reachable from the scalar `loss`.

    Leaf gradients are overwritten, not accumulated, so repeating a backward
    pass over the same tape yields identical gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topological_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = np.array(g, dtype=t.dtype).reshape(t.shape)
            continue
        for inp, ig in zip(t.node.inputs, t.node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = ig if key not in grads else grads[key] + ig


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based 64-bit generator (Philox) for all library randomness."""
    return np.random.Generator(np.random.Philox(seed))


def randn(shape, rng: np.random.Generator, std: float = 1.0, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=requires_grad, name=name)


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def _central_differences(loss_fn: Callable[[], Tensor], x: Tensor, h: float, coords: np.ndarray) -> np.ndarray:
    flat = x.data.reshape(-1)
    numeric = np.zeros(coords.shape[0], dtype=np.float64)
    with no_grad():
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn().item()
            flat[i] = orig - h
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric[n] = (f_plus - f_minus) / (2.0 * h)
    return numeric


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare the tape gradient of scalar `f` at `x` with central differences.

    The error is the largest absolute coordinate difference divided by the
    largest gradient magnitude of either estimate.
    """
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    coords = np.arange(x.size)
    numeric = _central_differences(lambda: f(x), x, h, coords).reshape(x.shape)
    err = _relative_error(analytic, numeric)
    return GradCheckReport(err, err <= tol, analytic, numeric)


def finite_diff_check_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, GradCheckReport]:
    """Per-parameter gradient check of a closure over many tensors.

    With `max_coords`, each parameter is perturbed at that many randomly chosen
    coordinates instead of all of them.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    rng = make_rng(seed)
    reports = {}
    for name, p in params.items():
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        numeric = _central_differences(loss_fn, p, h, coords)
        err = _relative_error(analytic[coords], numeric)
        reports[name] = GradCheckReport(err, err <= tol, analytic[coords].copy(), numeric)
        logger.debug(f"grad check {name}: rel err {err:.3e}")
    return reports
