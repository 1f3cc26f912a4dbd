# File: geosurge/autodiff.py
"""
Dense tensors with reverse-mode gradients.

Primitives run eagerly on numpy arrays. While a :class:`Tape` is active
(``with Tape() as tape:``) every primitive that touches a gradient-carrying
input appends a node holding its backward closure; :func:`backward` walks the
tape in reverse, which is a valid topological order because nodes are
appended in execution order. Outside a tape nothing is recorded, which is how
evaluation runs.

All primitives treat the last axis as the "row" axis and accept any number
of leading batch axes; gradients are reduced back to operand shapes.
"""
from __future__ import annotations

import logging
import math
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import GeoSurgeError, NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("geosurge_active_tape", default=None)


class Tensor:
    """A dense row-major array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, ())
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f"{self.name}, " if self.name else ""
        return f"Tensor({tag}shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return elementwise_mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Param:
    """
    A learnable tensor with a name and a gradient buffer of the same shape.

    ``value`` is the leaf :class:`Tensor` fed to primitives; its ``data`` is
    updated in place by the optimizer. ``decay`` opts the param out of weight decay.
    """

    def __init__(self, name: str, data, dtype=np.float32, decay: bool = True):
        self.name = name
        self.decay = decay
        self.value = Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value.data)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.data.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value.data)

    def __repr__(self):
        return f"Param({self.name}, shape={self.shape})"


@dataclass
class _Node:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.nodes: List[_Node] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self._consumed = False


TensorLike = Union[Tensor, Param, np.ndarray, float, int]


def _as_tensor(x: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Param):
        return x.value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a: TensorLike, b: TensorLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, (Tensor, Param)):
        a = _as_tensor(a)
        return a, _as_tensor(b, like=a)
    b = _as_tensor(b)
    return _as_tensor(a, like=b), b


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _emit(op: str, out: np.ndarray, inputs: Tuple[Tensor, ...],
          grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    _check_finite(op, out)
    result = Tensor(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.nodes.append(_Node(op, result, inputs, grad_fn))
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -----------------------------------------------------------------------------
# Elementwise and linear primitives
# -----------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), grad_fn)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), grad_fn)


def elementwise_mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("elementwise_mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("elementwise_mul", a.data * b.data, (a, b), grad_fn)


def scale(a: TensorLike, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def exp(a: TensorLike) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", out, (a, b), grad_fn)


def transpose(a: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape)
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = np.array(np.broadcast_to(a.data, tuple(shape)))
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from None
    return _emit("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def sum(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), grad_fn)


def mean(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat_rows(tensors: Sequence[TensorLike], axis: int = -2) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_rows")
    ref = ts[0]
    ax = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != ax):
            raise ShapeError("concat_rows", ref.shape, t.shape)
    out = np.concatenate([t.data for t in ts], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _emit("concat_rows", out, tuple(ts), grad_fn)


def slice_rows(a: TensorLike, start: int, stop: int, axis: int = -2) -> Tensor:
    a = _as_tensor(a)
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError("slice_rows", a.shape, (start, stop))
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit("slice_rows", a.data[index].copy(), (a,), grad_fn)


def gather_rows(table: TensorLike, indices) -> Tensor:
    """Rows of a 2-D table; output shape is ``indices.shape + (cols,)``."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("gather_rows", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise GeoSurgeError(f"gather_rows: index out of range for table with {table.shape[0]} rows")

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit("gather_rows", table.data[idx], (table,), grad_fn)


# -----------------------------------------------------------------------------
# Nonlinear row primitives
# -----------------------------------------------------------------------------

def layer_norm(x: TensorLike, gamma: TensorLike, beta: TensorLike, eps: float = LN_EPS) -> Tensor:
    """
    Normalize the last axis, then apply the affine (gamma, beta).

    A zero-variance row normalizes to zeros (eps keeps the scale finite), so
    its output is ``beta``.
    """
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, like=x)
    beta = _as_tensor(beta, like=x)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", out, (x, gamma, beta), grad_fn)


def _masked_softmax(x: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        neg = np.where(mask, x, -np.inf)
        z = neg - neg.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, z, 0.0)), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _check_mask(op: str, x: Tensor, mask) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(op, x.shape, mask.shape)
    if not mask.any(axis=-1).all():
        raise GeoSurgeError(f"{op}: every row needs at least one unmasked entry")
    return mask


def softmax_rows(x: TensorLike, mask=None) -> Tensor:
    x = _as_tensor(x)
    mask = _check_mask("softmax_rows", x, mask)
    s = _masked_softmax(x.data, mask)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", s, (x,), grad_fn)


def log_sum_exp_rows(x: TensorLike, mask=None) -> Tensor:
    """log Σ exp over the last axis (masked entries excluded); drops that axis."""
    x = _as_tensor(x)
    mask = _check_mask("log_sum_exp_rows", x, mask)
    if mask is None:
        m = x.data.max(axis=-1, keepdims=True)
        total = np.exp(x.data - m).sum(axis=-1, keepdims=True)
    else:
        m = np.where(mask, x.data, -np.inf).max(axis=-1, keepdims=True)
        total = np.where(mask, np.exp(np.where(mask, x.data - m, 0.0)), 0.0).sum(axis=-1, keepdims=True)
    out = (m + np.log(total))[..., 0]

    def grad_fn(g):
        return (g[..., None] * _masked_softmax(x.data, mask),)

    return _emit("log_sum_exp_rows", out, (x,), grad_fn)


def gelu(x: TensorLike) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd ** 3))
    out = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _emit("gelu", out, (x,), grad_fn)


def relu(x: TensorLike) -> Tensor:
    x = _as_tensor(x)
    on = x.data > 0
    return _emit("relu", np.where(on, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * on,))


def l2_normalize_rows(x: TensorLike, eps: float = 1e-12) -> Tensor:
    x = _as_tensor(x)
    n = np.maximum(np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True)), eps)
    y = x.data / n

    def grad_fn(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _emit("l2_normalize_rows", y, (x,), grad_fn)


ACTIVATIONS = {"gelu": gelu, "relu": relu}


# -----------------------------------------------------------------------------
# Reverse pass and gradient checking
# -----------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: Optional[Iterable[Param]] = None) -> None:
    """
    Accumulate d(loss)/d(param) into ``param.grad`` for every param given.

    Params the loss does not reach get a zero gradient. A tape can be walked
    once; call :meth:`Tape.reset` before reusing it.
    """
    if tape._consumed:
        raise TapeError("backward already ran on this tape; reset it first")
    if not tape.nodes:
        raise TapeError("tape is empty; run the forward pass inside 'with Tape()'")
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, ())
    tape._consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi

    if params is not None:
        for p in params:
            g = grads.get(id(p.value))
            p.grad = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype).reshape(p.shape)


def grad_check(f: Callable[[], Tensor], params: Sequence[Param], step: float = 1e-5,
               sample: Optional[int] = None, seed: int = 0, floor: float = 1e-3) -> float:
    """
    Largest relative error between reverse-mode and central-difference gradients.

    ``f`` re-evaluates the scalar program from the params' current values.
    The error per element is |a - n| / max(|a|, |n|, floor). ``sample``
    limits the check to that many random elements per param.
    """
    if not 1e-7 <= step <= 1e-4:
        raise GeoSurgeError(f"grad_check step {step} outside [1e-7, 1e-4]")
    for p in params:
        if p.data.dtype != np.float64:
            raise GeoSurgeError(f"grad_check needs float64 params; {p.name} is {p.data.dtype}")

    with Tape() as tape:
        loss = f()
    backward(tape, loss, params)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        if sample is not None and sample < flat.size:
            positions = np.sort(rng.choice(flat.size, size=sample, replace=False))
        else:
            positions = range(flat.size)
        for k in positions:
            orig = flat[k]
            flat[k] = orig + step
            f_plus = f().item()
            flat[k] = orig - step
            f_minus = f().item()
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(ga.reshape(-1)[k])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst:
                worst = err
    logger.debug("grad_check over %d params: max relative error %.3e", len(params), worst)
    return worst
