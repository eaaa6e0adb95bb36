"""
Dense tensors with reverse-mode automatic differentiation (NumPy backend).

Every differentiable operation returns a new Tensor that remembers its parent
tensors and a backward function mapping the gradient of the output to the
gradients of each parent. `backward` walks that graph in reverse topological
order and accumulates gradients into the `grad` buffers of leaf tensors that
were created with `requires_grad=True`.

Training runs in 32-bit floats; `precision("float64")` switches newly created
tensors to 64-bit, which is what gradient verification uses.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ContractError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_grad_enabled = True


@contextmanager
def precision(name: str):
    """Create tensors in the given float precision inside the block."""
    global _default_dtype
    if name not in _DTYPES:
        raise ContractError(f"Unknown precision '{name}', expected one of {sorted(_DTYPES)}")
    previous = _default_dtype
    _default_dtype = _DTYPES[name]
    try:
        yield
    finally:
        _default_dtype = previous


def get_default_dtype():
    return _default_dtype


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """
    Dense float tensor that can take part in reverse-mode autodiff.

    Args:
        data: Array-like values, stored as a contiguous float ndarray
        requires_grad: Whether gradients should be accumulated into `grad`
        name: Optional label, used in error messages and parameter audits
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(_default_dtype)
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    # ------------------------------------------------------------------
    # basic properties
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False, name=self.name)

    def zero_grad(self):
        """Reset the accumulated gradient."""
        self.grad = None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # operators
    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


# ----------------------------------------------------------------------
# graph plumbing
# ----------------------------------------------------------------------
def _as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or _default_dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(scalar_loss: Tensor):
    """
    Populate gradients of every leaf tensor reachable from `scalar_loss`.

    Gradients accumulate across calls; use `Tensor.zero_grad` (or
    `Module.zero_grad`) to reset them.

    Args:
        scalar_loss: Tensor of shape [] or [1]
    """
    if scalar_loss.shape not in ((), (1,)):
        raise ContractError(f"backward() needs a scalar loss, got shape {list(scalar_loss.shape)}")
    if not scalar_loss.requires_grad:
        return

    grads = {id(scalar_loss): np.ones_like(scalar_loss.data)}
    for node in reversed(_topological_order(scalar_loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# ----------------------------------------------------------------------
# construction
# ----------------------------------------------------------------------
def tensor_create(
    shape: Sequence[int],
    init: str = "zeros",
    values: Optional[ArrayLike] = None,
    mean: float = 0.0,
    std: float = 1.0,
    rng=None,
    requires_grad: bool = False,
    name: Optional[str] = None,
) -> Tensor:
    """
    Create a tensor of the requested shape.

    Args:
        shape: Non-empty list of dimension sizes, each >= 1
        init: One of "zeros", "ones", "normal" or "values"
        values: Explicit values for init="values" (row-major)
        mean, std, rng: Parameters of the normal initializer
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"Shape must be non-empty with all dims >= 1, got {list(shape)}")
    if init == "zeros":
        data = np.zeros(shape, dtype=_default_dtype)
    elif init == "ones":
        data = np.ones(shape, dtype=_default_dtype)
    elif init == "normal":
        if rng is None:
            raise ContractError("normal init needs an Rng")
        data = rng.normal(shape, mean=mean, std=std)
    elif init == "values":
        flat = np.asarray(values, dtype=_default_dtype).reshape(-1)
        if flat.size != math.prod(shape):
            raise ShapeError(f"Got {flat.size} values for shape {list(shape)}")
        data = flat.reshape(shape)
    else:
        raise ContractError(f"Unknown init '{init}'")
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=_default_dtype), requires_grad=requires_grad)


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, _dtype_of(a))
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, _dtype_of(a))
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, _dtype_of(a))
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, _dtype_of(a))
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    return _result(
        a.data ** exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def _dtype_of(value):
    return value.dtype if isinstance(value, Tensor) else None


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _result(out, (a,), backward_fn)


# ----------------------------------------------------------------------
# reductions and reshaping
# ----------------------------------------------------------------------
def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward_fn)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / max(int(count), 1))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing."""
    out = a.data[index]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along `axis`; zero-length pieces are allowed."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat() needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"Cannot concatenate shapes {[list(t.shape) for t in tensors]}: {exc}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product [m,k] @ [k,n] -> [m,n]; leading batch dims follow NumPy
    broadcasting.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {list(a.shape)} @ {list(b.shape)}")
    out = a.data @ b.data

    def backward_fn(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(out, (a, b), backward_fn)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"Axis {axis} is invalid for a rank-{x.ndim} tensor")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Numerically stable softmax along `axis`.

    Args:
        mask: Optional boolean array broadcastable to x; False entries get
            exactly zero weight. A slice with no True entry is rejected.
    """
    axis = _check_axis(x, axis)
    logits = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        if logits.shape[axis] == 0 or not mask.any(axis=axis).all():
            raise ContractError("Every attention row needs at least one unmasked position")
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    weights = np.exp(shifted)
    if mask is not None:
        weights = np.where(mask, weights, 0.0)
    out = weights / weights.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result(out.astype(x.dtype, copy=False), (x,), backward_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def backward_fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize over the last axis, then scale by `gain` and shift by `bias`.

    Rows whose entries are all identical normalize to exactly 0, so they map
    to `bias`.
    """
    features = x.shape[-1] if x.ndim else 0
    if gain.shape != (features,) or bias.shape != (features,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape [{features}], got {list(gain.shape)} and {list(bias.shape)}"
        )
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    centered = data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    flat = (data.max(axis=-1, keepdims=True) == data.min(axis=-1, keepdims=True)) if data.size else np.zeros_like(mu, dtype=bool)
    xhat = np.where(flat, 0.0, centered * rstd).astype(data.dtype, copy=False)
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        dxhat = g * gain.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward_fn)


# ----------------------------------------------------------------------
# lookups and losses
# ----------------------------------------------------------------------
def embedding(table: Tensor, ids: Iterable[int]) -> Tensor:
    """Gather rows of `table`; the gradient scatters back into those rows."""
    index = np.asarray(list(ids), dtype=np.int64)
    out = table.data[index] if index.size else np.zeros((0, table.shape[1]), dtype=table.dtype)

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (table,), backward_fn)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean token cross-entropy of [n, vocab] logits against n target ids."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross_entropy needs [n, vocab] logits for {targets.shape[0]} targets, got {list(logits.shape)}")
    if targets.size == 0:
        raise ContractError("cross_entropy needs at least one target")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(targets.size)
    loss = -log_probs[rows, targets].mean()

    def backward_fn(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (g / targets.size),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn)


def mse_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if prediction.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {list(prediction.shape)} vs {list(target.shape)}")
    diff = prediction - target
    return (diff * diff).mean()
