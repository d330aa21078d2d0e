"""
Dense tensors with define-by-run reverse-mode differentiation.

Arrays are numpy arrays. Every differentiable operation is a `Function` whose
`apply` runs the forward pass and, while a `GradientTape` is active and some
input requires a gradient, appends itself to the tape. `GradientTape.backward`
replays the record in exact reverse execution order and accumulates adjoints.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import DEBUG_FINITE, DEFAULT_DTYPE
from .logger import logger

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GradientTapeError(RuntimeError):
    pass


class DetachedGraphError(GradientTapeError):
    pass


class NonDeterministicFunctionError(ValueError):
    pass


def _settings() -> threading.local:
    if not hasattr(_state, "dtype"):
        _state.dtype = np.dtype(DEFAULT_DTYPE)
        _state.debug = DEBUG_FINITE
        _state.tapes = []
    return _state


def get_default_dtype() -> np.dtype:
    return _settings().dtype


@contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    """Temporarily change the dtype used for tensors built from Python data."""
    state = _settings()
    previous = state.dtype
    state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        state.dtype = previous


@contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Flag any op output holding NaN/Inf with a NonFiniteError."""
    state = _settings()
    previous = state.debug
    state.debug = enabled
    try:
        yield
    finally:
        state.debug = previous


def active_tape() -> Optional["GradientTape"]:
    tapes = _settings().tapes
    return tapes[-1] if tapes else None


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added so `grad` matches `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis: Union[None, int, Sequence[int]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"Invalid axis {a} for tensor with {ndim} dimensions")
        normalized.append(a % ndim)
    return tuple(normalized)


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Any = None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            array = np.array(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
            array = np.asarray(data)
        else:
            array = np.array(data, dtype=get_default_dtype())
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Function] = None
        self._tape: Optional[GradientTape] = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise DetachedGraphError("Tensor was not produced on a gradient tape")
        self._tape.backward(self)

    def _lift(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, self._lift(other))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(self._lift(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other: Any) -> "Tensor":
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other: Any) -> "Tensor":
        return Div.apply(self, self._lift(other))

    def __rtruediv__(self, other: Any) -> "Tensor":
        return Div.apply(self._lift(other), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("Only scalar exponents are supported")
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def sqrt(self) -> "Tensor":
        return Pow.apply(self, exponent=0.5)

    def sum(self, axis: Union[None, int, Sequence[int]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Union[None, int, Sequence[int]] = None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(tuple(axes))


class Function:
    """Base class of a recorded operation: forward on arrays, adjoints on arrays."""

    stochastic = False

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.output: Optional[Tensor] = None

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        func = cls(*inputs)
        out_data = func.forward(*(t.data for t in inputs), **kwargs)
        if _settings().debug and not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        out = Tensor(out_data)
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._node = func
            out._tape = tape
            func.output = out
            tape.record(func)
        return out


class GradientTape:
    """Ordered record of executed operations; one tape per forward pass."""

    def __init__(self):
        self.nodes: List[Function] = []
        self.stochastic = False
        self._leaves: Dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        _settings().tapes.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _settings().tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Function) -> None:
        self.nodes.append(node)
        if node.stochastic:
            self.stochastic = True
        for t in node.inputs:
            if t.requires_grad and t._node is None:
                self._leaves.setdefault(id(t), t)

    def reset(self) -> None:
        self.nodes.clear()
        self._leaves.clear()
        self.stochastic = False
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise GradientTapeError("Gradient tape is empty")
        if self._consumed:
            raise GradientTapeError("backward already ran on this tape; call reset() and record a new pass")
        if loss._node is None or loss._tape is not self:
            raise DetachedGraphError("Loss is not connected to this tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        reached = set()
        for node in reversed(self.nodes):
            grad = grads.pop(id(node.output), None)
            if grad is None:
                continue
            for inp, g in zip(node.inputs, node.backward(grad)):
                if g is None or not inp.requires_grad:
                    continue
                if inp._node is not None:
                    if inp._tape is not self:
                        continue
                    key = id(inp)
                    grads[key] = grads[key] + g if key in grads else g
                else:
                    g = g.astype(inp.dtype, copy=False)
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g
                    reached.add(id(inp))

        for key, leaf in self._leaves.items():
            if key not in reached and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        self._consumed = True


# ---------------------------------------------------------------- elementwise


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        return (
            unbroadcast(grad / b.data, a.shape),
            unbroadcast(-grad * a.data / (b.data * b.data), b.shape),
        )


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a, exponent):
        self.exponent = exponent
        return np.power(a, exponent)

    def backward(self, grad):
        (a,) = self.inputs
        return (grad * self.exponent * np.power(a.data, self.exponent - 1),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, grad):
        return (grad / self.inputs[0].data,)


class Abs(Function):
    # np.sign(0) == 0 gives the zero subgradient at the kink
    def forward(self, a):
        return np.abs(a)

    def backward(self, grad):
        return (grad * np.sign(self.inputs[0].data),)


_GELU_C = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    """tanh approximation"""

    def forward(self, a):
        self.t = np.tanh(_GELU_C * (a + 0.044715 * a ** 3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad):
        a = self.inputs[0].data
        t = self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * dt),)


# ---------------------------------------------------------------- reductions / layout


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        shape = self.inputs[0].shape
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        try:
            return a.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"Cannot reshape {a.shape} into {shape}") from e

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"Invalid permutation {axes} for tensor with {a.ndim} dimensions")
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.index = index
        return np.array(a[index])

    def backward(self, grad):
        full = np.zeros_like(self.inputs[0].data)
        parts = self.index if isinstance(self.index, tuple) else (self.index,)
        if all(p is None or p is Ellipsis or isinstance(p, (int, slice)) for p in parts):
            full[self.index] = grad
        else:
            np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis):
        ndim = arrays[0].ndim
        (self.axis,) = _normalize_axes(axis, ndim)
        for arr in arrays[1:]:
            if arr.ndim != ndim or any(
                arr.shape[d] != arrays[0].shape[d] for d in range(ndim) if d != self.axis
            ):
                shapes = ", ".join(str(x.shape) for x in arrays)
                raise ShapeError(f"concat along axis {axis} needs matching extents, got {shapes}")
        self.splits = np.cumsum([arr.shape[self.axis] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        try:
            return np.matmul(a, b)
        except ValueError as e:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from e

    def backward(self, grad):
        a, b = self.inputs
        da = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return unbroadcast(da, a.shape), unbroadcast(db, b.shape)


# ---------------------------------------------------------------- fused layers


class Softmax(Function):
    def forward(self, a, axis):
        (self.axis,) = _normalize_axes(axis, a.ndim)
        shifted = a - np.max(a, axis=self.axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=self.axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - np.sum(grad * y, axis=self.axis, keepdims=True)),)


class LayerNorm(Function):
    def forward(self, x, gain, bias, eps):
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        return self.xhat * gain + bias

    def backward(self, grad):
        x, gain, bias = self.inputs
        n = x.shape[-1]
        dxhat = grad * gain.data
        dx = (self.inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).sum(axis=-1, keepdims=True)
        )
        return dx, unbroadcast(grad * self.xhat, gain.shape), unbroadcast(grad, bias.shape)


class Dropout(Function):
    stochastic = True

    def forward(self, a, rate, rng):
        keep = 1.0 - rate
        self.mask = (rng.random(a.shape) < keep).astype(a.dtype) / keep
        return a * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


# ---------------------------------------------------------------- functional API


def tensor(data: ArrayLike, requires_grad: bool = False, dtype: Any = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def add(a: Tensor, b: Any) -> Tensor:
    return a + b


def sub(a: Tensor, b: Any) -> Tensor:
    return a - b


def mul(a: Tensor, b: Any) -> Tensor:
    return a * b


def scale(a: Tensor, factor: float) -> Tensor:
    return a * factor


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    return LayerNorm.apply(x, gain, bias, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; the identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    tape = active_tape()
    if tape is not None:
        tape.stochastic = True
    return Dropout.apply(x, rate=rate, rng=rng)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    ndim = tensors[0].ndim + 1
    (pos,) = _normalize_axes(axis, ndim)
    expanded = [t.reshape(t.shape[:pos] + (1,) + t.shape[pos:]) for t in tensors]
    return concat(expanded, axis=pos)


def mean(x: Tensor, axis: Union[None, int, Sequence[int]] = None, keepdims: bool = False) -> Tensor:
    return x.mean(axis=axis, keepdims=keepdims)


def backward(loss: Tensor) -> None:
    loss.backward()


# ---------------------------------------------------------------- gradient checking


class GradCheckReport:
    def __init__(self, max_rel_error: float, tol: float, analytic: np.ndarray, numeric: np.ndarray):
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.analytic = analytic
        self.numeric = numeric

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __repr__(self) -> str:
        status = "pass" if self.passed else "fail"
        return f"GradCheckReport({status}, max_rel_error={self.max_rel_error:.3e}, tol={self.tol:.1e})"


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _scalar_value(out: Tensor) -> float:
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def _check_step(step: float) -> None:
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"finite-difference step must be in [1e-6, 1e-3], got {step}")


def _tape_gradient(f: Callable[[], Tensor], leaves: Sequence[Tensor]) -> List[np.ndarray]:
    for leaf in leaves:
        leaf.zero_grad()
    with GradientTape() as tape:
        out = f()
    _scalar_value(out)
    if tape.stochastic:
        raise NonDeterministicFunctionError("Function uses training-mode dropout; gradients are not reproducible")
    if not tape.nodes:
        return [np.zeros_like(leaf.data) for leaf in leaves]
    tape.backward(out)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def _central_difference(f: Callable[[], Tensor], leaf: Tensor, step: float,
                        indices: Optional[np.ndarray] = None) -> np.ndarray:
    original = leaf.data
    work = original.astype(np.float64, copy=True)
    leaf.data = work
    numeric = np.zeros(original.shape, dtype=np.float64)
    flat_work = work.reshape(-1)
    flat_numeric = numeric.reshape(-1)
    positions = range(work.size) if indices is None else indices
    try:
        for i in positions:
            saved = flat_work[i]
            flat_work[i] = saved + step
            plus = _scalar_value(f())
            flat_work[i] = saved - step
            minus = _scalar_value(f())
            flat_work[i] = saved
            flat_numeric[i] = (plus - minus) / (2.0 * step)
    finally:
        leaf.data = original
    return numeric


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-4, tol: float = 1e-5) -> GradCheckReport:
    """
    Compare tape gradients of a scalar function against central differences.

    The finite-difference oracle always runs in 64-bit so the comparison
    measures the tape gradient, not float32 cancellation.
    """
    _check_step(step)
    leaf = Tensor(x.data.copy(), requires_grad=True)
    (analytic,) = _tape_gradient(lambda: f(leaf), [leaf])
    numeric = _central_difference(lambda: f(leaf), leaf, step)
    report = GradCheckReport(_relative_error(analytic.astype(np.float64), numeric), tol, analytic, numeric)
    logger.debug(f"grad_check {report}")
    return report


def grad_check_parameters(loss_fn: Callable[[], Tensor], parameters: Dict[str, Tensor], step: float = 1e-5,
                          tol: float = 1e-3, max_entries: Optional[int] = None,
                          seed: int = 0) -> Dict[str, GradCheckReport]:
    """
    Run the central-difference oracle over every named parameter of a model.

    `max_entries` samples that many entries per tensor (fixed seed) to bound
    the number of forward passes; None checks every entry.
    """
    _check_step(step)
    names = list(parameters)
    leaves = [parameters[n] for n in names]
    analytic = _tape_gradient(loss_fn, leaves)
    rng = np.random.default_rng(seed)
    reports: Dict[str, GradCheckReport] = {}
    for name, leaf, grad in zip(names, leaves, analytic):
        indices = None
        if max_entries is not None and leaf.size > max_entries:
            indices = np.sort(rng.choice(leaf.size, size=max_entries, replace=False))
        numeric = _central_difference(loss_fn, leaf, step, indices)
        flat_a = grad.astype(np.float64).reshape(-1)
        flat_n = numeric.reshape(-1)
        if indices is not None:
            flat_a, flat_n = flat_a[indices], flat_n[indices]
        reports[name] = GradCheckReport(_relative_error(flat_a, flat_n), tol, flat_a, flat_n)
    worst = max((r.max_rel_error for r in reports.values()), default=0.0)
    logger.info(f"Parameter gradient check finished", extra={"tensors": len(reports), "max_rel_error": worst})
    return reports
