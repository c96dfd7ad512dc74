"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable computation in the package is composed from the primitives in
this module. Operations executed while a :class:`Tape` is active (and with at least
one input that requires a gradient) are recorded on that tape; :func:`backward`
replays the tape in reverse.

Example:
    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(loss, tape)
    >>> x.grad
    array([6.])
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", np.ndarray, float, int]

LAYER_NORM_EPS = 1e-5

_state = threading.local()


class Tensor:
    """Dense n-dimensional float64 value with an optional gradient."""

    # Make ndarray (op) Tensor dispatch to the Tensor reflected operators.
    __array_priority__ = 100.0

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None, copy: bool = True) -> None:
        """Create a tensor.

        Args:
            data: Array-like payload, converted to float64
            requires_grad: Whether gradients should be accumulated into this tensor
            name: Optional label used in diagnostics
            copy: Copy the payload (internal ops pass False for fresh arrays)

        Raises:
            NonFiniteError: If the payload contains NaN or Inf
        """
        array = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            label = f"Tensor {name!r}" if name else "Tensor"
            raise NonFiniteError(f"{label} contains non-finite values", op_name=name)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._record: Optional["OpRecord"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        """Dimension sizes."""
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        """True if the tensor was not produced by a recorded operation."""
        return self._record is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a copy of the payload."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Return a constant copy outside any tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes)


@dataclass
class OpRecord:
    """One recorded operation: its inputs, its output and the rule mapping output grad to input grads."""

    name: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    rule: BackwardRule
    tape: "Tape"
    index: int


class Tape:
    """Ordered record of differentiable operations.

    A tape is single-writer: one training step owns one tape. Entering the tape as a
    context manager makes it the active recorder for the current thread.
    """

    def __init__(self) -> None:
        self._records: List[OpRecord] = []

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> Tuple[OpRecord, ...]:
        return tuple(self._records)

    def record(self, name: str, inputs: Tuple[Tensor, ...], output: Tensor, rule: BackwardRule) -> OpRecord:
        entry = OpRecord(name=name, inputs=inputs, output=output, rule=rule, tape=self, index=len(self._records))
        self._records.append(entry)
        return entry

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        _stack().pop()


def _stack() -> List[Optional[Tape]]:
    stack: Optional[List[Optional[Tape]]] = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def current_tape() -> Optional[Tape]:
    """Return the active tape of this thread, or None when recording is off."""
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording for the enclosed block."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def as_tensor(value: Operand) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def apply_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    """Create the output of an operation and record it on the active tape.

    Args:
        name: Operation name, reported in diagnostics and gradient checks
        data: Forward result
        inputs: Operand tensors, in the order the rule returns their gradients
        rule: Maps the output gradient to one gradient (or None) per input

    Raises:
        NonFiniteError: If the forward result contains NaN or Inf
    """
    array = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        logger.error(f"Operation {name} produced non-finite values")
        raise NonFiniteError(f"{name} produced non-finite values", op_name=name)
    out = Tensor(array, copy=False)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._record = tape.record(name, tuple(inputs), out, rule)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` of every requires-grad leaf recorded on ``tape``.

    Leaves reachable on the tape but independent of ``loss`` receive zero gradients.
    Repeated calls without resetting accumulate into the leaves.

    Raises:
        ShapeError: If ``loss`` is not a single-element tensor
        TapeError: If ``loss`` was not produced on ``tape``
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    origin = loss._record
    if origin is None or origin.tape is not tape:
        raise TapeError("Loss tensor was not recorded on the given tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for entry in reversed(tape.records[: origin.index + 1]):
        for tensor in entry.inputs:
            if tensor.requires_grad and tensor.is_leaf:
                leaves[id(tensor)] = tensor
        grad_out = grads.pop(id(entry.output), None)
        if grad_out is None:
            continue
        for tensor, grad_in in zip(entry.inputs, entry.rule(grad_out)):
            if grad_in is None or not tensor.requires_grad:
                continue
            if grad_in.shape != tensor.data.shape:
                raise ShapeError(f"{entry.name} backward produced {grad_in.shape}, expected {tensor.shape}")
            key = id(tensor)
            grads[key] = grads[key] + grad_in if key in grads else grad_in

    for key, leaf in leaves.items():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        if key in grads:
            leaf.grad += grads[key]


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic


def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    return apply_op(
        "add",
        ta.data + tb.data,
        (ta, tb),
        lambda g: (unbroadcast(g, ta.shape), unbroadcast(g, tb.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    return apply_op(
        "sub",
        ta.data - tb.data,
        (ta, tb),
        lambda g: (unbroadcast(g, ta.shape), unbroadcast(-g, tb.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    return apply_op(
        "mul",
        ta.data * tb.data,
        (ta, tb),
        lambda g: (unbroadcast(g * tb.data, ta.shape), unbroadcast(g * ta.data, tb.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    if np.any(tb.data == 0.0):
        raise NonFiniteError("div by zero", op_name="div")
    return apply_op(
        "div",
        ta.data / tb.data,
        (ta, tb),
        lambda g: (
            unbroadcast(g / tb.data, ta.shape),
            unbroadcast(-g * ta.data / (tb.data * tb.data), tb.shape),
        ),
    )


def neg(x: Operand) -> Tensor:
    tx = as_tensor(x)
    return apply_op("neg", -tx.data, (tx,), lambda g: (-g,))


def exp(x: Operand) -> Tensor:
    tx = as_tensor(x)
    out = np.exp(tx.data)
    return apply_op("exp", out, (tx,), lambda g: (g * out,))


def log(x: Operand) -> Tensor:
    tx = as_tensor(x)
    if np.any(tx.data <= 0.0):
        raise NonFiniteError("log of a non-positive value", op_name="log")
    return apply_op("log", np.log(tx.data), (tx,), lambda g: (g / tx.data,))


def sqrt(x: Operand) -> Tensor:
    tx = as_tensor(x)
    out = np.sqrt(tx.data)
    return apply_op("sqrt", out, (tx,), lambda g: (g * 0.5 / out,))


def relu(x: Operand) -> Tensor:
    tx = as_tensor(x)
    mask = tx.data > 0.0
    return apply_op("relu", np.where(mask, tx.data, 0.0), (tx,), lambda g: (g * mask,))


def sigmoid(x: Operand) -> Tensor:
    tx = as_tensor(x)
    # Split by sign so neither branch overflows.
    z = np.exp(-np.abs(tx.data))
    out = np.where(tx.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    return apply_op("sigmoid", out, (tx,), lambda g: (g * out * (1.0 - out),))


def absolute(x: Operand) -> Tensor:
    tx = as_tensor(x)
    return apply_op("abs", np.abs(tx.data), (tx,), lambda g: (g * np.sign(tx.data),))


def maximum(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    pick_a = ta.data >= tb.data
    return apply_op(
        "maximum",
        np.where(pick_a, ta.data, tb.data),
        (ta, tb),
        lambda g: (unbroadcast(g * pick_a, ta.shape), unbroadcast(g * ~pick_a, tb.shape)),
    )


def minimum(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    pick_a = ta.data <= tb.data
    return apply_op(
        "minimum",
        np.where(pick_a, ta.data, tb.data),
        (ta, tb),
        lambda g: (unbroadcast(g * pick_a, ta.shape), unbroadcast(g * ~pick_a, tb.shape)),
    )


# Reductions and shape manipulation


def _normalize_axes(axis: Optional[Union[int, Tuple[int, ...]]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def tsum(x: Operand, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    tx = as_tensor(x)
    axes = _normalize_axes(axis, tx.ndim)

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        expanded = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(expanded, tx.shape).copy(),)

    return apply_op("sum", tx.data.sum(axis=axes, keepdims=keepdims), (tx,), rule)


def mean(x: Operand, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    tx = as_tensor(x)
    axes = _normalize_axes(axis, tx.ndim)
    count = int(np.prod([tx.shape[a] for a in axes])) if axes else 1
    return mul(tsum(tx, axis=axes, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(x: Operand, shape: Sequence[int]) -> Tensor:
    tx = as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return apply_op("reshape", tx.data.reshape(tuple(shape)).copy(), (tx,), lambda g: (g.reshape(tx.shape),))


def transpose(x: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
    tx = as_tensor(x)
    if axes is not None and len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    perm = tuple(range(tx.ndim))[::-1] if not axes else tuple(axes)
    inverse = tuple(np.argsort(perm))
    return apply_op(
        "transpose",
        np.ascontiguousarray(tx.data.transpose(perm)),
        (tx,),
        lambda g: (g.transpose(inverse),),
    )


def swap_last(x: Operand) -> Tensor:
    """Swap the two trailing axes."""
    tx = as_tensor(x)
    perm = list(range(tx.ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return transpose(tx, perm)


def _is_basic_index(index: Any) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(x: Operand, index: Any) -> Tensor:
    """Index with numpy semantics; advanced (array) indices may repeat."""
    tx = as_tensor(x)
    basic = _is_basic_index(index)

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(tx.data)
        if basic:
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return apply_op("getitem", np.array(tx.data[index]), (tx,), rule)


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat requires at least one tensor")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shape mismatch: {[p.shape for p in parts]}") from e
    return apply_op("concat", data, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("stack requires at least one tensor")
    try:
        data = np.stack([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack shape mismatch: {[p.shape for p in parts]}") from e
    return apply_op(
        "stack",
        data,
        parts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(parts))),
    )


# Linear algebra


def matmul(a: Operand, b: Operand) -> Tensor:
    """Matrix product over the two trailing axes, broadcasting leading axes.

    Raises:
        ShapeError: If either operand has fewer than two axes or the inner dimensions differ
    """
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim < 2 or tb.ndim < 2:
        raise ShapeError(f"matmul requires 2-D operands, got {ta.shape} and {tb.shape}")
    if ta.shape[-1] != tb.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {ta.shape} @ {tb.shape}")
    return apply_op(
        "matmul",
        np.matmul(ta.data, tb.data),
        (ta, tb),
        lambda g: (
            unbroadcast(np.matmul(g, np.swapaxes(tb.data, -1, -2)), ta.shape),
            unbroadcast(np.matmul(np.swapaxes(ta.data, -1, -2), g), tb.shape),
        ),
    )


# Normalisations


def softmax_lastdim(x: Operand) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    tx = as_tensor(x)
    if tx.ndim == 0 or tx.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {tx.shape}")
    shifted = tx.data - tx.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return apply_op(
        "softmax_lastdim",
        out,
        (tx,),
        lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
    )


def log_softmax_lastdim(x: Operand) -> Tensor:
    tx = as_tensor(x)
    if tx.ndim == 0 or tx.shape[-1] < 1:
        raise ShapeError(f"log_softmax needs a non-empty last axis, got {tx.shape}")
    shifted = tx.data - tx.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return apply_op(
        "log_softmax_lastdim",
        out,
        (tx,),
        lambda g: (g - probs * g.sum(axis=-1, keepdims=True),),
    )


def layer_norm(x: Operand, gamma: Operand, beta: Operand, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each last-axis row to zero mean and unit (population) variance, then apply the affine."""
    tx, tg, tb = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = tx.shape[-1] if tx.ndim else 0
    if d < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    if tg.shape != (d,) or tb.shape != (d,):
        raise ShapeError(f"layer_norm affine must have shape ({d},), got {tg.shape} and {tb.shape}")
    mu = tx.data.mean(axis=-1, keepdims=True)
    centered = tx.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    lead = tuple(range(tx.ndim - 1))

    def rule(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * tg.data
        dx = inv_std * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply_op("layer_norm", xhat * tg.data + tb.data, (tx, tg, tb), rule)


# Convolution


def conv2d(x: Operand, kernels: Operand, bias: Optional[Operand] = None, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation.

    Args:
        x: Input of shape C_in×H×W or B×C_in×H×W
        kernels: Filters of shape C_out×C_in×k_h×k_w
        bias: Optional per-output-channel bias of shape C_out
        stride: Step between windows, at least 1

    Returns:
        Output of shape (B×)C_out×H'×W' with H' = floor((H − k_h)/stride) + 1

    Raises:
        ShapeError: On channel mismatch, invalid stride, or a kernel larger than the input
    """
    tx, tk = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ShapeError(f"conv2d stride must be at least 1, got {stride}")
    if tx.ndim not in (3, 4) or tk.ndim != 4:
        raise ShapeError(f"conv2d expects (B×)C×H×W input and 4-D kernels, got {tx.shape} and {tk.shape}")
    batched = tx.ndim == 4
    xd = tx.data if batched else tx.data[None]
    _, c_in, height, width = xd.shape
    c_out, k_in, kh, kw = tk.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in}, kernels expect {k_in}")
    if kh > height or kw > width:
        raise ShapeError(f"conv2d kernel {kh}×{kw} larger than input {height}×{width}")
    windows = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.moveaxis(np.tensordot(windows, tk.data, axes=([1, 4, 5], [1, 2, 3])), -1, 1)
    inputs: List[Tensor] = [tx, tk]
    tb: Optional[Tensor] = None
    if bias is not None:
        tb = as_tensor(bias)
        if tb.shape != (c_out,):
            raise ShapeError(f"conv2d bias must have shape ({c_out},), got {tb.shape}")
        out = out + tb.data[None, :, None, None]
        inputs.append(tb)

    def rule(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        gb = g if batched else g[None]
        grad_k = np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_x = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(gb, tk.data[:, :, i, j], axes=([1], [0]))
                grad_x[:, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride] += (
                    np.moveaxis(contrib, -1, 1)
                )
        grads: List[Optional[np.ndarray]] = [grad_x if batched else grad_x[0], grad_k]
        if tb is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return apply_op("conv2d", out if batched else out[0], inputs, rule)


# Constructors


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), copy=False)


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor(np.ones(tuple(shape)), copy=False)
