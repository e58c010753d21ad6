"""
Dense tensors and define-by-run reverse-mode differentiation.

A `Tensor` wraps a read-only numpy array. Operations executed while a `Tape`
is active (``with Tape() as tape:``) and touching at least one tensor with
``requires_grad`` are recorded on that tape together with a backward rule;
`backward` replays the tape in reverse and sums gradients into every reachable
leaf. Outside a tape nothing is recorded, which is the inference path.
"""
import logging
import struct
import threading
from dataclasses import dataclass
from typing import BinaryIO, Callable, Sequence

import numpy as np

from src.config import config
from src.errors import DomainError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.array(data, dtype=dtype, copy=True)
        if dtype is None and not np.issubdtype(array.dtype, np.floating):
            array = array.astype(config.DEFAULT_DTYPE)
        self._own(array, requires_grad)

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Takes ownership of a freshly computed array without copying."""
        array = np.asarray(array)
        if not array.flags.c_contiguous:
            array = np.ascontiguousarray(array)
        tensor = cls.__new__(cls)
        tensor._own(array, requires_grad)
        return tensor

    def _own(self, array: np.ndarray, requires_grad: bool) -> None:
        if any(extent < 1 for extent in array.shape):
            raise ShapeError(f"tensor extents must be positive, got {array.shape}")
        if config.CHECK_FINITE and not np.all(np.isfinite(array)):
            raise NonFiniteError(f"non-finite values in tensor of shape {array.shape}")
        array.setflags(write=False)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass(frozen=True)
class Operation:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.operations: list[Operation] = []
        self._produced: set[int] = set()

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor, rule: Backward) -> None:
        self.operations.append(Operation(name, tuple(inputs), output, rule))
        self._produced.add(id(output))

    def is_leaf(self, tensor: Tensor) -> bool:
        return id(tensor) not in self._produced

    def __len__(self) -> int:
        return len(self.operations)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()


_local = threading.local()


def _tape_stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def result(name: str, array: np.ndarray, inputs: Sequence[Tensor], rule: Backward) -> Tensor:
    """Wraps an op output and records it when any input participates in differentiation."""
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.wrap(array, requires_grad=tracked)
    if tracked:
        tape.record(name, inputs, out, rule)
    return out


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Accumulates d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ShapeError("backward called without a tape")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    if root.requires_grad and tape.is_leaf(root):
        leaves[id(root)] = root

    for op in reversed(tape.operations):
        upstream = grads.pop(id(op.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(op.inputs, op.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.shape:
                raise ShapeError(f"{op.name} produced gradient {grad.shape} for input {tensor.shape}")
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad
            if tape.is_leaf(tensor):
                leaves[key] = tensor

    for key, leaf in leaves.items():
        grad = grads[key].astype(leaf.dtype, copy=False)
        leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor.wrap(np.full((), value, dtype=like.dtype))


def _check_binary(a: Tensor, b: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Operand arrays for a binary op; a size-1 operand broadcasts as a scalar."""
    if a.shape == b.shape:
        return a.data, b.data
    if a.size != 1 and b.size != 1:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcasting)")
    return (
        a.data.reshape(()) if a.size == 1 else a.data,
        b.data.reshape(()) if b.size == 1 else b.data,
    )


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    ad, bd = _check_binary(a, b)
    return result(
        "add", ad + bd, (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    ad, bd = _check_binary(a, b)
    return result(
        "sub", ad - bd, (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
    )


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    ad, bd = _check_binary(a, b)
    return result(
        "mul", ad * bd, (a, b),
        lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    return result("scale", a.data * factor, (a,), lambda g: (g * factor,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return result("exp", out, (a,), lambda g: (g * out,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor
    return result("clamp_min", np.maximum(a.data, floor), (a,), lambda g: (g * keep,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "log": log,
    "exp": exp,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise DomainError(f"unknown elementwise op '{kind}'") from None
    if kind in ("neg", "log", "exp"):
        return op(a)
    if b is None:
        raise ShapeError(f"'{kind}' needs two operands")
    return op(a, b)


def sum(a: Tensor) -> Tensor:
    return result(
        "sum", np.asarray(a.data.sum(dtype=a.dtype)), (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
    )


def mean(a: Tensor) -> Tensor:
    n = a.size
    return result(
        "mean", np.asarray(a.data.mean(dtype=a.dtype)), (a,),
        lambda g: (np.full(a.shape, g.reshape(-1)[0] / n, dtype=a.dtype),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(tuple(shape))
    return result("reshape", out.copy(), (a,), lambda g: (g.reshape(a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m x k]·[k x n], got {a.shape}·{b.shape}")
    return result(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            s != f for i, (s, f) in enumerate(zip(t.shape, first.shape)) if i != axis
        ):
            raise ShapeError(f"cannot concat {t.shape} with {first.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)].copy())
        return grads

    return result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def rule(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return result("slice", a.data[index].copy(), (a,), rule)


# Serialization: rank (u64 LE), extents (u64 LE each), float32 LE payload.

def write_tensor(stream: BinaryIO, tensor: Tensor) -> None:
    stream.write(struct.pack("<Q", tensor.ndim))
    stream.write(np.asarray(tensor.shape, dtype="<u8").tobytes())
    stream.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def read_tensor(stream: BinaryIO) -> Tensor:
    header = stream.read(8)
    if len(header) != 8:
        raise ShapeError("truncated tensor header")
    (rank,) = struct.unpack("<Q", header)
    raw_shape = stream.read(8 * rank)
    if len(raw_shape) != 8 * rank:
        raise ShapeError("truncated tensor extents")
    shape = tuple(int(s) for s in np.frombuffer(raw_shape, dtype="<u8"))
    count = int(np.prod(shape, dtype=np.int64))
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise ShapeError(f"truncated tensor payload: expected {count} floats")
    return Tensor.wrap(np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape))


# Finite-difference gradient checking.

def numerical_gradient(
    f: Callable[[np.ndarray], float],
    array: np.ndarray,
    eps: float = 1e-6,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central differences of a scalar function of one array at the given flat positions."""
    base = np.array(array, dtype=np.float64)
    grad = np.zeros_like(base)
    positions = indices if indices is not None else list(np.ndindex(base.shape))
    for pos in positions:
        original = base[pos]
        base[pos] = original + eps
        upper = f(base.copy())
        base[pos] = original - eps
        lower = f(base.copy())
        base[pos] = original
        grad[pos] = (upper - lower) / (2 * eps)
    return grad


def gradient_check(
    f: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    eps: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    atol: float = 1e-8,
) -> list[float]:
    """
    Compares tape gradients of ``f(*tensors)`` with central differences.

    Returns one relative error per input, ``|a - n| / (|a| + |n|)`` measured in
    the Euclidean norm over the checked entries. With ``max_entries`` only that
    many randomly chosen entries of each input are differenced. An input whose
    difference norm is below ``atol`` scores 0, so a gradient that is zero in
    exact arithmetic does not read as a total mismatch.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        out = f(*tensors)
        backward(out, tape)

    errors = []
    for i, array in enumerate(arrays):
        positions = list(np.ndindex(array.shape))
        if max_entries is not None and len(positions) > max_entries:
            chosen = rng.choice(len(positions), size=max_entries, replace=False)
            positions = [positions[j] for j in sorted(chosen)]

        def scalar(perturbed, i=i):
            args = [Tensor(a, dtype=np.float64) for a in arrays]
            args[i] = Tensor(perturbed, dtype=np.float64)
            return f(*args).item()

        numeric = numerical_gradient(scalar, array, eps=eps, indices=positions)
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(array)
        a = np.array([analytic[p] for p in positions])
        n = np.array([numeric[p] for p in positions])
        diff = np.linalg.norm(a - n)
        errors.append(0.0 if diff < atol else float(diff / (np.linalg.norm(a) + np.linalg.norm(n))))
    return errors
