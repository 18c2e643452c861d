"""Dense tensors with a reverse-mode tape, parameter stores and RMSProp.

Tensors wrap float64 numpy arrays. An operation records itself on a Tape only
when one of its inputs is bound to that tape, so there is no process-wide
recording state: two training runs in one process never see each other's
operations. Leading batch dimensions broadcast through every primitive.
"""

import math
from dataclasses import dataclass, field
from typing import (
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from raca.utils.errors import (
    ContractError,
    DimensionError,
    NumericDomainError,
    TrainingDivergenceError,
)

Array = np.ndarray
Grads = Tuple[Optional[Array], ...]
Operand = Union["Tensor", float, int, Array]


class Tensor:
    """Immutable n-dimensional float64 value, optionally bound to a tape."""

    __slots__ = ("data", "tape", "name")

    def __init__(
        self, data, tape: Optional["Tape"] = None, name: Optional[str] = None
    ):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class _Node:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: Callable[[Array], Grads]


class Tape:
    """Ordered record of primitive operations for reverse-mode replay."""

    def __init__(self):
        self._nodes: List[_Node] = []
        self._leaves: Dict[str, Tensor] = {}

    def watch(self, name: str, data) -> Tensor:
        """Introduce a named leaf whose gradient backward() will report."""
        if name in self._leaves:
            raise ContractError(f"Leaf {name!r} is already watched on this tape")
        leaf = Tensor(data, tape=self, name=name)
        self._leaves[name] = leaf
        return leaf

    def record(
        self,
        op: str,
        output: Tensor,
        inputs: Tuple[Tensor, ...],
        vjp: Callable[[Array], Grads],
    ) -> None:
        self._nodes.append(_Node(op, output, inputs, vjp))

    @property
    def leaves(self) -> Dict[str, Tensor]:
        return dict(self._leaves)

    @property
    def ops(self) -> List[str]:
        return [node.op for node in self._nodes]

    def __len__(self) -> int:
        return len(self._nodes)


def _as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _tape_of(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for tensor in inputs:
        if tensor.tape is None:
            continue
        if tape is not None and tensor.tape is not tape:
            raise ContractError("Operands are bound to different tapes")
        tape = tensor.tape
    return tape


def _result(
    op: str,
    data: Array,
    inputs: Sequence[Tensor],
    vjp: Callable[[Array], Grads],
) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericDomainError(f"{op} produced non-finite values")
    data.setflags(write=False)
    tape = _tape_of(inputs)
    out = Tensor(data, tape=tape)
    if tape is not None:
        tape.record(op, out, tuple(inputs), vjp)
    return out


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to an operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# Elementwise arithmetic


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g: Array) -> Grads:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), vjp)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g: Array) -> Grads:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), vjp)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g: Array) -> Grads:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), vjp)


def neg(x: Tensor) -> Tensor:
    def vjp(g: Array) -> Grads:
        return (-g,)

    return _result("neg", -x.data, (x,), vjp)


def square(x: Tensor) -> Tensor:
    def vjp(g: Array) -> Grads:
        return (2.0 * x.data * g,)

    return _result("square", x.data * x.data, (x,), vjp)


def absolute(x: Tensor) -> Tensor:
    def vjp(g: Array) -> Grads:
        return (np.sign(x.data) * g,)

    return _result("abs", np.abs(x.data), (x,), vjp)


# Nonlinearities


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def vjp(g: Array) -> Grads:
        return (g * y * (1.0 - y),)

    return _result("sigmoid", y, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def vjp(g: Array) -> Grads:
        return (g * (1.0 - y * y),)

    return _result("tanh", y, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def vjp(g: Array) -> Grads:
        return (g * positive,)

    return _result("relu", np.where(positive, x.data, 0.0), (x,), vjp)


def elu(x: Tensor) -> Tensor:
    positive = x.data > 0
    y = np.where(positive, x.data, np.expm1(np.minimum(x.data, 0.0)))

    def vjp(g: Array) -> Grads:
        return (g * np.where(positive, 1.0, y + 1.0),)

    return _result("elu", y, (x,), vjp)


def softmax_rows(m: Tensor, mask: Optional[Array] = None) -> Tensor:
    """Softmax along the last axis with max-subtraction.

    Entries where ``mask`` is false get weight 0; a row with nothing unmasked
    comes out as all zeros.
    """
    if not np.all(np.isfinite(m.data)):
        raise NumericDomainError("softmax_rows received non-finite logits")
    if m.shape[-1] == 0:
        y = np.zeros(m.shape)
    elif mask is None:
        shifted = m.data - m.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), m.shape)
        row_max = np.max(np.where(keep, m.data, -np.inf), axis=-1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.exp(np.where(keep, m.data - row_max, -np.inf))
        total = e.sum(axis=-1, keepdims=True)
        y = np.divide(e, total, out=np.zeros_like(e), where=total > 0)

    def vjp(g: Array) -> Grads:
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (m,), vjp)


# Linear algebra and shape plumbing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over the rest."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs at least 2-D operands", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner extents differ", a.shape, b.shape)

    def vjp(g: Array) -> Grads:
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", a.data @ b.data, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""

    def vjp(g: Array) -> Grads:
        return (np.swapaxes(g, -1, -2),)

    return _result("transpose", np.swapaxes(x.data, -1, -2), (x,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def vjp(g: Array) -> Grads:
        return (g.reshape(x.shape),)

    return _result("reshape", x.data.reshape(tuple(shape)), (x,), vjp)


def reduce_sum(
    x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False
) -> Tensor:
    def vjp(g: Array) -> Grads:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def reduce_mean(
    x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False
) -> Tensor:
    total = reduce_sum(x, axis=axis, keepdims=keepdims)
    count = x.data.size // max(total.data.size, 1)
    return mul(total, 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g: Array) -> Grads:
        return tuple(np.split(g, bounds, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result("concat", data, tensors, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]

    def vjp(g: Array) -> Grads:
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    data = np.stack([t.data for t in tensors], axis=axis)
    return _result("stack", data, tensors, vjp)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""

    def vjp(g: Array) -> Grads:
        full = np.zeros(x.shape)
        full[..., start:stop] = g
        return (full,)

    return _result("slice", x.data[..., start:stop], (x,), vjp)


def gather(x: Tensor, index: Array) -> Tensor:
    """Pick ``x[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise DimensionError("gather index must match leading extents", x.shape, index.shape)

    def vjp(g: Array) -> Grads:
        full = np.zeros(x.shape)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    picked = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]
    return _result("gather", picked, (x,), vjp)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map of the last axis of ``x``; any leading shape is kept."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError("linear input width differs from weight rows", x.shape, w.shape)
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, w)
    if b is not None:
        out = add(out, b)
    if x.ndim != 2:
        out = reshape(out, lead + (w.shape[1],))
    return out


class GruParams(NamedTuple):
    """Gate weights stacked as [reset | update | candidate] columns."""

    w_x: Tensor
    w_h: Tensor
    b_x: Tensor
    b_h: Tensor


def gru_step(x: Tensor, h: Tensor, params: GruParams) -> Tensor:
    """One GRU cell step: h' = (1 - z) * n + z * h."""
    d_h = h.shape[-1]
    if params.w_x.shape != (x.shape[-1], 3 * d_h) or params.w_h.shape != (d_h, 3 * d_h):
        raise DimensionError(
            "GRU weights do not fit input/hidden widths",
            params.w_x.shape,
            params.w_h.shape,
            (x.shape[-1], d_h),
        )
    gx = linear(x, params.w_x, params.b_x)
    gh = linear(h, params.w_h, params.b_h)
    r = sigmoid(slice_last(gx, 0, d_h) + slice_last(gh, 0, d_h))
    z = sigmoid(slice_last(gx, d_h, 2 * d_h) + slice_last(gh, d_h, 2 * d_h))
    n = tanh(slice_last(gx, 2 * d_h, 3 * d_h) + r * slice_last(gh, 2 * d_h, 3 * d_h))
    return n + z * (h - n)


# Reverse mode


def backward(tape: Tape, loss: Tensor) -> Dict[str, Array]:
    """Gradients of a scalar loss for every leaf watched on ``tape``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    leaves = tape.leaves
    adjoints: Dict[int, Array] = {}
    if loss.tape is tape:
        adjoints[id(loss)] = np.ones(loss.shape)
        for node in reversed(tape._nodes):
            g = adjoints.pop(id(node.output), None)
            if g is None:
                continue
            for operand, grad in zip(node.inputs, node.vjp(g)):
                if grad is None or operand.tape is not tape:
                    continue
                key = id(operand)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + grad
                else:
                    adjoints[key] = grad

    return {
        name: adjoints.get(id(leaf), np.zeros(leaf.shape))
        for name, leaf in leaves.items()
    }


def gradcheck(
    fn: Callable[[Dict[str, Tensor]], Tensor],
    inputs: Mapping[str, Array],
    step: float = 1e-5,
    floor: float = 1e-3,
) -> float:
    """Largest relative error between backward() and central differences.

    The denominator is max(|analytic|, |numeric|, floor) so that near-zero
    gradients are compared absolutely.
    """
    tape = Tape()
    leaves = {name: tape.watch(name, np.array(value, dtype=np.float64)) for name, value in inputs.items()}
    analytic = backward(tape, fn(leaves))

    worst = 0.0
    for name, value in inputs.items():
        base = np.array(value, dtype=np.float64)
        for idx in np.ndindex(base.shape):
            shifted_losses = []
            for delta in (step, -step):
                shifted = {n: Tensor(np.array(v, dtype=np.float64)) for n, v in inputs.items()}
                moved = base.copy()
                moved[idx] += delta
                shifted[name] = Tensor(moved)
                shifted_losses.append(fn(shifted).item())
            numeric = (shifted_losses[0] - shifted_losses[1]) / (2.0 * step)
            exact = analytic[name][idx]
            scale = max(abs(exact), abs(numeric), floor)
            worst = max(worst, abs(exact - numeric) / scale)
    return worst


# Parameters and optimisation


class ParamStore:
    """Named float64 parameter arrays with an update counter."""

    def __init__(self, arrays: Optional[Mapping[str, Array]] = None, updates: int = 0):
        self._arrays: Dict[str, Array] = {}
        for name, value in (arrays or {}).items():
            self._arrays[name] = np.array(value, dtype=np.float64)
        self.updates = updates

    def __getitem__(self, name: str) -> Array:
        return self._arrays[name]

    def __setitem__(self, name: str, value: Array) -> None:
        self._arrays[name] = np.array(value, dtype=np.float64)

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> List[str]:
        return list(self._arrays)

    def items(self) -> Iterable[Tuple[str, Array]]:
        return self._arrays.items()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: value.shape for name, value in self._arrays.items()}

    @property
    def num_parameters(self) -> int:
        return int(sum(value.size for value in self._arrays.values()))

    def copy(self) -> "ParamStore":
        return ParamStore(self._arrays, updates=self.updates)

    def subset(self, *prefixes: str) -> "ParamStore":
        """Parameters whose names start with any of ``prefixes``."""
        return ParamStore(
            {n: v for n, v in self._arrays.items() if n.startswith(prefixes)},
            updates=self.updates,
        )

    def merge(self, other: "ParamStore") -> "ParamStore":
        merged = ParamStore(self._arrays, updates=self.updates)
        for name, value in other.items():
            merged[name] = value
        return merged

    def watch(self, tape: Tape) -> Dict[str, Tensor]:
        return {name: tape.watch(name, value) for name, value in self._arrays.items()}

    def constants(self) -> Dict[str, Tensor]:
        return {name: Tensor(value, name=name) for name, value in self._arrays.items()}

    def bit_equal(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(
            self[name].shape == other[name].shape
            and self[name].tobytes() == other[name].tobytes()
            for name in self.names()
        )


@dataclass
class OptimizerState:
    """RMSProp accumulators; one squared-gradient average per parameter."""

    lr: float = 5e-4
    alpha: float = 0.99
    eps: float = 1e-5
    step: int = 0
    square_avg: Dict[str, Array] = field(default_factory=dict)

    @classmethod
    def for_params(
        cls, params: ParamStore, lr: float = 5e-4, alpha: float = 0.99, eps: float = 1e-5
    ) -> "OptimizerState":
        return cls(
            lr=lr,
            alpha=alpha,
            eps=eps,
            square_avg={name: np.zeros(value.shape) for name, value in params.items()},
        )


def clip_grad_norm(grads: Mapping[str, Array], max_norm: float) -> Tuple[Dict[str, Array], float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    coef = max_norm / (total + 1e-6)
    if coef >= 1.0:
        return dict(grads), total
    return {name: g * coef for name, g in grads.items()}, total


def rmsprop_update(
    params: ParamStore, grads: Mapping[str, Array], state: OptimizerState
) -> Tuple[ParamStore, OptimizerState]:
    """theta <- theta - lr * g / sqrt(E[g^2] + eps), in place."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"Gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise DimensionError(f"Gradient shape for {name}", np.shape(g), params[name].shape)
        if np.isnan(g).any():
            raise TrainingDivergenceError(f"NaN gradient for parameter {name}", parameter=name)

    for name, g in grads.items():
        avg = state.square_avg.get(name)
        if avg is None:
            avg = np.zeros(params[name].shape)
        avg = state.alpha * avg + (1.0 - state.alpha) * g * g
        state.square_avg[name] = avg
        params[name] = params[name] - state.lr * g / np.sqrt(avg + state.eps)

    state.step += 1
    params.updates += 1
    return params, state


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Sequence[int]) -> Array:
    """Fan-in scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=tuple(shape))
