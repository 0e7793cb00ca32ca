"""
Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Every differentiable operation produces a Tensor and, when any input requires a
gradient, an Op holding a vector-Jacobian closure. Ops are appended to the active
Tape in execution order, which is a valid topological order of the graph.
backward() replays them in reverse.

    with Tape() as tape:
        loss = mse_loss(matmul(x, w), y)
    tape.backward(loss)          # or backward(loss): DFS order, same gradients
"""
import contextlib
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]
Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPES: List["Tape"] = []
_GRAD_ENABLED = True


class Tensor:
    """Dense rows x cols float64 grid that can take part in a gradient tape"""

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        data = np.array(values, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(1, -1)
        elif data.ndim != 2:
            raise DimensionError("Tensor", data.shape)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._op: Optional["Op"] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._op = None
        return out

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return hadamard(self, other)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass(eq=False)
class Op:
    """One recorded operation: inputs, output and the local vector-Jacobian product"""
    name: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Vjp


class Tape:
    """Ordered record of the operations executed while it is active"""

    def __init__(self):
        self.ops: List[Op] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, op: Op) -> None:
        self.ops.append(op)

    def backward(self, loss: Tensor) -> None:
        backward(loss, order=self.ops)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without building any graph"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def constant(values: ArrayLike) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name: str, inputs: Tuple[Tensor, ...], data: np.ndarray, vjp: Vjp) -> Tensor:
    out = Tensor._wrap(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        op = Op(name, inputs, out, vjp)
        out._op = op
        if _ACTIVE_TAPES:
            _ACTIVE_TAPES[-1].record(op)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


# --- Operations ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError("matmul", a.shape, b.shape)
    A, B = a.data, b.data
    return _record("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("hadamard", a, b)
    A, B = a.data, b.data
    return _record("hadamard", (a, b), A * B, lambda g: (g * B, g * A))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar"""
    x = _as_tensor(x)
    factor = float(factor)
    return _record("scale", (x,), x.data * factor, lambda g: (g * factor,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1 x cols row vector to every row (the explicit form of a linear-layer bias)"""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if bias.shape != (1, x.cols):
        raise DimensionError("add_bias", x.shape, bias.shape)
    return _record("add_bias", (x, bias), x.data + bias.data,
                   lambda g: (g, g.sum(axis=0, keepdims=True)))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    active = x.data > 0
    return _record("relu", (x,), np.where(active, x.data, 0.0), lambda g: (g * active,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-log(1 + e^-z)) never overflows
    return np.exp(-np.logaddexp(0.0, -z))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax; entries equal to -inf get exactly zero weight"""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", (x,), s, vjp)


def scale_shift(x: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """alpha * x + beta with 1x1 alpha and beta spread over the whole matrix"""
    x, alpha, beta = _as_tensor(x), _as_tensor(alpha), _as_tensor(beta)
    for t in (alpha, beta):
        if t.shape != (1, 1):
            raise DimensionError("scale_shift", x.shape, t.shape)
    X = x.data
    a = alpha.data[0, 0]

    def vjp(g):
        return (g * a, np.array([[np.sum(g * X)]]), np.array([[np.sum(g)]]))

    return _record("scale_shift", (x, alpha, beta), a * X + beta.data[0, 0], vjp)


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where keep is False by a constant; those entries carry no gradient"""
    x = _as_tensor(x)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape:
        raise DimensionError("masked_fill", x.shape, keep.shape)
    return _record("masked_fill", (x,), np.where(keep, x.data, value),
                   lambda g: (np.where(keep, g, 0.0),))


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _record("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if not 0 <= start < stop <= x.rows:
        raise ContractError(f"row_slice [{start}:{stop}] out of range for {x.shape}")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record("row_slice", (x,), x.data[start:stop].copy(), vjp)


def col_slice(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if not 0 <= start < stop <= x.cols:
        raise ContractError(f"col_slice [{start}:{stop}] out of range for {x.shape}")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record("col_slice", (x,), x.data[:, start:stop].copy(), vjp)


def vstack(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise DimensionError("vstack", *[p.shape for p in parts])
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record("vstack", parts, np.vstack([p.data for p in parts]), vjp)


def hstack(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError("hstack", *[p.shape for p in parts])
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record("hstack", parts, np.hstack([p.data for p in parts]), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise every row over its columns, then apply a per-column gain and bias"""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    for t in (gain, bias):
        if t.shape != (1, x.cols):
            raise DimensionError("layer_norm", x.shape, t.shape)
    n = x.cols
    centered = x.data - x.data.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv
    G = gain.data

    def vjp(g):
        dxhat = g * G
        dx = inv / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _record("layer_norm", (x, gain, bias), xhat * G + bias.data, vjp)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _record("sum_all", (x,), np.array([[x.data.sum()]]),
                   lambda g: (np.full(shape, g[0, 0]),))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every entry, as a 1x1 tensor"""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _same_shape("mse_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        d = g[0, 0] * 2.0 / n * diff
        return d, -d

    return _record("mse_loss", (pred, target), np.array([[np.mean(diff ** 2)]]), vjp)


# --- Backward pass ---

def topological_order(loss: Tensor) -> List[Op]:
    """Depth-first post-order of the ops reachable from loss (inputs before users)"""
    order: List[Op] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        tensor, expanded = stack.pop()
        op = tensor._op
        if op is None:
            continue
        if expanded:
            order.append(op)
            continue
        if id(op) in visited:
            continue
        visited.add(id(op))
        stack.append((tensor, True))
        for inp in op.inputs:
            if inp._op is not None and id(inp._op) not in visited:
                stack.append((inp, False))
    return order


def backward(loss: Tensor, order: Optional[Sequence[Op]] = None) -> None:
    """
    Populate .grad of every requires_grad tensor reachable from a scalar loss.

    Gradients add onto any existing .grad, so callers zero them between steps.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward() needs a 1x1 loss, got {loss.shape}")
    if order is None:
        order = topological_order(loss)

    grads: Dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    tensors: Dict[int, Tensor] = {id(loss): loss}
    for op in reversed(order):
        g = grads.get(id(op.output))
        if g is None:
            continue
        for inp, g_in in zip(op.inputs, op.vjp(g)):
            if g_in is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = np.array(g_in, dtype=np.float64)
                tensors[key] = inp

    for key, tensor in tensors.items():
        if not tensor.requires_grad:
            continue
        g = grads[key]
        tensor.grad = g if tensor.grad is None else tensor.grad + g


# --- Verification ---

def _named(params: Union[Mapping[str, Tensor], Sequence[Tensor]]) -> Dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {p.name or f"param{i}": p for i, p in enumerate(params)}


def grad_check(
    f: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Sequence[Tensor]],
    h: float = 1e-5,
) -> float:
    """
    Compare backward() against central finite differences.

    f rebuilds the graph from scratch on every call and returns a 1x1 loss. For each
    parameter tensor the error is max|analytic - numeric| / max(max|analytic|,
    max|numeric|, 1e-8); the worst tensor's error is returned. Entries are measured against
    the largest gradient of their own tensor, so a tensor with one dominant entry tolerates
    proportionally larger absolute error on its small entries.
    """
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    named = _named(params)
    for p in named.values():
        p.zero_grad()

    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite at the unperturbed point", name="loss")
    backward(loss)

    worst = 0.0
    for name, p in named.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(analytic).all():
            raise NumericError(f"non-finite analytic gradient for {name}", name=name)
        numeric = np.zeros_like(p.data)
        with no_grad():
            for idx in np.ndindex(p.data.shape):
                original = p.data[idx]
                p.data[idx] = original + h
                f_plus = f().item()
                p.data[idx] = original - h
                f_minus = f().item()
                p.data[idx] = original
                numeric[idx] = (f_plus - f_minus) / (2.0 * h)
        if not np.isfinite(numeric).all():
            raise NumericError(f"non-finite numeric gradient for {name}", name=name)
        denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
        err = float(np.abs(analytic - numeric).max() / denom)
        logger.debug("grad_check %s: rel err %.3e", name, err)
        worst = max(worst, err)
    return worst
