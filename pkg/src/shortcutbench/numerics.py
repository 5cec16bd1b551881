"""Small dense tensor type with tape-based reverse-mode autodiff.

Only what the benchmark needs: affine layers, ReLU, softmax cross-entropy,
gradient reversal, a handful of elementwise and reduction ops, and two
optimizers (Adam, SGD with momentum).

Recording is explicit. Operations executed inside ``with Tape() as tape:``
are recorded when at least one input requires a gradient; outside of a tape
they simply compute values::

    with Tape() as tape:
        loss = softmax_cross_entropy(affine(x, W, b), y)
    tape.backward(loss)
"""
from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float32

_ACTIVE_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised on misuse of the autodiff machinery."""


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily store tensors (and run ops) in ``dtype``, e.g. float64 for gradient checks."""
    global DTYPE
    saved, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = saved


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dims must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Fast path for op outputs: skips the defensive copy.
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=DTYPE)
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records primitive operations in execution order.

    A tape can be differentiated exactly once. Leaf tensors that already hold
    a gradient are refused rather than accumulated into; clear them with
    ``ParamSet.zero_grad`` (or an optimizer step) first.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False
        self._producer: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self._producer[id(out)] = len(self.nodes)
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise GradientError("backward already called on this tape")
        if loss.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._producer:
            raise GradientError("loss was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: self._producer[id(loss)] + 1]):
            g = grads.pop(id(node.out), None)
            for t in node.inputs:
                if t.requires_grad and id(t) not in self._producer:
                    leaves[id(t)] = t
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=DTYPE)
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + gi
                else:
                    grads[id(t)] = gi
        for key, leaf in leaves.items():
            if leaf.grad is not None:
                raise GradientError(
                    f"gradient of {leaf.name or 'leaf'} already populated; zero it before a new backward"
                )
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape).astype(DTYPE)


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _emit(out_arr: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    needs = bool(_ACTIVE_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, requires_grad=needs)
    if needs:
        _ACTIVE_TAPES[-1].record(out, inputs, vjp)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise / linear algebra ------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _emit(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * DTYPE(c), (a,), lambda g: (g * DTYPE(c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _emit(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` with ``b`` broadcast over rows."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"affine: x {x.shape} incompatible with W {W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"affine: bias {b.shape} does not match W {W.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = x.data @ W.data + b.data
    return _emit(out, (x, W, b), lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)))


class _MarginTracker:
    def __init__(self):
        self.value = np.inf


_MARGIN_TRACKERS: list[_MarginTracker] = []


@contextmanager
def relu_margin() -> Iterator[_MarginTracker]:
    """Track the smallest |pre-activation| seen by ``relu`` in the block.

    Finite-difference checks are only meaningful when no pre-activation
    crosses the kink within the step size.
    """
    tracker = _MarginTracker()
    _MARGIN_TRACKERS.append(tracker)
    try:
        yield tracker
    finally:
        _MARGIN_TRACKERS.remove(tracker)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at exactly 0 is 0
    if _MARGIN_TRACKERS:
        smallest = float(np.abs(x.data).min())
        for tr in _MARGIN_TRACKERS:
            tr.value = min(tr.value, smallest)
    return _emit(np.where(mask, x.data, DTYPE(0)), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _emit(out, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    out = np.sqrt(x.data)

    def vjp(g):
        safe = np.where(out > 0, out, DTYPE(1))
        return (np.where(out > 0, g * DTYPE(0.5) / safe, DTYPE(0)),)

    return _emit(out, (x,), vjp)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    total = DTYPE(np.sum(x.data, dtype=np.float64))
    return _emit(np.array(total), (x,), lambda g: (np.full(x.shape, g, dtype=DTYPE),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.size
        out = np.array(np.mean(x.data, dtype=np.float64), dtype=DTYPE)
        return _emit(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=DTYPE),))
    n = x.shape[axis]
    out = np.mean(x.data, axis=axis, keepdims=True, dtype=np.float64).astype(DTYPE)
    return _emit(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(DTYPE),))


def logmeanexp(x: Tensor) -> Tensor:
    """``log(mean(exp(x)))`` over all entries, max-stabilised."""
    flat = x.data.astype(np.float64)
    m = flat.max()
    w = np.exp(flat - m)
    s = w.sum()
    out = np.array(m + np.log(s / flat.size), dtype=DTYPE)
    soft = (w / s).astype(DTYPE)
    return _emit(out, (x,), lambda g: (g * soft,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols row mismatch: {a.shape} vs {b.shape}")
    k = a.shape[1]
    return _emit(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :k], g[:, k:]))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _emit(x.data[:, start:stop].copy(), (x,), vjp)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit(x.data[index], (x,), vjp)


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam``."""
    if lam < 0:
        raise ValueError(f"gradient reversal weight must be >= 0, got {lam}")
    factor = DTYPE(-lam)
    return _emit(x.data.copy(), (x,), lambda g: (g * factor,))


def softmax_cross_entropy(logits: Tensor, targets: Tensor | np.ndarray) -> Tensor:
    """Mean over rows of ``-sum_c y_c log softmax(logits)_c``."""
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=DTYPE)
    if logits.data.ndim != 2 or y.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {y.shape}")
    if logits.shape[1] < 2:
        raise ShapeError("softmax cross-entropy needs at least two classes")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("targets must be one-hot rows")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = np.array(-(y * logp).sum() / n, dtype=DTYPE)
    probs = np.exp(logp)

    def vjp(g):
        return ((g * (probs - y) / n).astype(DTYPE),)

    return _emit(loss, (logits,), vjp)


def one_hot(labels: np.ndarray, classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, classes), dtype=DTYPE)
    out[np.arange(labels.size), labels] = 1
    return out


# -- parameters -------------------------------------------------------------


class ParamSet:
    """Named parameters with insertion-ordered, deterministic iteration."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: Tensor | np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def frozen(self) -> dict[str, Tensor]:
        """Constant views of the parameters; gradients never reach them."""
        return {k: Tensor._wrap(t.data) for k, t in self._params.items()}

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_state_dict(self, state) -> None:
        if list(state) != list(self._params):
            raise KeyError("parameter names do not match")
        for k, arr in state.items():
            if arr.shape != self._params[k].shape:
                raise ShapeError(f"{k}: expected {self._params[k].shape}, got {arr.shape}")
            self._params[k].data = np.array(arr, dtype=DTYPE, copy=True)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(DTYPE)


def add_linear(params: ParamSet, prefix: str, fan_in: int, fan_out: int,
               rng: np.random.Generator) -> None:
    params.add(f"{prefix}.W", glorot_uniform(rng, fan_in, fan_out))
    params.add(f"{prefix}.b", np.zeros(fan_out, dtype=DTYPE))


# -- optimizers --------------------------------------------------------------


@dataclass
class OptState:
    kind: str
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _check_grads(params: ParamSet) -> None:
    missing = [k for k, t in params.items() if t.grad is None]
    if missing:
        raise GradientError(f"missing gradients for {missing}")


def adam_step(params: ParamSet, state: OptState, lr: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    _check_grads(params)
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = p.grad
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= DTYPE(b1)
        m += DTYPE(1 - b1) * g
        v *= DTYPE(b2)
        v += DTYPE(1 - b2) * g * g
        update = (m / DTYPE(c1)) / (np.sqrt(v / DTYPE(c2)) + DTYPE(eps))
        p.data = (p.data - DTYPE(lr) * update).astype(DTYPE)
        p.grad = None


def sgd_momentum_step(params: ParamSet, state: OptState, lr: float = 0.01,
                      momentum: float = 0.9) -> None:
    _check_grads(params)
    state.step += 1
    for k, p in params.items():
        vel = state.m.get(k)
        if vel is None:
            vel = state.m[k] = np.zeros_like(p.data)
        vel *= DTYPE(momentum)
        vel += p.grad
        p.data = (p.data - DTYPE(lr) * vel).astype(DTYPE)
        p.grad = None


class Optimizer:
    """Binds a parameter set to one of the two update rules."""

    def __init__(self, params: ParamSet, kind: str = "adam", lr: float = 1e-3,
                 momentum: float = 0.9):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.state = OptState(kind)

    def step(self) -> None:
        if self.state.kind == "adam":
            adam_step(self.params, self.state, self.lr)
        else:
            sgd_momentum_step(self.params, self.state, self.lr, self.momentum)


def numerical_grad(f: Callable[[], float], x: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function wrt ``x`` (in place).

    Divides by the step actually stored, since ``orig +- eps`` is rounded to
    the tensor dtype.
    """
    out = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = flat[i]
        hi = f()
        flat[i] = orig - eps
        down = flat[i]
        lo = f()
        flat[i] = orig
        out.reshape(-1)[i] = (hi - lo) / (float(up) - float(down))
    return out


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximised.

    The floor keeps near-zero entries from dominating through float32
    round-off in the finite differences.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
