"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a NumPy array (float32 by default) and records the
operation that produced it.  Calling :meth:`Tensor.backward` on a scalar
walks the recorded graph in reverse topological order and accumulates
gradients into every tensor created with ``requires_grad=True``.

Only the primitives the networks and losses of this package need are
provided.  Broadcasting is limited to NumPy's rules for binary elementwise
ops, with gradients summed back to the operand shape.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""

    def __init__(self, node: str, where: str = "forward"):
        super().__init__(f"non-finite value in {where} of node '{node}'")
        self.node = node
        self.where = where


class MissingGradient(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"parameter '{name}' has no gradient; call backward() before step()")
        self.name = name


def _check_finite(arr: np.ndarray, node: str, where: str = "forward") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(node, where)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-dimensional value with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, name: str) -> "Tensor":
        _check_finite(data, name)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = name
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # -- autodiff --------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` of every requires_grad leaf reachable from here."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                _check_finite(pg, node.name or "?", "backward")
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ----------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=DTYPE))
    return Tensor(x, dtype=dtype)


def _lift(a, b) -> tuple[Tensor, Tensor]:
    """Wrap Python scalars in the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype)
    return a, b


# -- elementwise binary ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(
        out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div",
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    e = np.asarray(exponent, dtype=ad.dtype)
    return Tensor._make(ad ** e, (a,), lambda g: (g * e * ad ** (e - 1),), "pow")


# -- elementwise unary -------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return Tensor._make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor._make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


# -- reductions and shape ---------------------------------------------------------------


def _expand(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)
    return Tensor._make(out, (a,), lambda g: (_expand(g, shape, axis, keepdims).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    if n == 0:
        raise ValueError("mean over an empty axis")
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)
    scale = np.asarray(1.0 / n, dtype=a.dtype)
    return Tensor._make(out, (a,), lambda g: (_expand(g, shape, axis, keepdims) * scale,), "mean")


def variance(a: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    """Population variance (divide by the axis length)."""
    centred = a - mean(a, axis=axis, keepdims=True)
    return mean(centred * centred, axis=axis, keepdims=keepdims)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    return Tensor._make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def take(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.asarray(a.data[index]), (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)), "concat",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")
    return Tensor._make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# -- probability ---------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), backward, "log_softmax")


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """dot(a, b) / (|a| |b|) for two vectors of equal length."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_similarity of a zero-norm vector is undefined")
    return tsum(a * b) / (sqrt(tsum(a * a)) * sqrt(tsum(b * b)))


def forward_backward(graph_fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Evaluate ``graph_fn(*inputs)`` and backpropagate from its scalar output."""
    value = graph_fn(*inputs)
    if value.size != 1:
        raise ValueError(f"graph output must be scalar, got shape {value.shape}")
    value.backward()
    return value


# -- parameters and optimizers -----------------------------------------------------------


class ParamSet:
    """Ordered, named collection of trainable tensors."""

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]] = (), rng_seed: int = 0):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.rng_seed = int(rng_seed)
        for name, arr in entries:
            self.add(name, arr)

    def add(self, name: str, arr) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name '{name}'")
        t = Tensor(np.array(arr, dtype=DTYPE), requires_grad=True, name=name)
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.entries.items())

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def count(self) -> int:
        return sum(t.size for t in self.entries.values())

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self.entries.items())

    def load_arrays(self, arrays) -> None:
        for name, arr in arrays.items():
            if name not in self.entries:
                raise KeyError(f"unknown parameter '{name}'")
            arr = np.asarray(arr, dtype=DTYPE)
            if arr.shape != self.entries[name].shape:
                raise ValueError(f"shape mismatch for '{name}': {arr.shape} vs {self.entries[name].shape}")
            self.entries[name].data = arr.copy()

    def copy(self) -> "ParamSet":
        return ParamSet(self.arrays().items(), rng_seed=self.rng_seed)


@dataclass
class OptimizerState:
    kind: str  # "sgd_momentum" | "adam"
    learning_rate: float
    momentum: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    step_count: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind '{self.kind}'")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd(learning_rate: float = 0.01, momentum: float = 0.9) -> OptimizerState:
    return OptimizerState("sgd_momentum", learning_rate, momentum=momentum)


def adam(learning_rate: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState("adam", learning_rate, adam_beta1=beta1, adam_beta2=beta2, adam_eps=eps)


def optimizer_step(params: ParamSet, state: OptimizerState) -> ParamSet:
    """Apply one SGD-momentum or Adam update in place, then clear gradients."""
    for name, t in params:
        if t.grad is None:
            raise MissingGradient(name)
    state.step_count += 1
    lr = np.float32(state.learning_rate)
    if state.kind == "sgd_momentum":
        mom = np.float32(state.momentum)
        for name, t in params:
            buf = state.slots.get(name)
            if buf is None:
                buf = np.zeros_like(t.data)
            buf = mom * buf + t.grad
            state.slots[name] = buf
            t.data = t.data - lr * buf
    else:
        b1, b2 = np.float32(state.adam_beta1), np.float32(state.adam_beta2)
        eps = np.float32(state.adam_eps)
        c1 = np.float32(1.0 - state.adam_beta1 ** state.step_count)
        c2 = np.float32(1.0 - state.adam_beta2 ** state.step_count)
        for name, t in params:
            m, v = state.slots.get(name, (np.zeros_like(t.data), np.zeros_like(t.data)))
            g = t.grad
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            state.slots[name] = (m, v)
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    for name, t in params:
        _check_finite(t.data, name, "optimizer step")
    params.zero_grad()
    return params


class Optimizer:
    """Binds a ParamSet to an OptimizerState."""

    def __init__(self, params: ParamSet, state: OptimizerState):
        self.params = params
        self.state = state

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        optimizer_step(self.params, self.state)
