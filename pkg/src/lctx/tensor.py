"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records its parents and a backward closure on the output
tensor. ``backward`` walks the recorded graph in reverse topological order.
Outputs are checked for NaN/Inf as they are produced.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "NonFiniteError", "GraphCycleError", "RngState", "tensor", "const",
    "concat", "stack", "softmax", "log_softmax", "layer_norm", "gelu",
    "backward", "grad_check", "init_params", "no_grad_value",
]

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphCycleError(RuntimeError):
    pass


@dataclass(frozen=True)
class RngState:
    seed: int
    algorithm: str = "PCG64"

    def generator(self) -> np.random.Generator:
        if self.algorithm != "PCG64":
            raise ValueError(f"unsupported rng algorithm {self.algorithm!r}")
        return np.random.Generator(np.random.PCG64(self.seed))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"zero extent in shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # -- graph construction ------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, fn: Callable, op: str) -> "Tensor":
        _check_finite(data, op)
        needs = any(p.requires_grad for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = fn if needs else None
        out.op = op
        return out

    # -- elementwise arithmetic ---------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return Tensor._make(a.data + b.data, (a, b), fn, "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
        return Tensor._make(a.data - b.data, (a, b), fn, "sub")

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) - self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def fn(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
        return Tensor._make(a.data * b.data, (a, b), fn, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def fn(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return Tensor._make(a.data / b.data, (a, b), fn, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) / self

    def __matmul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other
        out = a.data @ b.data

        def fn(g):
            ad, bd = a.data, b.data
            if ad.ndim == 1 and bd.ndim == 1:
                return g * bd, g * ad
            if ad.ndim == 1:
                return bd @ g, np.outer(ad, g)
            if bd.ndim == 1:
                return np.outer(g, bd), ad.T @ g
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
        return Tensor._make(out, (a, b), fn, "matmul")

    def __rmatmul__(self, other) -> "Tensor":
        return _as_tensor(other) @ self

    # -- unary functions -------------------------------------------------------
    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self) -> "Tensor":
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return Tensor._make(y, (self,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.log(x)
        return Tensor._make(y, (self,), lambda g: (g / x,), "log")

    def abs(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: (g * np.sign(x),), "abs")

    def relu(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0),), "relu")

    # -- reductions and reshaping ----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)),
                            (self,), fn, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,),
                            lambda g: (g.reshape(old),), "reshape")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def transpose(self, *axes) -> "Tensor":
        axes = axes or None
        inv = None if axes is None else np.argsort(axes)
        return Tensor._make(np.transpose(self.data, axes), (self,),
                            lambda g: (np.transpose(g, inv),), "transpose")

    def __getitem__(self, idx) -> "Tensor":
        if isinstance(idx, Tensor):
            raise TypeError("index with integers, slices or int arrays")
        shape = self.shape

        def fn(g):
            full = np.zeros(shape, dtype=DTYPE)
            np.add.at(full, idx, g)
            return (full,)
        return Tensor._make(np.array(self.data[idx], dtype=DTYPE), (self,), fn, "index")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def const(data) -> Tensor:
    return Tensor(data)


def no_grad_value(x: Tensor) -> np.ndarray:
    return x.data.copy()


def concat(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [_as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._make(np.concatenate([t.data for t in items], axis=axis),
                        tuple(items), fn, "concat")


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [_as_tensor(t) for t in items]

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))
    return Tensor._make(np.stack([t.data for t in items], axis=axis),
                        tuple(items), fn, "stack")


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = _as_tensor(x)
    if x.data.size == 0:
        raise ValueError("softmax of empty input")
    _check_finite(x.data, "softmax input")
    y = _softmax_np(x.data, axis)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return Tensor._make(y, (x,), fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.data.size == 0:
        raise ValueError("log_softmax of empty input")
    _check_finite(x.data, "log_softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)
    return Tensor._make(y, (x,), fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if not (x.shape[-1] == gain.shape[-1] == bias.shape[-1]):
        raise ValueError(f"length mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = xd.shape[-1]

    def fn(g):
        gx = g * gain.data
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))
    return Tensor._make(xhat * gain.data + bias.data, (x, gain, bias), fn, "layer_norm")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)
    return Tensor._make(y, (x,), fn, "gelu")


# -- reverse pass ------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack_: list[tuple[Tensor, int]] = [(root, 0)]
    while stack_:
        node, i = stack_.pop()
        key = id(node)
        if i == 0:
            s = state.get(key)
            if s == 2:
                continue
            if s == 1:
                raise GraphCycleError("cycle detected in computation graph")
            state[key] = 1
        parents = node._parents
        if i < len(parents):
            stack_.append((node, i + 1))
            p = parents[i]
            ps = state.get(id(p))
            if ps == 1:
                raise GraphCycleError("cycle detected in computation graph")
            if ps is None and p.requires_grad:
                stack_.append((p, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(node) into ``.grad`` of every requires_grad node.

    Gradients add to whatever is already stored; call ``zero_grad`` between
    passes to reset.
    """
    if output.data.size != 1 or output.data.ndim > 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    order = _topo_order(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            k = id(parent)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = np.asarray(pg, dtype=DTYPE)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               step: float = 1e-6, tolerance: float | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated after each in-place perturbation of a parameter
    coordinate, so it must read the parameters' current ``data``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("objective is not finite")
    backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        an = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError("objective is not finite under perturbation")
            denom = max(abs(an[i]), abs(num), 1e-12)
            worst = max(worst, abs(an[i] - num) / denom)
    for p in params:
        p.zero_grad()
    if tolerance is not None and worst > tolerance:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e} > {tolerance:.1e}")
    return worst


def init_params(shape, rng: np.random.Generator | RngState, scheme: str = "fan_uniform") -> Tensor:
    """Fresh trainable parameter.

    ``fan_uniform`` draws from U(-a, a) with a = sqrt(6 / (fan_in + fan_out));
    ``zeros`` and ``ones`` are for biases and norm gains.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if any(s <= 0 for s in shape):
        raise ValueError(f"non-positive extent in shape {shape}")
    if isinstance(rng, RngState):
        rng = rng.generator()
    if scheme == "zeros":
        data = np.zeros(shape)
    elif scheme == "ones":
        data = np.ones(shape)
    elif scheme == "fan_uniform":
        fan_in = shape[0]
        fan_out = shape[1] if len(shape) > 1 else shape[0]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data, requires_grad=True)
