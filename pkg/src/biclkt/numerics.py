"""Dense float64 arithmetic with a reverse-mode gradient tape, plus Adam.

Values are plain ``numpy.ndarray`` objects (float64). A :class:`Tensor`
wraps one value and remembers how it was produced so that
:meth:`Tensor.backward` can push gradients to every parameter that fed
into a scalar loss.

Shapes follow numpy broadcasting; gradients of broadcast operands are
summed back to the operand's shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


def as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    return a


class Tensor:
    """A value in the operation graph.

    Parameters
    ----------
    value : array_like
        Stored as float64; scalars become ``1x1``.
    requires_grad : bool
        Leaf tensors with ``requires_grad=True`` are parameters and
        accumulate into ``.grad``.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "op", "_backward", "_consumed")

    def __init__(self, value, requires_grad=False, parents=(), op="leaf", backward=None):
        self.value = as_array(value)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        Only valid on a 1x1 loss, and only once per forward pass.
        """
        if self.value.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise ContractError("this graph was already consumed by a backward pass")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        for node in order:
            if node.parents:
                node._consumed = True
                node._backward = _spent
        self._consumed = True

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _spent(g):
    raise ContractError("this graph was already consumed by a backward pass")


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def tensor(x, requires_grad=False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def parameter(x) -> Tensor:
    return Tensor(np.array(x, dtype=DTYPE), requires_grad=True)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.value, b.value, "add")
    return Tensor(a.value + b.value, parents=(a, b), op="add",
                  backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.value, b.value, "sub")
    return Tensor(a.value - b.value, parents=(a, b), op="sub",
                  backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product; also used for constant masks."""
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return Tensor(av * bv, parents=(a, b), op="mul",
                  backward=lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.value, b.value, "div")
    av, bv = a.value, b.value
    out = av / bv
    return Tensor(out, parents=(a, b), op="div",
                  backward=lambda g: (_unbroadcast(g / bv, a.shape),
                                      _unbroadcast(-g * out / bv, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(av @ bv, parents=(a, b), op="matmul", backward=backward)


def transpose(a) -> Tensor:
    a = tensor(a)
    return Tensor(np.swapaxes(a.value, -1, -2), parents=(a,), op="transpose",
                  backward=lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    old = a.shape
    return Tensor(a.value.reshape(shape), parents=(a,), op="reshape",
                  backward=lambda g: (g.reshape(old),))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    """Sum over ``axis``; ``axis=None`` gives a 1x1 total."""
    a = tensor(a)
    shape = a.shape
    if axis is None:
        out = np.array([[a.value.sum()]])
        return Tensor(out, parents=(a,), op="sum",
                      backward=lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(out, parents=(a,), op="sum", backward=backward)


def fsum_rows(a) -> Tensor:
    """Column totals as a ``1 x d`` row, correctly rounded.

    Unlike ``sum``, the result does not depend on row order.
    """
    a = tensor(a)
    shape = a.shape
    out = np.array([[math.fsum(col) for col in a.value.T]]).reshape(1, -1)
    return Tensor(out, parents=(a,), op="fsum_rows", backward=lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = tensor(a)
    return mul(sum(a), 1.0 / a.value.size)


def concat(tensors, axis=-1) -> Tensor:
    ts = [tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in ts]} ({exc})") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor(out, parents=tuple(ts), op="concat",
                  backward=lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis=1) -> Tensor:
    """Join equally shaped tensors along a new ``axis``."""
    ts = [tensor(t) for t in tensors]
    try:
        out = np.stack([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {[t.shape for t in ts]} ({exc})") from None
    return Tensor(out, parents=tuple(ts), op="stack",
                  backward=lambda g: tuple(np.moveaxis(g, axis, 0)))


def select(a, key) -> Tensor:
    """Basic (slice/integer) indexing ``a[key]``."""
    a = tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[key] = g
        return (out,)

    return Tensor(a.value[key], parents=(a,), op="select", backward=backward)


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate gradient."""
    a = tensor(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return Tensor(a.value[index], parents=(a,), op="take_rows", backward=backward)


# --------------------------------------------------------------- elementwise

def sigmoid_array(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = tensor(a)
    s = sigmoid_array(a.value)
    return Tensor(s, parents=(a,), op="sigmoid", backward=lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = tensor(a)
    t = np.tanh(a.value)
    return Tensor(t, parents=(a,), op="tanh", backward=lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = tensor(a)
    on = a.value > 0
    return Tensor(np.where(on, a.value, 0.0), parents=(a,), op="relu",
                  backward=lambda g: (g * on,))


def exp(a) -> Tensor:
    a = tensor(a)
    e = np.exp(a.value)
    return Tensor(e, parents=(a,), op="exp", backward=lambda g: (g * e,))


def log(a) -> Tensor:
    a = tensor(a)
    v = a.value
    return Tensor(np.log(v), parents=(a,), op="log", backward=lambda g: (g / v,))


def softplus(a) -> Tensor:
    """``log(1 + e^x)`` without overflow; derivative is the sigmoid."""
    a = tensor(a)
    s = sigmoid_array(a.value)
    return Tensor(np.logaddexp(0.0, a.value), parents=(a,), op="softplus",
                  backward=lambda g: (g * s,))


def softmax(a, axis=-1) -> Tensor:
    a = tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor(p, parents=(a,), op="softmax", backward=backward)


def l2_normalize_rows(a) -> Tensor:
    """Scale each row to unit length. All-zero rows stay zero (and pass no gradient)."""
    a = tensor(a)
    v = a.value
    norms = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    # compare with == so NaN rows stay NaN instead of being zeroed
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    u = np.where(zero, 0.0, v / safe)

    def backward(g):
        proj = (g * u).sum(axis=-1, keepdims=True)
        return (np.where(zero, 0.0, (g - u * proj) / safe),)

    return Tensor(u, parents=(a,), op="l2_normalize", backward=backward)


# ------------------------------------------------------------ initialisation

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


# ----------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param, **hyper) -> AdamState:
        shape = np.shape(param.value if isinstance(param, Tensor) else param)
        return cls(np.zeros(shape), np.zeros(shape), **hyper)


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState):
    """One bias-corrected Adam step. Returns ``(new_param, new_state)``; inputs are not mutated."""
    param = np.asarray(param, dtype=DTYPE)
    grad = np.asarray(grad, dtype=DTYPE)
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise DimensionError(
            f"adam_update: param {param.shape}, grad {grad.shape}, moments {state.m.shape}")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


@dataclass
class Adam:
    """Adam over a dict of named parameter tensors (updated in place)."""

    params: dict
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.states[name] = AdamState.like(p, lr=self.lr, beta1=self.beta1,
                                               beta2=self.beta2, eps=self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.value)
            p.value, self.states[name] = adam_update(p.value, grad, self.states[name])


# ------------------------------------------------------------- checking aids

def finite_difference(fn, params: dict, h: float = 1e-5) -> dict:
    """Central-difference gradient of scalar ``fn()`` w.r.t. each param's value."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p.value)
        flat, gflat = p.value.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = float(fn().value.reshape(-1)[0])
            flat[k] = old - h
            down = float(fn().value.reshape(-1)[0])
            flat[k] = old
            gflat[k] = (up - down) / (2 * h)
        out[name] = g
    return out


def relative_error(analytic, numeric) -> float:
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(fn, params: dict, h: float = 1e-5) -> dict:
    """Relative error between tape and finite-difference gradients, per parameter.

    ``fn`` must rebuild the graph from ``params`` on each call and return a
    1x1 tensor.
    """
    for p in params.values():
        p.grad = None
    fn().backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.value))
                for k, p in params.items()}
    numeric = finite_difference(fn, params, h)
    return {k: relative_error(analytic[k], numeric[k]) for k in params}
