"""Minimal dense-tensor autodiff engine.

Tensors wrap float64 numpy arrays. Operations executed while a Tape is
active are recorded in creation order (a Wengert list); Tape.backward
replays the adjoints in reverse, visiting each node exactly once.
Outside a tape, the same operations run as plain numpy computations with
no recording overhead, which is how frozen models are evaluated.

A Tape is single-threaded; distinct tapes may run on distinct threads.
"""

from __future__ import annotations

import threading

import numpy as np

STD_EPS = 1e-12  # guard under the square root of the population std


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the operation (log, division)."""


class NotScalar(ValueError):
    """backward() requires a scalar loss."""


class NumericalFailure(RuntimeError):
    """Non-finite value encountered where a finite one is required."""


_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of primitive operations, replayed in reverse by backward().

    Use as a context manager around loss construction:

        with Tape() as tape:
            loss = build_loss(params)
            tape.backward(loss)
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("tapes do not nest; close the active tape first")
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = None
        return False

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(x) into .grad of every reachable requires_grad tensor.

        Repeated calls without zeroing grads accumulate. Raises NotScalar for
        non-scalar losses and ValueError if the loss is not recorded on this tape.
        """
        if loss.data.size != 1:
            raise NotScalar(f"loss must be scalar, got shape {loss.data.shape}")
        if loss._tape is not self:
            raise ValueError("loss is not connected to this tape")
        adjoint: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = adjoint.pop(node, None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = adjoint.get(parent)
                adjoint[parent] = pg if acc is None else acc + pg
            node.grad = g if node.grad is None else node.grad + g
        for leaf, g in adjoint.items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g


class Tensor:
    """A float64 array plus optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def std(self, axis=None, keepdims=False):
        return tstd(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def parameter(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, vjp) -> Tensor:
    tape = _active_tape()
    out = Tensor(data)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._tape = tape
        tape._nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gdim, sdim) in enumerate(zip(g.shape, shape)):
        if sdim == 1 and gdim != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- primitives ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data
    return _record(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                            _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data
    return _record(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                            _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data
    return _record(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    data = a.data / b.data
    return _record(data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.data.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires operands with ndim >= 2")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _record(data, (a, b), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(data, tuple(tensors), vjp)


def softmax_row(x) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (x,), vjp)


def relu(x) -> Tensor:
    x = _wrap(x)
    data = np.maximum(x.data, 0.0)
    return _record(data, (x,), lambda g: (g * (x.data > 0.0),))


def tanh(x) -> Tensor:
    x = _wrap(x)
    data = np.tanh(x.data)
    return _record(data, (x,), lambda g: (g * (1.0 - data * data),))


def exp(x) -> Tensor:
    x = _wrap(x)
    data = np.exp(x.data)
    return _record(data, (x,), lambda g: (g * data,))


def log(x) -> Tensor:
    x = _wrap(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    data = np.log(x.data)
    return _record(data, (x,), lambda g: (g / x.data,))


def _axis_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


def _expand_reduced(g, shape, axis, keepdims):
    """Reshape a reduced-axis gradient back to broadcastable form."""
    if axis is None or keepdims:
        return g
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    return np.expand_dims(g, axes)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = _expand_reduced(np.asarray(g), x.data.shape, axis, keepdims)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _record(data, (x,), vjp)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    n = _axis_count(x.data.shape, axis)

    def vjp(g):
        g = _expand_reduced(np.asarray(g), x.data.shape, axis, keepdims)
        return (np.broadcast_to(g / n, x.data.shape).copy(),)

    return _record(data, (x,), vjp)


def tstd(x, axis=None, keepdims=False) -> Tensor:
    """Population standard deviation with an epsilon guard under the root.

    std = sqrt(mean((x - mu)^2) + STD_EPS); the guard keeps the gradient
    finite on constant inputs.
    """
    x = _wrap(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    std_k = np.sqrt(var + STD_EPS)
    if keepdims:
        data = std_k
    elif axis is None:
        data = std_k.reshape(())
    else:
        data = np.squeeze(std_k, axis=axis)
    n = _axis_count(x.data.shape, axis)

    def vjp(g):
        g = _expand_reduced(np.asarray(g), x.data.shape, axis, keepdims)
        return (g * centered / (n * std_k),)

    return _record(data, (x,), vjp)


def transpose(x, axes=None) -> Tensor:
    x = _wrap(x)
    data = x.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _record(data, (x,), vjp)


def swapaxes(x, a: int, b: int) -> Tensor:
    x = _wrap(x)
    data = x.data.swapaxes(a, b)
    return _record(data, (x,), lambda g: (g.swapaxes(a, b),))


def reshape(x, *shape) -> Tensor:
    x = _wrap(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = x.data.reshape(shape)
    return _record(data, (x,), lambda g: (g.reshape(x.data.shape),))


def take(x, key) -> Tensor:
    """Indexing/slicing; the backward pass scatter-adds into the source shape."""
    x = _wrap(x)
    data = np.array(x.data[key])

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _record(data, (x,), vjp)


def logsumexp_row(x) -> Tensor:
    """log(sum(exp(x))) along the last axis, max-shifted for stability."""
    x = _wrap(x)
    shift = constant(x.data.max(axis=-1, keepdims=True))
    s = tsum(exp(sub(x, shift)), axis=-1)
    return add(log(s), constant(np.squeeze(shift.data, axis=-1)))


# -- gradient checking and optimizers ------------------------------------


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def gradient_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps the (mutated in place) params to a scalar Tensor and must be
    deterministic. Error per entry is |analytic - central| / max(1, |central|).
    """
    saved = [p.grad for p in params]
    zero_grads(params)
    with Tape() as tape:
        loss = f(params)
        if not np.isfinite(loss.data).all():
            raise NumericalFailure("loss is not finite")
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    zero_grads(params)
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(params).data)
            flat[i] = orig - eps
            down = float(f(params).data)
            flat[i] = orig
            central = (up - down) / (2.0 * eps)
            if not (np.isfinite(central) and np.isfinite(ana.reshape(-1)[i])):
                raise NumericalFailure("non-finite value in gradient check")
            err = abs(ana.reshape(-1)[i] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst


def sgd_step(params, lr: float) -> None:
    """Plain momentum-free SGD update in place."""
    for p in params:
        if p.grad is None:
            continue
        if not np.isfinite(p.grad).all():
            raise NumericalFailure("non-finite gradient in sgd_step")
        p.data -= lr * p.grad


def adam_init(params) -> dict:
    return {
        "t": 0,
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def adam_step(params, state: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """Standard Adam update in place; state carries the moment estimates."""
    state["t"] += 1
    t = state["t"]
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericalFailure("non-finite gradient in adam_step")
        state["m"][i] = beta1 * state["m"][i] + (1.0 - beta1) * g
        state["v"][i] = beta2 * state["v"][i] + (1.0 - beta2) * g * g
        m_hat = state["m"][i] / (1.0 - beta1 ** t)
        v_hat = state["v"][i] / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state
