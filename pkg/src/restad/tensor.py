"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy array, and a Tape
records every differentiable operation executed while it is active.  Calling
``Tape.backward`` on a scalar loss walks the recorded operations in reverse
and accumulates gradients into the ``grad`` buffer of every tensor created
with ``requires_grad=True``.

Operations append to the tape in execution order, so the tape is already
topologically sorted; the backward pass visits each operation exactly once.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DimensionError

_ACTIVE = threading.local()


def _active_tape():
    stack = getattr(_ACTIVE, "stack", None)
    if stack:
        return stack[-1]
    return None


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def reset_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; operations executed inside the block are
    recorded when any of their inputs participates in differentiation
    (either requires_grad or produced earlier on this tape).  A tape is
    confined to a single thread.
    """

    def __init__(self):
        self._ops = []        # (inputs, output, backward_fn)
        self._produced = set()  # id() of tensors created on this tape

    def __enter__(self):
        stack = getattr(_ACTIVE, "stack", None)
        if stack is None:
            stack = []
            _ACTIVE.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.stack.pop()
        return False

    def _record(self, inputs, out, backward_fn):
        self._ops.append((inputs, out, backward_fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(tensor) into .grad of every requires_grad leaf.

        Idempotent after reset_grad: repeating the call adds the same
        contributions again, so two runs with a reset in between produce
        bit-identical gradients.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {tuple(loss.data.shape)}"
            )
        grads = {id(loss): np.ones_like(loss.data)}
        for inputs, out, backward_fn in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            contribs = backward_fn(g)
            for t, c in zip(inputs, contribs):
                if c is None:
                    continue
                if t.requires_grad:
                    t.grad += c
                if id(t) in self._produced:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + c
                    else:
                        grads[key] = c


def _emit(inputs, out_data, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(
        t.requires_grad or id(t) in tape._produced for t in inputs
    ):
        tape._record(tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting expanded."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul: incompatible shapes {tuple(a.data.shape)} and {tuple(b.data.shape)}"
        )
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(
            f"matmul: incompatible shapes {tuple(a.data.shape)} and {tuple(b.data.shape)}"
        ) from e

    def backward(g):
        ga = _unbroadcast(np.matmul(g, _swap_last(b.data)), a.data.shape)
        gb = _unbroadcast(np.matmul(_swap_last(a.data), g), b.data.shape)
        return ga, gb

    return _emit((a, b), out, backward)


def _binary(a: Tensor, b: Tensor, fn, da, db, name: str) -> Tensor:
    try:
        out = fn(a.data, b.data)
    except ValueError as e:
        raise DimensionError(
            f"{name}: shapes {tuple(a.data.shape)} and {tuple(b.data.shape)} do not broadcast"
        ) from e

    def backward(g):
        return (
            _unbroadcast(da(g), a.data.shape),
            _unbroadcast(db(g), b.data.shape),
        )

    return _emit((a, b), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda g: g, lambda g: g, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(
        a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data, "mul"
    )


def negate(a: Tensor) -> Tensor:
    return _emit((a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit((a,), out, lambda g: (g * out,))


def square(a: Tensor) -> Tensor:
    return _emit((a,), a.data * a.data, lambda g: (g * (2.0 * a.data),))


def scale_by_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit((a,), a.data * s, lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit((a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(i % a.data.ndim for i in ax)
            shape = [1 if i in ax else n for i, n in enumerate(a.data.shape)]
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _emit((a,), out, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(
            f"softmax: axis {axis} invalid for shape {tuple(a.data.shape)}"
        )
    # attention softmaxes dominate the training step, so this op works in
    # a single scratch buffer instead of one temporary per ufunc
    y = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def backward(g):
        tmp = g * y
        dot = tmp.sum(axis=axis, keepdims=True)
        np.subtract(g, dot, out=tmp)
        tmp *= y
        return (tmp,)

    return _emit((a,), y, backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    w = a.data.shape[-1]
    if gain.data.shape != (w,) or bias.data.shape != (w,):
        raise DimensionError(
            f"layer_norm: gain {tuple(gain.data.shape)} / bias {tuple(bias.data.shape)}"
            f" must match last dimension ({w},) of input {tuple(a.data.shape)}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        n = float(w)
        da = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).reshape(-1, w).sum(axis=0)
        dbias = g.reshape(-1, w).sum(axis=0)
        return da, dgain, dbias

    return _emit((a, gain, bias), out, backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _emit((a,), a.data.reshape(shape), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(
        (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),)
    )


def pairwise_sq_dist(h: Tensor, c: Tensor, chunk: int = 64) -> Tensor:
    """Squared euclidean distance from every row of h to every row of c.

    h: [..., k], c: [m, k] -> out: [..., m].  The forward pass uses an
    explicit difference so that the distance is exactly zero when a point
    coincides with a center (the expansion ||h||^2 - 2hc + ||c||^2 does not
    guarantee that under floating point cancellation).  The backward pass
    avoids materializing the [..., m, k] difference.
    """
    if c.data.ndim != 2 or h.data.shape[-1] != c.data.shape[-1]:
        raise DimensionError(
            f"pairwise_sq_dist: input {tuple(h.data.shape)} and centers"
            f" {tuple(c.data.shape)} disagree on the feature dimension"
        )
    m = c.data.shape[0]
    out = np.empty(h.data.shape[:-1] + (m,))
    for start in range(0, m, chunk):
        stop = min(start + chunk, m)
        diff = h.data[..., None, :] - c.data[start:stop]
        out[..., start:stop] = np.einsum("...mk,...mk->...m", diff, diff)

    def backward(g):
        k = h.data.shape[-1]
        gh = 2.0 * (h.data * g.sum(axis=-1, keepdims=True) - g @ c.data)
        g2 = g.reshape(-1, m)
        h2 = h.data.reshape(-1, k)
        gc = 2.0 * (c.data * g2.sum(axis=0)[:, None] - g2.T @ h2)
        return gh, gc

    return _emit((h, c), out, backward)
