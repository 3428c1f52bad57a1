"""Minimal reverse-mode autodiff over dense numpy tensors.

Ops are recorded on a Tape; backward() replays the records in reverse and
accumulates gradients additively into every reachable tensor, so fan-out is
handled by summation.  One tape per forward pass; parameters are plain
Tensors reused across tapes.
"""

import numpy as np

from .errors import ConfigError, DimensionError, NumericsError


class Tensor:
    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=float)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def huber_value(pred, target, delta=1.0):
    """Mean elementwise Huber penalty of pred vs target (no tape)."""
    if delta <= 0.0:
        raise ConfigError(f"huber threshold must be positive, got {delta}")
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DimensionError(
            f"huber: shapes {pred.shape} and {target.shape} differ"
        )
    e = pred - target
    a = np.abs(e)
    val = np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))
    mean = float(val.mean()) if val.size else 0.0
    if not np.isfinite(mean):
        raise NumericsError("non-finite loss value")
    return mean


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tape:
    def __init__(self):
        self._records = []
        self._produced = set()

    def _record(self, out, bwd):
        self._records.append(bwd)
        self._produced.add(id(out))
        return out

    def _accum(self, t, g):
        g = _unbroadcast(np.asarray(g, dtype=float), t.data.shape)
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g

    def tensor(self, data):
        return Tensor(data)

    @staticmethod
    def _combine(op, a, b):
        try:
            return np.broadcast_shapes(a.data.shape, b.data.shape)
        except ValueError:
            raise DimensionError(
                f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
            ) from None

    # -- elementwise / structural ops ------------------------------------

    def add(self, a, b):
        self._combine("add", a, b)
        out = Tensor(a.data + b.data)
        def bwd():
            if out.grad is None:
                return
            self._accum(a, out.grad)
            self._accum(b, out.grad)
        return self._record(out, bwd)

    def sub(self, a, b):
        self._combine("sub", a, b)
        out = Tensor(a.data - b.data)
        def bwd():
            if out.grad is None:
                return
            self._accum(a, out.grad)
            self._accum(b, -out.grad)
        return self._record(out, bwd)

    def mul(self, a, b):
        self._combine("mul", a, b)
        out = Tensor(a.data * b.data)
        def bwd():
            if out.grad is None:
                return
            self._accum(a, out.grad * b.data)
            self._accum(b, out.grad * a.data)
        return self._record(out, bwd)

    def scale(self, a, c):
        c = float(c)
        out = Tensor(a.data * c)
        def bwd():
            if out.grad is None:
                return
            self._accum(a, out.grad * c)
        return self._record(out, bwd)

    def relu(self, a):
        mask = a.data > 0
        out = Tensor(np.where(mask, a.data, 0.0))
        def bwd():
            if out.grad is None:
                return
            self._accum(a, out.grad * mask)
        return self._record(out, bwd)

    def reshape(self, a, shape):
        try:
            out = Tensor(a.data.reshape(shape))
        except ValueError:
            raise DimensionError(
                f"reshape: cannot view {a.data.shape} as {shape}"
            ) from None
        def bwd():
            if out.grad is None:
                return
            self._accum(a, out.grad.reshape(a.data.shape))
        return self._record(out, bwd)

    def transpose(self, a):
        """Swap the last two axes."""
        if a.data.ndim < 2:
            raise DimensionError("transpose needs at least 2 dimensions")
        out = Tensor(np.swapaxes(a.data, -1, -2))
        def bwd():
            if out.grad is None:
                return
            self._accum(a, np.swapaxes(out.grad, -1, -2))
        return self._record(out, bwd)

    def gather_rows(self, a, idx):
        idx = np.asarray(idx, dtype=int)
        out = Tensor(a.data[idx])
        def bwd():
            if out.grad is None:
                return
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            self._accum(a, g)
        return self._record(out, bwd)

    # -- contractions -----------------------------------------------------

    def matmul(self, a, b):
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise DimensionError(
                f"matmul needs matrices, got shapes {a.data.shape} and {b.data.shape}"
            )
        try:
            out = Tensor(a.data @ b.data)
        except ValueError as e:
            raise DimensionError(f"matmul: {e}") from None
        def bwd():
            if out.grad is None:
                return
            self._accum(a, out.grad @ np.swapaxes(b.data, -1, -2))
            self._accum(b, np.swapaxes(a.data, -1, -2) @ out.grad)
        return self._record(out, bwd)

    def quad_form_batch(self, v, pack):
        """Rows of v (batch, n_state) -> all measurements (batch, n_meter)."""
        if v.data.ndim != 2 or v.data.shape[1] != pack.n_state:
            raise DimensionError(
                f"quad_form_batch expects (batch, {pack.n_state}), got {v.data.shape}"
            )
        out = Tensor(pack.values_batch(v.data))
        def bwd():
            if out.grad is None:
                return
            self._accum(v, pack.vjp_batch(v.data, out.grad))
        return self._record(out, bwd)

    # -- reductions / losses ----------------------------------------------

    def sumsq(self, a):
        out = Tensor(np.sum(a.data * a.data))
        def bwd():
            if out.grad is None:
                return
            self._accum(a, 2.0 * float(out.grad) * a.data)
        return self._record(out, bwd)

    def huber(self, pred, target, delta=1.0):
        """Mean elementwise Huber penalty with threshold delta."""
        if delta <= 0.0:
            raise ConfigError(f"huber threshold must be positive, got {delta}")
        if pred.data.shape != target.data.shape:
            raise DimensionError(
                f"huber: shapes {pred.data.shape} and {target.data.shape} differ"
            )
        e = pred.data - target.data
        a = np.abs(e)
        small = a <= delta
        val = np.where(small, 0.5 * e * e, delta * (a - 0.5 * delta))
        mean = val.mean() if val.size else 0.0
        if not np.isfinite(mean):
            raise NumericsError("non-finite loss value")
        out = Tensor(mean)
        size = max(e.size, 1)
        def bwd():
            if out.grad is None:
                return
            de = np.where(small, e, delta * np.sign(e)) / size
            g = float(out.grad) * de
            self._accum(pred, g)
            self._accum(target, -g)
        return self._record(out, bwd)

    # -- reverse pass -------------------------------------------------------

    def backward(self, loss):
        if loss.data.shape != ():
            raise DimensionError("backward expects a scalar loss")
        if id(loss) not in self._produced:
            raise ConfigError("backward target was not produced by this tape")
        loss.grad = np.ones(())
        for bwd in reversed(self._records):
            bwd()


class Adam:
    """Adam with bias correction over a list of parameter Tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient in parameter {i}")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
