"""Small reverse-mode autodiff tape over dense numpy arrays, plus Adam.

Every trainable model in the package is written against the fixed op set on
:class:`Tape`. Values are float64; a tape is used for exactly one
forward/backward pass.

    tape = Tape()
    w = tape.param(np.ones((3, 2)), "w")
    x = tape.const(np.eye(3))
    loss = tape.sum(tape.tanh(tape.matmul(x, w)))
    grads = backward(tape, loss)      # {"w": array of shape (3, 2)}
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericDomainError

LOG_CLAMP = 1e-12


class Tensor:
    """A value recorded on a tape. ``data`` is never mutated after creation."""

    __slots__ = ("data", "id", "name")

    def __init__(self, data: np.ndarray, id: int, name: str | None = None):
        self.data = data
        self.id = id
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor#{self.id}{tag} shape={self.shape}>"


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericDomainError(f"non-finite values in {what}")


class Tape:
    """Records ops in execution order; ``backward`` walks them in reverse.

    ``Tape(record=False)`` evaluates the same ops eagerly without keeping the
    graph, which is how inference reuses the training forward code.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._values: list[np.ndarray] = []
        # per node: (input ids, closure mapping output grad -> input grads) or None for leaves
        self._ops: list[tuple[tuple[int, ...], object] | None] = []
        self._params: dict[str, int] = {}

    def __len__(self):
        return len(self._values)

    def _record(self, value, inputs=(), grad_fn=None, name=None) -> Tensor:
        if not self.record:
            return Tensor(value, -1, name)
        idx = len(self._values)
        self._values.append(value)
        self._ops.append((tuple(t.id for t in inputs), grad_fn) if grad_fn is not None else None)
        return Tensor(value, idx, name)

    def _own(self, *tensors: Tensor):
        if not self.record:
            return
        for t in tensors:
            if not isinstance(t, Tensor) or t.id >= len(self._values) or self._values[t.id] is not t.data:
                raise InvalidArgument(f"{t!r} was not recorded on this tape")

    # -- leaves -----------------------------------------------------------------

    def param(self, data, name: str) -> Tensor:
        """A leaf whose gradient is reported by :func:`backward` under ``name``."""
        if name in self._params:
            raise InvalidArgument(f"parameter {name!r} already on tape")
        if not self.record:
            return Tensor(np.asarray(data, dtype=np.float64), -1, name)
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, f"parameter {name!r}")
        t = self._record(arr, name=name)
        self._params[name] = t.id
        return t

    def const(self, data) -> Tensor:
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "constant input")
        return self._record(arr)

    @property
    def param_names(self) -> list[str]:
        return list(self._params)

    # -- ops --------------------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        self._own(a, b)
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise InvalidArgument(f"matmul shapes {a.shape} @ {b.shape}")
        A, B = a.data, b.data
        return self._record(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))

    def transpose(self, a: Tensor) -> Tensor:
        self._own(a)
        if a.data.ndim != 2:
            raise InvalidArgument(f"transpose needs a matrix, got {a.shape}")
        return self._record(a.data.T, (a,), lambda g: (g.T,))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise sum; ``b`` may also be a vector added to every row of ``a``."""
        self._own(a, b)
        if a.shape == b.shape:
            return self._record(a.data + b.data, (a, b), lambda g: (g, g))
        if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
            return self._record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
        raise InvalidArgument(f"add shapes {a.shape} + {b.shape}")

    def reshape(self, a: Tensor, shape: tuple) -> Tensor:
        self._own(a)
        old = a.shape
        try:
            out = a.data.reshape(shape)
        except ValueError as exc:
            raise InvalidArgument(f"cannot reshape {old} to {shape}") from exc
        return self._record(out, (a,), lambda g: (g.reshape(old),))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        self._own(a, b)
        if a.shape != b.shape:
            raise InvalidArgument(f"mul shapes {a.shape} * {b.shape}")
        A, B = a.data, b.data
        return self._record(A * B, (a, b), lambda g: (g * B, g * A))

    def scale(self, a: Tensor, c: float) -> Tensor:
        self._own(a)
        c = float(c)
        if not np.isfinite(c):
            raise NumericDomainError("non-finite scale factor")
        return self._record(a.data * c, (a,), lambda g: (g * c,))

    def tanh(self, a: Tensor) -> Tensor:
        self._own(a)
        y = np.tanh(a.data)
        return self._record(y, (a,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self, a: Tensor) -> Tensor:
        self._own(a)
        # split by sign so exp never overflows
        x = a.data
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self._record(y, (a,), lambda g: (g * y * (1.0 - y),))

    def relu(self, a: Tensor) -> Tensor:
        self._own(a)
        mask = a.data > 0
        return self._record(a.data * mask, (a,), lambda g: (g * mask,))

    def softmax(self, a: Tensor) -> Tensor:
        """Softmax over the last axis (each row of a matrix)."""
        self._own(a)
        if a.data.size == 0 or a.shape[-1] == 0:
            raise InvalidArgument("softmax over an empty row")
        z = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)

        def grad(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._record(y, (a,), grad)

    def sum(self, a: Tensor, axis: int | None = None) -> Tensor:
        self._own(a)
        shape = a.shape
        if axis is None:
            return self._record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
        out = a.data.sum(axis=axis)
        return self._record(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))

    def mean(self, a: Tensor, axis: int | None = None) -> Tensor:
        n = a.data.size if axis is None else a.shape[axis]
        return self.scale(self.sum(a, axis), 1.0 / n)

    def rowmax(self, a: Tensor) -> Tensor:
        """Max over the last axis; ties resolve to the lowest index."""
        self._own(a)
        if a.data.ndim != 2 or a.shape[1] == 0:
            raise InvalidArgument(f"rowmax needs a non-empty matrix, got {a.shape}")
        idx = a.data.argmax(axis=1)
        rows = np.arange(a.shape[0])
        shape = a.shape

        def grad(g):
            out = np.zeros(shape)
            out[rows, idx] = g
            return (out,)

        return self._record(a.data[rows, idx], (a,), grad)

    def concat(self, parts: list[Tensor], axis: int = -1) -> Tensor:
        self._own(*parts)
        if not parts:
            raise InvalidArgument("concat of nothing")
        try:
            out = np.concatenate([p.data for p in parts], axis=axis)
        except ValueError as exc:
            raise InvalidArgument(f"concat shapes {[p.shape for p in parts]}") from exc
        bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
        return self._record(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))

    def gather_rows(self, a: Tensor, index) -> Tensor:
        self._own(a)
        idx = np.asarray(index, dtype=np.int64)
        if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
            raise InvalidArgument(f"row index out of range for {a.shape}")
        shape = a.shape

        def grad(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return self._record(a.data[idx], (a,), grad)

    def mse(self, pred: Tensor, target: Tensor) -> Tensor:
        """Mean over all entries of (pred - target)**2."""
        self._own(pred, target)
        if pred.shape != target.shape:
            raise InvalidArgument(f"mse shapes {pred.shape} vs {target.shape}")
        diff = pred.data - target.data
        n = diff.size
        return self._record(np.asarray(np.mean(diff * diff)), (pred, target),
                            lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))

    def nll(self, probs: Tensor, labels) -> Tensor:
        """Mean of -log p[label] over rows; probabilities are clamped at 1e-12."""
        self._own(probs)
        P = probs.data if probs.data.ndim == 2 else probs.data[None, :]
        y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if y.shape[0] != P.shape[0]:
            raise InvalidArgument(f"{y.shape[0]} labels for {P.shape[0]} rows")
        if y.min() < 0 or y.max() >= P.shape[1]:
            raise InvalidArgument(f"label out of range for {P.shape[1]} classes")
        if P.min() < 0.0 or P.max() > 1.0 + 1e-9:
            raise NumericDomainError("nll probabilities outside [0, 1]")
        rows = np.arange(P.shape[0])
        picked = P[rows, y]
        clamped = np.maximum(picked, LOG_CLAMP)
        n = P.shape[0]
        shape = probs.shape

        def grad(g):
            out = np.zeros(P.shape)
            out[rows, y] = np.where(picked > LOG_CLAMP, -g / (n * clamped), 0.0)
            return (out.reshape(shape),)

        return self._record(np.asarray(-np.log(clamped).mean()), (probs,), grad)

    # -- composites -------------------------------------------------------------

    def linear(self, x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
        """x @ weight.T (+ bias); weights are stored (out, in)."""
        out = self.matmul(x, self.transpose(weight))
        return out if bias is None else self.add(out, bias)

    def silu(self, a: Tensor) -> Tensor:
        return self.mul(a, self.sigmoid(a))


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every parameter on ``tape``.

    Parameters the loss does not depend on get zero gradients.
    """
    if not tape.record:
        raise InvalidArgument("backward on a tape that did not record")
    tape._own(loss)
    if loss.data.size != 1:
        raise InvalidArgument(f"loss must be scalar, got shape {loss.shape}")
    _check_finite(loss.data, "loss")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for idx in range(loss.id, -1, -1):
        g = grads.get(idx)
        op = tape._ops[idx]
        if g is None or op is None:
            continue
        inputs, fn = op
        for src, gin in zip(inputs, fn(g)):
            if src in grads:
                grads[src] = grads[src] + gin
            else:
                grads[src] = gin
        if idx != loss.id:
            del grads[idx]
    return {name: np.asarray(grads.get(i, np.zeros_like(tape._values[i])), dtype=np.float64).reshape(tape._values[i].shape)
            for name, i in tape._params.items()}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. ``params`` arrays are updated in place and returned."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise InvalidArgument(f"gradient for {name!r} missing or mis-shaped")
        if name in state.m and state.m[name].shape != p.shape:
            raise InvalidArgument(f"optimizer state for {name!r} has shape {state.m[name].shape}")
    state.k += 1
    bc1 = 1.0 - state.beta1 ** state.k
    bc2 = 1.0 - state.beta2 ** state.k
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def finite_difference_grad(fn, params: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of the scalar ``fn(params)``; the oracle for gradient checks."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(fn(params))
            flat[i] = old - h
            down = float(fn(params))
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def max_relative_error(a: dict[str, np.ndarray], b: dict[str, np.ndarray], floor: float = 1e-6) -> float:
    """max |a - b| / max(|a|, |b|, floor) over all entries of all keys."""
    worst = 0.0
    for name in a:
        x, y = a[name], b[name]
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst
