"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every primitive here does three things: compute the forward value with
numpy, verify the result is finite, and (when a tape is active and some
input tracks gradients) record an adjoint closure on the tape.  Calling
``Tape.backward`` replays those closures in exact reverse order, each
exactly once, accumulating into ``Tensor.grad``.

Tensors are float64 and row-major throughout.  There is no graph
optimization and no implicit global tape: code that wants gradients runs
inside ``with Tape() as tape:`` and calls ``tape.backward(loss)``.
Separate tapes are independent, so disjoint evaluations may run on
concurrent threads; a single tape is strictly single-threaded.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import BatchSizeError, DimensionError, NonFiniteError


class Tensor:
    """A dense float64 array plus an optional gradient accumulator.

    ``data`` is immutable by convention once the tensor has been consumed
    by an op; the two sanctioned mutations are gradient accumulation
    during backward and in-place parameter updates by an optimizer that
    owns the tensor.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match value shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _OpRecord:
    __slots__ = ("name", "inputs", "output", "adjoint")

    def __init__(self, name, inputs, output, adjoint):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.adjoint = adjoint


class Tape:
    """Ordered record of executed primitives for one reverse pass.

    Construction order is topological by construction: an op can only
    reference tensors that already exist.  ``backward`` walks the record
    in reverse, invoking each adjoint exactly once.
    """

    _stack = threading.local()

    def __init__(self):
        self.ops: list[_OpRecord] = []

    def __enter__(self) -> "Tape":
        stack = getattr(Tape._stack, "tapes", None)
        if stack is None:
            stack = Tape._stack.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._stack.tapes.pop()
        return False

    @staticmethod
    def current() -> "Tape | None":
        stack = getattr(Tape._stack, "tapes", None)
        return stack[-1] if stack else None

    def backward(self, output: Tensor, seed: np.ndarray | None = None):
        """Accumulate d(output)/d(leaf) into every tensor reachable on tape.

        ``seed`` defaults to ones, i.e. gradients of ``sum(output)``.
        """
        if seed is None:
            seed = np.ones_like(output.data)
        output.accumulate_grad(seed)
        for record in reversed(self.ops):
            g = record.output.grad
            if g is None:
                continue
            record.adjoint(g)


def _check_finite(name: str, value: np.ndarray):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"op '{name}' produced a non-finite value")


def _emit(name, inputs, out_data, adjoint_builder) -> Tensor:
    """Finish a primitive: finite-check, wrap, and record on the tape."""
    _check_finite(name, out_data)
    out = Tensor(out_data)
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append(_OpRecord(name, inputs, out, adjoint_builder(out)))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def adjoint_builder(out):
        def adjoint(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.shape))

        return adjoint

    return _emit("add", (a, b), out_data, adjoint_builder)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def adjoint_builder(out):
        def adjoint(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

        return adjoint

    return _emit("mul", (a, b), out_data, adjoint_builder)


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    out_data = x.data * s

    def adjoint_builder(out):
        def adjoint(g):
            if x.requires_grad:
                x.accumulate_grad(g * s)

        return adjoint

    return _emit("scale", (x,), out_data, adjoint_builder)


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def adjoint_builder(out):
        def adjoint(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)

        return adjoint

    return _emit("matmul", (a, b), out_data, adjoint_builder)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d operand, got {x.shape}")
    out_data = x.data.T

    def adjoint_builder(out):
        def adjoint(g):
            if x.requires_grad:
                x.accumulate_grad(g.T)

        return adjoint

    return _emit("transpose", (x,), out_data, adjoint_builder)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def adjoint_builder(out):
        def adjoint(g):
            if x.requires_grad:
                x.accumulate_grad(g.reshape(x.shape))

        return adjoint

    return _emit("reshape", (x,), out_data, adjoint_builder)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def adjoint_builder(out):
        def adjoint(g):
            if x.requires_grad:
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                x.accumulate_grad(np.broadcast_to(g, x.shape).copy())

        return adjoint

    return _emit("sum", (x,), out_data, adjoint_builder)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    x = as_tensor(x)
    if x.data.size == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def adjoint_builder(out):
        def adjoint(g):
            if x.requires_grad:
                s = out.data
                inner = (g * s).sum(axis=axis, keepdims=True)
                x.accumulate_grad(s * (g - inner))

        return adjoint

    return _emit("softmax", (x,), out_data, adjoint_builder)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # evaluate each branch only where it is stable
    out_data = np.where(
        x.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x.data))),
        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))),
    )

    def adjoint_builder(out):
        def adjoint(g):
            if x.requires_grad:
                s = out.data
                x.accumulate_grad(g * s * (1.0 - s))

        return adjoint

    return _emit("sigmoid", (x,), out_data, adjoint_builder)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def adjoint_builder(out):
        def adjoint(g):
            if x.requires_grad:
                x.accumulate_grad(g * (x.data > 0.0))

        return adjoint

    return _emit("relu", (x,), out_data, adjoint_builder)


def pow_scalar(x, p: float) -> Tensor:
    """Elementwise x**p for a fixed scalar exponent.

    Non-integer exponents require strictly positive inputs; callers add
    their own epsilon before taking roots.
    """
    x = as_tensor(x)
    p = float(p)
    out_data = np.power(x.data, p)

    def adjoint_builder(out):
        def adjoint(g):
            if x.requires_grad:
                x.accumulate_grad(g * p * np.power(x.data, p - 1.0))

        return adjoint

    return _emit("pow", (x,), out_data, adjoint_builder)


def gather_rows(x, indices) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if x.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-d operand, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"row index out of range for shape {x.shape}")
    out_data = x.data[idx]

    def adjoint_builder(out):
        def adjoint(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                np.add.at(gx, idx, g)
                x.accumulate_grad(gx)

        return adjoint

    return _emit("gather_rows", (x,), out_data, adjoint_builder)


def concat_rows(tensors) -> Tensor:
    """Stack 2-d tensors vertically (shared column count)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat_rows of an empty list")
    cols = {t.shape[1] for t in tensors}
    if any(t.ndim != 2 for t in tensors) or len(cols) != 1:
        raise DimensionError("concat_rows expects 2-d operands with equal column counts")
    out_data = np.concatenate([t.data for t in tensors], axis=0)

    def adjoint_builder(out):
        def adjoint(g):
            offset = 0
            for t in tensors:
                n = t.shape[0]
                if t.requires_grad:
                    t.accumulate_grad(g[offset : offset + n])
                offset += n

        return adjoint

    return _emit("concat_rows", tuple(tensors), out_data, adjoint_builder)


def cross_entropy_with_logits(logits, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer class labels.

    `logits` is (B, C); `labels` is a length-B integer array.  Returns a
    scalar tensor (mean or sum over the batch).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DimensionError("label index out of range")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    per_sample = logsumexp - shifted[np.arange(batch), labels]
    out_data = per_sample.mean() if reduction == "mean" else per_sample.sum()

    def adjoint_builder(out):
        def adjoint(g):
            if logits.requires_grad:
                probs = np.exp(shifted)
                probs /= probs.sum(axis=1, keepdims=True)
                probs[np.arange(batch), labels] -= 1.0
                if reduction == "mean":
                    probs /= batch
                logits.accumulate_grad(float(g) * probs)

        return adjoint

    return _emit("cross_entropy", (logits,), np.float64(out_data), adjoint_builder)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Learned scale/shift plus running statistics for one feature width."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.eps = eps
        self.momentum = momentum


def batchnorm(x, state: BatchNormState, mode: str) -> Tensor:
    """Per-feature standardization of a (B, F) batch.

    Train mode standardizes by batch statistics (biased variance) and
    updates the running statistics by exponential moving average; eval
    mode standardizes by the running statistics, which keeps the map
    affine and per-episode deterministic.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"batchnorm expects a 2-d batch, got {x.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise BatchSizeError("train-mode batchnorm needs a batch of at least 2")
        mean = tmean(x, axis=0, keepdims=True)
        centered = sub(x, mean)
        var = tmean(mul(centered, centered), axis=0, keepdims=True)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean.data.ravel()
        state.running_var = (1 - m) * state.running_var + m * var.data.ravel()
        inv_std = pow_scalar(add(var, Tensor(np.full(var.shape, state.eps))), -0.5)
        xhat = mul(centered, inv_std)
    elif mode == "eval":
        mean = Tensor(state.running_mean)
        inv_std = Tensor(1.0 / np.sqrt(state.running_var + state.eps))
        xhat = mul(sub(x, mean), inv_std)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    return add(mul(xhat, state.gamma), state.beta)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b); w is (in, out), b broadcasts over rows."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out
