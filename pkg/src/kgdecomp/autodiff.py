"""A small reverse-mode differentiation engine over float64 numpy arrays.

Only the operations needed by the bilinear scorers and the decompression
networks are provided. Every op is a plain function returning a new
:class:`Tensor`; calling :meth:`Tensor.backward` on a scalar result
accumulates gradients into the ``grad`` buffers of leaf tensors created with
``requires_grad=True``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericalError, ShapeError

NORM_EPS = 1e-12

# rows skipped by l2_normalize because their norm was below NORM_EPS
degenerate_rows = 0


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Wrap an op result. ``backward(g)`` returns one gradient (or None) per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        stack.extend((p, False) for p in node._parents if id(p) not in seen)
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data * b.data, (a, b),
                          lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor.from_op(np.sum(x.data, axis=axis), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return Tensor.from_op(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return Tensor.from_op(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]``; backward scatters into the table."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(table.data[index], (table,), backward)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return Tensor.from_op(x.data[..., start:stop], (x,), backward)


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[start:stop]``."""
    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return Tensor.from_op(x.data[start:stop], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                          lambda g: tuple(np.split(g, bounds, axis=axis)))


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b.T``) for 2-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    bm = b.data.T if transpose_b else b.data
    if a.shape[1] != bm.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {bm.shape}")

    def backward(g):
        ga = g @ bm.T
        gb = a.data.T @ g
        return ga, (gb.T if transpose_b else gb)

    return Tensor.from_op(a.data @ bm, (a, b), backward)


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Explicit-output einsum without repeated indices inside an operand.

    Every index of an operand must occur in the output or in another operand,
    so each gradient is itself an einsum.
    """
    operands = tuple(as_tensor(t) for t in operands)
    inputs, output = subscripts.replace(" ", "").split("->")
    in_subs = inputs.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError("einsum operand count mismatch")
    for i, sub_i in enumerate(in_subs):
        others = set(output).union(*(set(s) for j, s in enumerate(in_subs) if j != i))
        if not set(sub_i) <= others:
            raise ShapeError(f"einsum index in {sub_i!r} is summed within a single operand")
    try:
        data = np.einsum(subscripts, *(t.data for t in operands))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        grads = []
        for i, sub_i in enumerate(in_subs):
            if not operands[i].requires_grad:
                grads.append(None)
                continue
            spec = ",".join([output] + [s for j, s in enumerate(in_subs) if j != i]) + "->" + sub_i
            grads.append(np.einsum(spec, g, *(t.data for j, t in enumerate(operands) if j != i)))
        return grads

    return Tensor.from_op(data, operands, backward)


# --------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (d_in, d_out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match output width {weight.shape[1]}")
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Single-input-channel 1-D convolution, stride 1, zero "same" padding.

    ``x`` is (batch, 1, length), ``kernels`` is (channels, 1, ksize); the output
    is (batch, channels, length). Padding is ``(ksize - 1) // 2`` on the left
    and the remainder on the right.
    """
    if x.ndim != 3 or x.shape[1] != 1:
        raise ShapeError(f"conv1d expects input (batch, 1, length), got {x.shape}")
    if kernels.ndim != 3 or kernels.shape[1] != 1:
        raise ShapeError(f"conv1d expects kernels (channels, 1, ksize), got {kernels.shape}")
    batch, _, length = x.shape
    channels, _, ksize = kernels.shape
    left = (ksize - 1) // 2
    right = ksize - 1 - left
    if ksize > length + left + right:
        raise ShapeError("conv1d kernel longer than padded input")
    if bias is not None and bias.shape != (channels,):
        raise ShapeError(f"conv1d bias {bias.shape} does not match {channels} channels")
    padded = np.pad(x.data[:, 0, :], ((0, 0), (left, right)))
    windows = sliding_window_view(padded, ksize, axis=1)  # (batch, length, ksize)
    k2 = kernels.data[:, 0, :]
    out = np.einsum("btu,cu->bct", windows, k2)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward(g):
        gk = np.einsum("bct,btu->cu", g, windows)[:, None, :]
        gpad = np.zeros_like(padded)
        for u in range(ksize):
            gpad[:, u:u + length] += np.einsum("bct,c->bt", g, k2[:, u])
        gx = gpad[:, left:left + length][:, None, :]
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gk, gb

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return Tensor.from_op(out, parents, backward)


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics.

    Running variance uses the unbiased batch estimate; normalization in
    training mode uses the biased one.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(Tensor(np.ones(channels), requires_grad=True), Tensor(np.zeros(channels), requires_grad=True),
                   np.zeros(channels), np.ones(channels), momentum, eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize per channel; input is (batch, channels) or (batch, channels, length)."""
    if x.ndim not in (2, 3) or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm over {state.channels} channels got input {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    gamma = state.gamma.data.reshape(bshape)
    beta = state.beta.data.reshape(bshape)

    if not training:
        scale = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * scale.reshape(bshape)

        def backward_eval(g):
            return (g * gamma * scale.reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes))

        return Tensor.from_op(gamma * xhat + beta, (x, state.gamma, state.beta), backward_eval)

    n = x.data.size // state.channels
    if n < 2:
        raise ShapeError("batchnorm in training mode needs at least 2 values per channel")
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * invstd
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mu.reshape(-1)
    state.running_var = (1 - m) * state.running_var + m * var.reshape(-1) * n / (n - 1)

    def backward(g):
        dxhat = g * gamma
        gx = invstd / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                           - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor.from_op(gamma * xhat + beta, (x, state.gamma, state.beta), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def l2_normalize(x: Tensor) -> Tensor:
    """Divide each row of a 2-D tensor by its Euclidean norm (differentiable).

    Rows with norm below ``NORM_EPS`` pass through unchanged and bump the
    module-level ``degenerate_rows`` counter.
    """
    global degenerate_rows
    norms = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True))
    small = norms < NORM_EPS
    if small.any():
        degenerate_rows += int(small.sum())
    safe = np.where(small, 1.0, norms)
    y = x.data / safe

    def backward(g):
        proj = np.where(small, 0.0, (g * y).sum(axis=1, keepdims=True))
        return ((g - y * proj) / safe,)

    return Tensor.from_op(y, (x,), backward)


def normalize_rows_(table: np.ndarray, start: int = 0, stop: int | None = None) -> int:
    """In-place unit-norm projection of ``table[start:stop]``; returns rows skipped."""
    block = table[start:stop]
    norms = np.sqrt((block ** 2).sum(axis=1, keepdims=True))
    small = norms < NORM_EPS
    block /= np.where(small, 1.0, norms)
    return int(small.sum())


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[int, int] = field(default=(-1, -1))  # (input index, flat coordinate)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> GradCheckResult:
    """Compare ``backward`` against central finite differences.

    ``f`` maps the input tensors to a scalar tensor and must be deterministic
    (fix dropout masks by reseeding inside ``f``). The relative error per
    coordinate uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError("grad_check needs a scalar function")
    out.backward()
    worst, where = 0.0, (-1, -1)
    for i, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            plus = f(*inputs).item()
            flat[j] = orig - eps
            minus = f(*inputs).item()
            flat[j] = orig
            numeric = (plus - minus) / (2 * eps)
            a = analytic.reshape(-1)[j]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NumericalError(f"non-finite gradient at input {i}, coordinate {j}")
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst, where = err, (i, j)
    return GradCheckResult(worst, where)
