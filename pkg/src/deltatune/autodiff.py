"""Small reverse-mode differentiation engine over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient.  ``backward`` replays the recorded adjoint
functions in reverse order and accumulates into ``Tensor.grad`` of leaves.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ParamSet",
    "ShapeError",
    "add",
    "tsum",
    "mul",
    "sum_squares",
    "reshape",
    "linear_forward",
    "conv2d_forward",
    "conv_columns",
    "batchnorm_forward",
    "conv2d_sum",
    "batchnorm_sum",
    "relu",
    "alpha_blend",
    "softmax_cross_entropy",
    "backward",
    "sgd_momentum_step",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_active = threading.local()


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded on it.  Nested tapes shadow the outer one.
    """

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._outputs: set[int] = set()
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_active, "tape", None)
        _active.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _active.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def record(self, inputs: Sequence[Tensor], output: Tensor, adjoint: Callable) -> None:
        self._records.append((tuple(inputs), output, adjoint))
        self._outputs.add(id(output))

    def records(self) -> Iterator[tuple[tuple[Tensor, ...], Tensor, Callable]]:
        return iter(self._records)

    def clear(self) -> None:
        self._records.clear()
        self._outputs.clear()


def active_tape() -> Optional[Tape]:
    return getattr(_active, "tape", None)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(inputs, out, adjoint)
    return out


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# --------------------------------------------------------------------------
# elementwise / reductions


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check(a.shape == b.shape, f"add: shapes {a.shape} and {b.shape} differ")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check(a.shape == b.shape, f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_squares(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _emit(np.array(np.sum(ad * ad)), (a,), lambda g: (2.0 * g * ad,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)
    return _emit(out, (a,), lambda g: (g.reshape(old),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# layers


def linear_forward(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (n, d_in)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    _check(
        x.data.ndim == 2 and weight.data.ndim == 2 and x.shape[1] == weight.shape[0],
        f"linear: input shape {x.shape} does not match weight shape {weight.shape}",
    )
    _check(
        bias.shape == (weight.shape[1],),
        f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}",
    )
    xd, wd = x.data, weight.data

    def adjoint(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _emit(xd @ wd + bias.data, (x, weight, bias), adjoint)


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (n, c, H, W) -> (n, oh, ow, c, k, k)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv_columns(x, kernel_size: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """im2col matrix of shape (n * oh * ow, c * k * k) for ``x`` (n, c, h, w)."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c = xd.shape[:2]
    return _im2col(xd, kernel_size, stride).reshape(-1, c * kernel_size * kernel_size)


def conv2d_forward(x, kernel, bias, stride: int = 1, padding: int = 0, cols: Optional[np.ndarray] = None) -> Tensor:
    """Cross-correlation of (n, c_in, h, w) input with (c_out, c_in, k, k) kernel.

    ``cols`` may carry a precomputed :func:`conv_columns` of ``x`` so that
    several kernels applied to one input share it.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    _check(x.data.ndim == 4 and kernel.data.ndim == 4, f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    co, ci, k, k2 = kernel.shape
    _check(ci == c and k == k2, f"conv2d: input shape {x.shape} does not match kernel shape {kernel.shape}")
    _check(bias.shape == (co,), f"conv2d: bias shape {bias.shape} does not match kernel shape {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    _check(k <= hp and k <= wp, f"conv2d: kernel {k}x{k} larger than padded input {hp}x{wp}")
    oh, ow = (hp - k) // stride + 1, (wp - k) // stride + 1

    if cols is None:
        cols = conv_columns(x, k, stride, padding)
    wmat = kernel.data.reshape(co, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)

    def adjoint(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
        gk = (gcols.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gcols.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray((gcols @ wmat).reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2))
            gxp = np.zeros((n, c, hp, wp))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk, gb

    return _emit(np.ascontiguousarray(out), (x, kernel, bias), adjoint)


def _bn_normalize(x: Tensor, affine: Sequence[Tensor], running_mean, running_var, eps: float):
    mu = np.asarray(running_mean, dtype=np.float64)
    var = np.asarray(running_var, dtype=np.float64)
    _check(x.data.ndim >= 2, f"batchnorm: input needs a channel axis, got shape {x.shape}")
    c = x.shape[1]
    for t in affine:
        _check(t.shape == (c,), f"batchnorm: parameter shape {t.shape} does not match input shape {x.shape}")
    for name, arr in (("running_mean", mu), ("running_var", var)):
        _check(arr.shape == (c,), f"batchnorm: {name} shape {arr.shape} does not match input shape {x.shape}")
    if np.any(var < 0):
        raise ValueError("batchnorm: running variance must be non-negative")
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    return xhat, inv, bshape, (0,) + tuple(range(2, x.data.ndim))


def batchnorm_forward(x, scale, shift, running_mean, running_var, eps: float = 1e-5) -> Tensor:
    """Inference-mode normalization with the supplied statistics.

    Channels live on axis 1; ``x`` may be (n, c) or (n, c, h, w).
    """
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    xhat, inv, bshape, axes = _bn_normalize(x, (scale, shift), running_mean, running_var, eps)
    out = scale.data.reshape(bshape) * xhat + shift.data.reshape(bshape)

    def adjoint(g):
        gx = g * (scale.data * inv).reshape(bshape) if x.requires_grad else None
        gs = (g * xhat).sum(axis=axes) if scale.requires_grad else None
        gb = g.sum(axis=axes) if shift.requires_grad else None
        return gx, gs, gb

    return _emit(out, (x, scale, shift), adjoint)


def conv2d_sum(x, base: tuple, delta: tuple, stride: int = 1, padding: int = 0) -> Tensor:
    """``conv2d(x, *base) + conv2d(x, *delta)`` sharing im2col and the input adjoint."""
    x = _as_tensor(x)
    kb, bb = (_as_tensor(t) for t in base)
    kd, bd = (_as_tensor(t) for t in delta)
    _check(kb.shape == kd.shape and bb.shape == bd.shape,
           f"conv2d_sum: kernel shapes {kb.shape} and {kd.shape} differ")
    cols = conv_columns(x, kb.shape[2], stride, padding)
    with _no_record():
        yb = conv2d_forward(x, kb, bb, stride, padding, cols)
        yd = conv2d_forward(x, kd, bd, stride, padding, cols)
    n, c, h, w = x.shape
    co, _, k, _ = kb.shape
    oh, ow = yb.shape[2:]
    hp, wp = h + 2 * padding, w + 2 * padding
    wsum = None

    def adjoint(g):
        nonlocal wsum
        gcols = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
        gw = (gcols.T @ cols).reshape(kb.shape) if (kb.requires_grad or kd.requires_grad) else None
        gb = gcols.sum(axis=0) if (bb.requires_grad or bd.requires_grad) else None
        gx = None
        if x.requires_grad:
            if wsum is None:
                wsum = kb.data.reshape(co, -1) + kd.data.reshape(co, -1)
            dcols = np.ascontiguousarray((gcols @ wsum).reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2))
            gxp = np.zeros((n, c, hp, wp))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb, gw, gb

    return _emit(yb.data + yd.data, (x, kb, bb, kd, bd), adjoint)


def batchnorm_sum(x, base: tuple, delta: tuple, running_mean, running_var, eps: float = 1e-5) -> Tensor:
    """``batchnorm(x, *base) + batchnorm(x, *delta)`` with the shared statistics."""
    x = _as_tensor(x)
    sb, hb = (_as_tensor(t) for t in base)
    sd, hd = (_as_tensor(t) for t in delta)
    xhat, inv, bshape, axes = _bn_normalize(x, (sb, hb, sd, hd), running_mean, running_var, eps)
    out = (sb.data.reshape(bshape) * xhat + hb.data.reshape(bshape)) + (sd.data.reshape(bshape) * xhat + hd.data.reshape(bshape))

    def adjoint(g):
        gx = g * ((sb.data + sd.data) * inv).reshape(bshape) if x.requires_grad else None
        gs = (g * xhat).sum(axis=axes)
        gh = g.sum(axis=axes)
        return gx, gs, gh, gs, gh

    return _emit(out, (x, sb, hb, sd, hd), adjoint)


class _no_record:
    """Temporarily disable recording on the active tape."""

    def __enter__(self):
        self._prev = getattr(_active, "tape", None)
        _active.tape = None

    def __exit__(self, *exc):
        _active.tape = self._prev


def alpha_blend(a, b, blend_logit) -> Tensor:
    """``sigmoid(l) * a + (1 - sigmoid(l)) * b`` with a scalar logit ``l``."""
    a, b, blend_logit = _as_tensor(a), _as_tensor(b), _as_tensor(blend_logit)
    _check(a.shape == b.shape, f"alpha_blend: shapes {a.shape} and {b.shape} differ")
    _check(blend_logit.size == 1, f"alpha_blend: blend logit must be scalar, got {blend_logit.shape}")
    l = blend_logit.data.reshape(-1)[0]
    alpha = 1.0 / (1.0 + np.exp(-l))
    ad, bd = a.data, b.data

    def adjoint(g):
        gl = np.full(blend_logit.shape, alpha * (1.0 - alpha) * np.sum(g * (ad - bd)))
        return g * alpha, g * (1.0 - alpha), gl

    return _emit(alpha * ad + (1.0 - alpha) * bd, (a, b, blend_logit), adjoint)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    _check(logits.data.ndim == 2, f"cross-entropy: logits must be (n, C), got {logits.shape}")
    n, num_classes = logits.shape
    _check(labels.shape == (n,), f"cross-entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"cross-entropy: labels must lie in [0, {num_classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsumexp - z[rows, labels])

    def adjoint(g):
        p = np.exp(z - logsumexp[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _emit(np.array(loss), (logits,), adjoint)


# --------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor, params: Optional["ParamSet"] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    When ``params`` is given, trainable entries that the loss does not reach
    get a zero gradient so optimizers can treat all of them uniformly.
    """
    if loss not in tape:
        raise ValueError("backward: loss was not produced on this tape")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for inputs, out, fn in reversed(tape._records):
        g = adj.pop(id(out), None)
        if g is None:
            continue
        for t, gt in zip(inputs, fn(g)):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if t not in tape:
                leaves[key] = t
            adj[key] = adj[key] + gt if key in adj else gt
    for key, t in leaves.items():
        g = adj[key].reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    if params is not None:
        for name, t in params.items():
            if params.trainable[name] and t.grad is None:
                t.zero_grad()


# --------------------------------------------------------------------------
# parameters and optimizer


class ParamSet:
    """Ordered, uniquely named parameter tensors plus non-trainable buffers.

    ``buffers`` hold batchnorm running statistics; they are plain arrays and
    never receive gradients.
    """

    def __init__(self, entries=None, trainable: bool = True, buffers=None):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.trainable: dict[str, bool] = {}
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, value in (entries or {}).items():
            self.add(name, value, trainable)
        for name, value in (buffers or {}).items():
            self.buffers[name] = np.asarray(value, dtype=np.float64)

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = trainable
        self.entries[name] = t
        self.trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def names(self) -> list[str]:
        return list(self.entries)

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.entries.items()}

    def copy(self, trainable: Optional[bool] = None) -> "ParamSet":
        out = ParamSet()
        for name, t in self.entries.items():
            out.add(name, t.data.copy(), self.trainable[name] if trainable is None else trainable)
        out.buffers = OrderedDict((k, v.copy()) for k, v in self.buffers.items())
        return out

    def zeros_like(self, trainable: bool = True) -> "ParamSet":
        out = ParamSet()
        for name, t in self.entries.items():
            out.add(name, np.zeros_like(t.data), trainable)
        return out

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def flat(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self.entries.values()])

    def equal(self, other: "ParamSet") -> bool:
        """Bit-exact equality of names, shapes, values and buffers."""
        if self.names() != other.names() or list(self.buffers) != list(other.buffers):
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self) and all(
            np.array_equal(self.buffers[k], other.buffers[k]) for k in self.buffers
        )


def sgd_momentum_step(params: ParamSet, velocity: ParamSet, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """Heavy-ball SGD with coupled weight decay, in place; clears grads."""
    for name, p in params.items():
        if not params.trainable[name]:
            continue
        if p.grad is None:
            raise ValueError(f"sgd: trainable entry {name!r} has no gradient")
        v = velocity[name]
        if v.shape != p.shape:
            raise ShapeError(f"sgd: velocity shape {v.shape} does not match {name!r} shape {p.shape}")
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        v.data = momentum * v.data + d
        p.data = p.data - lr * v.data
        p.grad = None


def iter_trainable(params: ParamSet) -> Iterable[tuple[str, Tensor]]:
    return ((k, t) for k, t in params.items() if params.trainable[k])
