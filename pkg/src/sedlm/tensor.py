"""Dense tensors with reverse-mode differentiation over an explicit tape.

Operations record themselves on the innermost active :class:`Tape`. Outside
a tape nothing is recorded, which is how inference runs.

    >>> with Tape() as tape:
    ...     loss = tsum(x * x)
    >>> backward(tape, loss)
"""
from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError", "DomainError", "UsageError",
    "Tensor", "Tape", "backward", "record", "active_tape", "as_tensor",
    "matmul", "add", "sub", "mul", "add_bias", "tsum", "scale",
    "reshape", "transpose", "take_rows", "concat_features", "split_features",
    "elementwise", "sigmoid", "tanh", "relu", "log", "exp",
    "conv2d", "maxpool2d", "stable_sigmoid",
]

_DEBUG = bool(os.environ.get("SEDLM_DEBUG"))


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class Tensor:
    """An n-dimensional array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> Optional[Tape]:
    st = _stack()
    return st[-1] if st else None


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` and register the node if any input needs a gradient."""
    if _DEBUG and not np.all(np.isfinite(out_data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise UsageError("backward was already run on this tape")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise UsageError("loss was not produced on this tape")
    tape.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key].astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g


def _same_shape(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[..., m, k]`` by ``[k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a2 = a.data.reshape(-1, a.shape[-1])
    out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

    def bwd(g):
        g2 = g.reshape(-1, b.shape[1])
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return record("matmul", (a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along ``axis``; the only broadcasting the core allows."""
    x, bias = as_tensor(x), as_tensor(bias)
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return record("add_bias", (x, bias), x.data + bias.data.reshape(view),
                  lambda g: (g, g.sum(axis=others)))


def tsum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full_like(x.data, g),))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return record("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                  lambda g: (g.transpose(inv),))


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a matrix, with the gradient scattered back."""
    x = as_tensor(x)

    def bwd(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return record("take_rows", (x,), x.data[start:stop].copy(), bwd)


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis; leading dimensions must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_features: leading dims of {a.shape} and {b.shape} differ")
    da = a.shape[-1]
    return record("concat", (a, b), np.concatenate([a.data, b.data], axis=-1),
                  lambda g: (g[..., :da], g[..., da:]))


def split_features(x: Tensor, at: int) -> tuple:
    x = as_tensor(x)
    n = x.shape[-1]
    if not 0 < at < n:
        raise ShapeError(f"split_features: split point {at} outside (0, {n})")

    def left_bwd(g):
        full = np.zeros_like(x.data)
        full[..., :at] = g
        return (full,)

    def right_bwd(g):
        full = np.zeros_like(x.data)
        full[..., at:] = g
        return (full,)

    left = record("split", (x,), x.data[..., :at].copy(), left_bwd)
    right = record("split", (x,), x.data[..., at:].copy(), right_bwd)
    return left, right


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -x))


def elementwise(x: Tensor, f: str) -> Tensor:
    x = as_tensor(x)
    d = x.data
    if f == "sigmoid":
        y = stable_sigmoid(d)
        return record(f, (x,), y, lambda g: (g * y * (1 - y),))
    if f == "tanh":
        y = np.tanh(d)
        return record(f, (x,), y, lambda g: (g * (1 - y * y),))
    if f == "relu":
        y = np.maximum(d, 0)
        return record(f, (x,), y, lambda g: (g * (d > 0),))
    if f == "log":
        if np.any(d <= 0):
            raise DomainError("log of a non-positive value; clamp inputs first")
        return record(f, (x,), np.log(d), lambda g: (g / d,))
    if f == "exp":
        y = np.exp(d)
        return record(f, (x,), y, lambda g: (g * y,))
    raise ValueError(f"unknown elementwise function {f!r}")


def sigmoid(x):
    return elementwise(x, "sigmoid")


def tanh(x):
    return elementwise(x, "tanh")


def relu(x):
    return elementwise(x, "relu")


def log(x):
    return elementwise(x, "log")


def exp(x):
    return elementwise(x, "exp")


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, pad: int = 2) -> Tensor:
    """2-D cross-correlation with zero padding, ``[B,Cin,T,F] -> [B,Cout,T',F']``."""
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    B, cin, T, F = x.shape
    cout, wcin, kt, kf = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel {w.shape} expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    if stride != 1:
        raise ShapeError("conv2d: only stride 1 is supported")
    To, Fo = T + 2 * pad - kt + 1, F + 2 * pad - kf + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kf), axis=(2, 3))
    # [B, To, Fo, Cin, kt, kf] -> rows of length Cin*kt*kf
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * To * Fo, -1)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(B, To, Fo, cout)
    out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, To, Fo, cin, kt, kf)
            gxp = np.zeros_like(xp)
            for i in range(kt):
                for j in range(kf):
                    gxp[:, :, i:i + To, j:j + Fo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + T, pad:pad + F]
        return gx, gw, gb

    return record("conv2d", (x, w, bias), out, bwd)


def maxpool2d(x: Tensor, kernel) -> Tensor:
    """Non-overlapping max pooling; ties go to the lowest flat index of the window."""
    x = as_tensor(x)
    kt, kf = kernel
    B, C, T, F = x.shape
    if T % kt or F % kf:
        raise ShapeError(
            f"maxpool2d: input {T}x{F} must be divisible by the kernel {kt}x{kf}")
    To, Fo = T // kt, F // kf
    win = x.data.reshape(B, C, To, kt, Fo, kf).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, To, Fo, kt * kf)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros((B, C, To, Fo, kt * kf), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, To, Fo, kt, kf).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, T, F)
        return (gx,)

    return record("maxpool2d", (x,), out, bwd)
