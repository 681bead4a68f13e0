"""Layers, initialization, Adam and per-layer gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from sedlm import kernels
from sedlm.tensor import (
    ShapeError, Tensor, UsageError, add, add_bias, conv2d, matmul, maxpool2d, mul,
    record, relu, sigmoid, split_features, sub, tanh,
)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def init_params(shape, fan_in: int, fan_out: int, seed, dtype=np.float32, name=None) -> Tensor:
    """Glorot-uniform samples in ``+-sqrt(6 / (fan_in + fan_out))``."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    data = _rng(seed).uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def zeros_param(shape, dtype=np.float32, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def ones_param(shape, dtype=np.float32, name=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)


@dataclass
class CnnBlock:
    conv_w: Tensor
    conv_b: Tensor
    bn_scale: Tensor
    bn_shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    dropout: float = 0.25
    out_dropout: float = 0.0

    def __post_init__(self):
        for p in (self.dropout, self.out_dropout):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"dropout rate {p} outside [0, 1]")

    @classmethod
    def create(cls, cin, cout, rng, dtype=np.float32, dropout=0.25, out_dropout=0.0, kernel=5):
        k2 = kernel * kernel
        return cls(
            conv_w=init_params((cout, cin, kernel, kernel), cin * k2, cout * k2, rng, dtype),
            conv_b=zeros_param(cout, dtype),
            bn_scale=ones_param(cout, dtype),
            bn_shift=zeros_param(cout, dtype),
            running_mean=np.zeros(cout, dtype=dtype),
            running_var=np.ones(cout, dtype=dtype),
            dropout=dropout,
            out_dropout=out_dropout,
        )

    def params(self) -> Dict[str, Tensor]:
        return {"conv.w": self.conv_w, "conv.b": self.conv_b,
                "bn.scale": self.bn_scale, "bn.shift": self.bn_shift}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"bn.running_mean": self.running_mean, "bn.running_var": self.running_var}


@dataclass
class GruCell:
    """GRU whose input weights ``w`` stack the feature rows then ``cond_size`` conditioning rows.

    Gate blocks along the last axis are ordered (update, reset, candidate).
    """
    w: Tensor   # [Din, 3H]
    u: Tensor   # [H, 3H]
    b: Tensor   # [3H]
    cond_size: int = 0

    @property
    def hidden_size(self) -> int:
        return self.u.shape[0]

    @property
    def input_size(self) -> int:
        return self.w.shape[0]

    @property
    def feature_size(self) -> int:
        return self.input_size - self.cond_size

    @classmethod
    def create(cls, din, hidden, rng, dtype=np.float32, cond_size=0):
        return cls(
            w=init_params((din, 3 * hidden), din, hidden, rng, dtype),
            u=init_params((hidden, 3 * hidden), hidden, hidden, rng, dtype),
            b=zeros_param(3 * hidden, dtype),
            cond_size=cond_size,
        )

    def params(self) -> Dict[str, Tensor]:
        return {"w": self.w, "u": self.u, "b": self.b}


@dataclass
class Linear:
    w: Tensor   # [H, C]
    b: Tensor   # [C]

    @classmethod
    def create(cls, din, dout, rng, dtype=np.float32):
        return cls(w=init_params((din, dout), din, dout, rng, dtype), b=zeros_param(dout, dtype))

    def params(self) -> Dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode."""
    if not train or rate == 0.0:
        return x
    if rate >= 1.0:
        return mul(x, Tensor(np.zeros_like(x.data)))
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return mul(x, Tensor(mask))


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, train: bool, momentum=BN_MOMENTUM, eps=BN_EPS) -> Tensor:
    """Per-channel normalization of ``[B, C, T, F]`` over batch, time and frequency.

    Train mode uses batch statistics and updates the running ones in place.
    """
    axes = (0, 2, 3)
    view = (1, -1, 1, 1)
    d = x.data
    if train:
        n = d.size // d.shape[1]
        mean = d.mean(axis=axes)
        var = d.var(axis=axes)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= (1 - momentum)
        running_mean += momentum * mean
        running_var *= (1 - momentum)
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mean.reshape(view)) * inv.reshape(view)
    out = xhat * scale.data.reshape(view) + shift.data.reshape(view)
    out = out.astype(d.dtype, copy=False)
    xhat = xhat.astype(d.dtype, copy=False)

    def bwd(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        dxhat = g * scale.data.reshape(view)
        if train:
            n = d.size // d.shape[1]
            s1 = dxhat.sum(axis=axes).reshape(view)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(view)
            gx = (inv.reshape(view) / n) * (n * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv.reshape(view)
        return gx.astype(d.dtype, copy=False), gscale, gshift

    return record("batchnorm", (x, scale, shift), out, bwd)


def cnn_block_forward(x: Tensor, block: CnnBlock, pool, train: bool,
                      rng: Optional[np.random.Generator] = None) -> Tensor:
    """dropout -> conv 5x5 -> batch norm -> ReLU -> max-pool (-> output dropout)."""
    if x.shape[3] % pool[1]:
        raise ShapeError(f"cnn block: frequency size {x.shape[3]} not divisible by pool {pool[1]}")
    h = dropout(x, block.dropout, rng, train)
    h = conv2d(h, block.conv_w, block.conv_b, stride=1, pad=block.conv_w.shape[2] // 2)
    h = batchnorm(h, block.bn_scale, block.bn_shift, block.running_mean, block.running_var, train)
    h = maxpool2d(relu(h), pool)
    return dropout(h, block.out_dropout, rng, train)


def gru_step(cell: GruCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU step from tape primitives (reference for the fused unroll)."""
    if x_t.shape[-1] != cell.input_size or h_prev.shape[-1] != cell.hidden_size:
        raise ShapeError(
            f"gru_step: got x {x_t.shape}, h {h_prev.shape} for a cell "
            f"with input {cell.input_size} and hidden {cell.hidden_size}")
    H = cell.hidden_size
    a = add_bias(matmul(x_t, cell.w), cell.b)
    a_zr, a_n = split_features(a, 2 * H)
    a_z, a_r = split_features(a_zr, H)
    u_zr, u_n = split_features(cell.u, 2 * H)
    hz, hr = split_features(matmul(h_prev, u_zr), H)
    z = sigmoid(add(a_z, hz))
    r = sigmoid(add(a_r, hr))
    n = tanh(add(a_n, matmul(mul(r, h_prev), u_n)))
    one = Tensor(np.ones(z.shape, dtype=z.dtype))
    return add(mul(sub(one, z), h_prev), mul(z, n))


def linear_sigmoid(h: Tensor, layer: Linear) -> Tensor:
    return sigmoid(add_bias(matmul(h, layer.w), layer.b))


def gru_classifier_unroll(xproj: Tensor, cond_w: Optional[Tensor], u: Tensor, out: Linear,
                          y_true: Optional[np.ndarray], truth: Optional[np.ndarray],
                          binarize: bool, backend=None):
    """Fused GRU + classifier recurrence over ``T`` steps.

    ``xproj`` is the feature part of the gate pre-activations, ``[B, T, 3H]``
    (biases included). With ``cond_w`` set, the activity vector fed into step
    ``t`` is ``y_true[:, t-1]`` where ``truth[:, t-1]`` is set and the model's
    own (optionally binarized) prediction otherwise; it enters as a constant.

    Returns ``(yhat, hidden)`` with ``hidden`` of shape ``[B, T, H]``.
    """
    impl = kernels.get_backend(backend)
    B, T, G = xproj.shape
    dt = xproj.dtype
    C = out.w.shape[1]
    if cond_w is None:
        wc_data = np.zeros((0, G), dtype=dt)
        y_true = np.zeros((B, T, C), dtype=dt)
        truth = np.zeros((B, T), dtype=np.uint8)
    else:
        wc_data = cond_w.data
        if y_true is None:
            y_true = np.zeros((B, T, cond_w.shape[0]), dtype=dt)
            truth = np.zeros((B, T), dtype=np.uint8)
        if y_true.shape != (B, T, cond_w.shape[0]):
            raise ShapeError(f"unroll: activities {y_true.shape} do not match {(B, T, cond_w.shape[0])}")
    yt = np.ascontiguousarray(y_true, dtype=dt)
    tr = np.ascontiguousarray(truth, dtype=np.uint8)
    yhat, hs, zs, rs, ns, ycond = impl.forward(
        np.ascontiguousarray(xproj.data), np.ascontiguousarray(wc_data), u.data,
        out.w.data, out.b.data, yt, tr, bool(binarize))

    def bwd(g):
        dx, dwc, du, dwo, dbo = impl.backward(
            np.ascontiguousarray(g, dtype=dt), yhat, hs, zs, rs, ns, ycond, wc_data, u.data, out.w.data)
        if cond_w is None:
            return dx, du, dwo, dbo
        return dx, dwc, du, dwo, dbo

    inputs = (xproj, u, out.w, out.b) if cond_w is None else (xproj, cond_w, u, out.w, out.b)
    yhat_t = record("gru_unroll", inputs, yhat, bwd)
    return yhat_t, hs[:, 1:]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_update(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """One bias-corrected Adam step, in place; missing gradients count as zero."""
    if len(params) != len(grads):
        raise UsageError(f"adam_update: {len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise UsageError("adam_update: optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype, copy=False)


def clip_grad_l2(layer_grads: Sequence[Optional[np.ndarray]], max_norm: float = 0.5) -> list:
    """Rescale one layer's gradients so their joint l2 norm is at most ``max_norm``."""
    present = [g for g in layer_grads if g is not None]
    norm = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in present))
    if norm <= max_norm:
        return list(layer_grads)
    factor = max_norm / norm
    return [None if g is None else (g * factor).astype(g.dtype, copy=False) for g in layer_grads]
