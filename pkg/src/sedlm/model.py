"""CRNN for sound event detection, optionally conditioned on previous activities."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np

from sedlm import nn
from sedlm.schedule import ActivitySelector
from sedlm.tensor import (
    ShapeError, Tensor, add_bias, matmul, record, reshape, take_rows, transpose,
)

CONDITIONING = ("off", "ground_truth", "scheduled", "predictions")
PRED_CLAMP = 1e-7


@dataclass
class ModelConfig:
    n_classes: int = 6
    n_mels: int = 40
    cnn_filters: int = 128
    gru_hidden: int = 128
    pool_plan: Tuple[Tuple[int, int], ...] = ((1, 5), (1, 4), (1, 2))
    conditioning: str = "off"
    binarize_conditioning: bool = False
    dropout: float = 0.25
    dtype: str = "float32"

    def __post_init__(self):
        self.pool_plan = tuple(tuple(int(v) for v in p) for p in self.pool_plan)
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"conditioning must be one of {CONDITIONING}, got {self.conditioning!r}")
        prod = int(np.prod([p[1] for p in self.pool_plan]))
        if prod != self.n_mels:
            raise ValueError(
                f"pool plan {self.pool_plan} reduces {prod} frequency bins to one, but n_mels={self.n_mels}")
        if any(p[0] != 1 for p in self.pool_plan):
            raise ValueError("pooling along time would change the frame rate; use kt=1")

    @property
    def conditioned(self) -> bool:
        return self.conditioning != "off"

    def fingerprint(self) -> int:
        """64-bit hash of everything that fixes parameter shapes and semantics."""
        text = ";".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


@dataclass
class SedModel:
    config: ModelConfig
    blocks: List[nn.CnnBlock]
    gru: nn.GruCell
    fnn: nn.Linear

    @classmethod
    def create(cls, config: ModelConfig, seed=0) -> "SedModel":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        dt = np.dtype(config.dtype)
        blocks = []
        cin = 1
        n = len(config.pool_plan)
        for k in range(n):
            blocks.append(nn.CnnBlock.create(
                cin, config.cnn_filters, rng, dt, dropout=config.dropout,
                out_dropout=config.dropout if k == n - 1 else 0.0))
            cin = config.cnn_filters
        cond = config.n_classes if config.conditioned else 0
        gru = nn.GruCell.create(config.cnn_filters + cond, config.gru_hidden, rng, dt, cond_size=cond)
        fnn = nn.Linear.create(config.gru_hidden, config.n_classes, rng, dt)
        return cls(config, blocks, gru, fnn)

    def layers(self) -> Dict[str, Dict[str, Tensor]]:
        out = {f"cnn{k}": b.params() for k, b in enumerate(self.blocks)}
        out["gru"] = self.gru.params()
        out["fnn"] = self.fnn.params()
        return out

    def params(self) -> Dict[str, Tensor]:
        return {f"{layer}.{name}": t for layer, ps in self.layers().items() for name, t in ps.items()}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"cnn{k}.{name}": a for k, b in enumerate(self.blocks) for name, a in b.buffers().items()}

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.grad = None


def _check_features(model: SedModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != model.config.n_mels:
        raise ShapeError(f"features must be [B, T, {model.config.n_mels}], got {X.shape}")
    return X.astype(model.config.dtype, copy=False)


def _encode(model: SedModel, X: np.ndarray, train: bool, rng) -> Tensor:
    """CNN stack: ``[B, T, F]`` -> ``[B, T, filters]``."""
    B, T, F = X.shape
    h = Tensor(X.reshape(B, 1, T, F))
    for block, pool in zip(model.blocks, model.config.pool_plan):
        h = nn.cnn_block_forward(h, block, pool, train, rng)
    h = reshape(h, (B, model.config.cnn_filters, T))
    return transpose(h, (0, 2, 1))


def _run(model, X, Y, truth, train, rng, backend):
    cfg = model.config
    feats = _encode(model, X, train, rng)
    nf = cfg.cnn_filters
    if cfg.conditioned:
        w_feat = take_rows(model.gru.w, 0, nf)
        w_cond = take_rows(model.gru.w, nf, model.gru.input_size)
    else:
        w_feat, w_cond = model.gru.w, None
    xproj = add_bias(matmul(feats, w_feat), model.gru.b)
    yhat, _ = nn.gru_classifier_unroll(
        xproj, w_cond, model.gru.u, model.fnn, Y, truth, cfg.binarize_conditioning, backend)
    return yhat


def forward_baseline(model: SedModel, X, train: bool = False, rng=None, backend=None) -> Tensor:
    """Activity probabilities ``[B, T, C]`` of the unconditioned CRNN."""
    if model.config.conditioned:
        raise ValueError("forward_baseline needs a model with conditioning off")
    X = _check_features(model, X)
    return _run(model, X, None, None, train, rng, backend)


def forward_teacher_forced(model: SedModel, X, Y, selector: ActivitySelector,
                           train: bool = False, rng=None, backend=None) -> Tensor:
    """Probabilities with the previous step's activities fed into the GRU.

    ``selector`` decides per sequence and step whether the ground truth or
    the model's own prediction is fed back.
    """
    if not model.config.conditioned:
        raise ValueError("forward_teacher_forced needs a conditioned model")
    X = _check_features(model, X)
    Y = np.asarray(Y, dtype=X.dtype)
    if Y.ndim == 2:
        Y = Y[None]
    if Y.shape != X.shape[:2] + (model.config.n_classes,):
        raise ShapeError(f"event roll {Y.shape} does not match features {X.shape} with C={model.config.n_classes}")
    truth = selector.draw_mask(X.shape[0], X.shape[1])
    return _run(model, X, Y, truth, train, rng, backend)


def forward(model: SedModel, X, Y=None, selector=None, train=False, rng=None, backend=None) -> Tensor:
    """Dispatch on the model's conditioning mode; without a selector, predictions are fed back."""
    if not model.config.conditioned:
        return forward_baseline(model, X, train, rng, backend)
    if selector is None or Y is None:
        X = _check_features(model, X)
        return _run(model, X, None, None, train, rng, backend)
    return forward_teacher_forced(model, X, Y, selector, train, rng, backend)


def bce_loss(yhat: Tensor, Y, mask=None) -> Tensor:
    """Binary cross-entropy summed over classes, averaged over valid frames.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]`` before the logs; the
    gradient passes the clamp unchanged so saturated wrong outputs still learn.
    """
    Y = np.asarray(Y)
    if Y.ndim == 2:
        Y = Y[None]
    if Y.shape != yhat.shape:
        raise ShapeError(f"bce_loss: targets {Y.shape} vs predictions {yhat.shape}")
    if not np.all((Y == 0) | (Y == 1)):
        raise ValueError("bce_loss: targets must be binary")
    dt = yhat.dtype
    Y = Y.astype(dt)
    if mask is None:
        m = np.ones(Y.shape[:-1], dtype=dt)
    else:
        m = np.asarray(mask, dtype=dt).reshape(Y.shape[:-1])
    n_valid = float(m.sum())
    p = np.clip(yhat.data, PRED_CLAMP, 1 - PRED_CLAMP)
    per = -(Y * np.log(p) + (1 - Y) * np.log(1 - p))
    denom = max(n_valid, 1.0)
    value = np.asarray((per.sum(axis=-1) * m).sum() / denom, dtype=dt)

    def bwd(g):
        d = (-(Y / p) + (1 - Y) / (1 - p)) * m[..., None] / denom
        return ((g * d).astype(dt),)

    return record("bce", (yhat,), value, bwd)


def infer(model: SedModel, X, threshold: float = 0.5, backend=None):
    """Eval-mode probabilities and the thresholded roll (``>= threshold`` is active)."""
    yhat = forward(model, X, train=False, backend=backend)
    probs = yhat.data
    return probs, (probs >= threshold).astype(np.uint8)
