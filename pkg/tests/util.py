"""Shared builders for the test suite."""
import numpy as np

from sedlm.model import ModelConfig, SedModel
from sedlm.tensor import Tensor

TINY = dict(n_classes=2, cnn_filters=4, gru_hidden=4, dtype="float64")


def tiny_model(seed=0, conditioning="off", **kw) -> SedModel:
    return SedModel.create(ModelConfig(**{**TINY, "conditioning": conditioning, **kw}), seed=seed)


def conditioned_twin(model: SedModel, conditioning="scheduled") -> SedModel:
    """Conditioned copy of a baseline model whose conditioning rows are zero."""
    cfg = ModelConfig(**{**model.config.__dict__, "conditioning": conditioning})
    twin = SedModel.create(cfg, seed=0)
    for name, p in model.params().items():
        q = twin.params()[name]
        if name == "gru.w":
            q.data[:] = 0.0
            q.data[:p.shape[0]] = p.data
        else:
            q.data[...] = p.data
    for name, a in model.buffers().items():
        twin.buffers()[name][...] = a
    return twin


def random_batch(rng, B=2, T=8, C=2, F=40):
    X = rng.normal(size=(B, T, F))
    Y = (rng.random((B, T, C)) < 0.4).astype(np.float64)
    return X, Y


def perturb(model: SedModel, rng, scale=0.3):
    """Move BN and bias parameters off their initial values so every gradient is non-trivial."""
    for name, p in model.params().items():
        if name.endswith(("bn.scale", "bn.shift", ".b")):
            p.data += rng.normal(size=p.shape) * scale


__all__ = ["tiny_model", "conditioned_twin", "random_batch", "perturb", "Tensor"]
