"""Scheduled-sampling probability and the previous-activity selector.

The probability of feeding the ground truth (rather than the model's own
prediction) back into the recurrent layer decays with the number of weight
updates ``i``::

    beta = -i * gamma / n_batches
    p_tf = min(p_max, 1 - min(1 - p_min, 2 / (1 + exp(beta)) - 1))
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from sedlm.tensor import ShapeError

MODES = ("scheduled", "always_truth", "always_pred")


@dataclass(frozen=True)
class ScheduleParams:
    gamma: float = 1.0 / 12.0
    p_min: float = 0.05
    p_max: float = 0.9
    n_batches: int = 1

    def __post_init__(self):
        if not 0.0 <= self.p_min <= self.p_max <= 1.0:
            raise ValueError(f"need 0 <= p_min <= p_max <= 1, got p_min={self.p_min}, p_max={self.p_max}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.n_batches < 1:
            raise ValueError(f"n_batches must be >= 1, got {self.n_batches}")


def p_tf(i: int, params: ScheduleParams) -> float:
    """Probability of picking the ground truth after ``i`` weight updates."""
    if i < 0:
        raise ValueError(f"weight update index must be >= 0, got {i}")
    beta = -i * params.gamma / params.n_batches
    decay = 2.0 / (1.0 + math.exp(beta)) - 1.0
    return min(params.p_max, 1.0 - min(1.0 - params.p_min, decay))


def p_tf_tanh(i: int, params: ScheduleParams) -> float:
    """Same curve via ``2 / (1 + e^beta) - 1 == tanh(-beta / 2)``."""
    decay = math.tanh(i * params.gamma / (2.0 * params.n_batches))
    return min(params.p_max, 1.0 - min(1.0 - params.p_min, decay))


def schedule_curve(params: ScheduleParams, n_updates: int) -> List[Tuple[int, float]]:
    return [(i, p_tf(i, params)) for i in range(n_updates + 1)]


def format_curve(curve) -> str:
    return "".join(f"{i} {p:.10g}\n" for i, p in curve)


def binarize(y: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    y = np.asarray(y)
    return (y >= threshold).astype(y.dtype if y.dtype.kind == "f" else np.float64)


class ActivitySelector:
    """Chooses, per sequence and step, ground truth or prediction as the fed-back activity.

    ``p_tf`` is frozen for a weight update: call :meth:`advance` once per
    optimizer step.
    """

    def __init__(self, params: ScheduleParams, seed=0, mode: str = "scheduled",
                 binarize_predictions: bool = False, counter: int = 0):
        if mode not in MODES:
            raise ValueError(f"unknown selector mode {mode!r}; expected one of {MODES}")
        self.params = params
        self.mode = mode
        self.binarize_predictions = binarize_predictions
        self.counter = counter
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    @property
    def probability(self) -> float:
        if self.mode == "always_truth":
            return 1.0
        if self.mode == "always_pred":
            return 0.0
        return p_tf(self.counter, self.params)

    def advance(self) -> None:
        self.counter += 1

    def _draw(self, shape) -> np.ndarray:
        if self.mode == "always_truth":
            return np.ones(shape, dtype=bool)
        if self.mode == "always_pred":
            return np.zeros(shape, dtype=bool)
        return self.rng.random(shape) < self.probability

    def select(self, y_true_t: np.ndarray, y_pred_t: np.ndarray) -> np.ndarray:
        """Fed-back activities for one step; one Bernoulli draw per sequence."""
        y_true_t = np.asarray(y_true_t)
        y_pred_t = np.asarray(y_pred_t)
        if y_true_t.shape != y_pred_t.shape or y_true_t.ndim != 2:
            raise ShapeError(f"select: truth {y_true_t.shape} and prediction {y_pred_t.shape} must be equal [B, C]")
        take = self._draw(y_true_t.shape[0])
        pred = binarize(y_pred_t) if self.binarize_predictions else y_pred_t
        return np.where(take[:, None], y_true_t, pred)

    def draw_mask(self, batch: int, steps: int) -> np.ndarray:
        """Choices for a whole batch, ``[B, steps]``.

        Consumes the random stream exactly as ``steps - 1`` successive calls
        to :meth:`select` would (the last step feeds nothing forward).
        """
        mask = np.zeros((batch, steps), dtype=np.uint8)
        if steps > 1:
            mask[:, :-1] = np.stack([self._draw(batch) for _ in range(steps - 1)], axis=1)
        return mask


def select_activity(selector: ActivitySelector, y_true_t, y_pred_t) -> np.ndarray:
    return selector.select(y_true_t, y_pred_t)


def crossing_index(params: ScheduleParams, level: float) -> Optional[int]:
    """First update index where ``p_tf`` drops to ``level`` or below."""
    i = 0
    limit = int(1e7)
    while i < limit:
        if p_tf(i, params) <= level:
            return i
        i += 1
    return None
