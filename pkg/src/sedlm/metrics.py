"""Frame-based F1 and error rate for polyphonic event rolls."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Dict, Optional, Sequence

import numpy as np


@dataclass
class FrameCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    subs: int = 0
    dels: int = 0
    ins: int = 0
    n_ref: int = 0

    def __add__(self, other: "FrameCounts") -> "FrameCounts":
        return FrameCounts(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def scaled(self, k: int) -> "FrameCounts":
        return FrameCounts(*(getattr(self, f.name) * k for f in fields(self)))

    def as_dict(self) -> Dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def accumulate(reference, prediction, mask=None) -> FrameCounts:
    """Count per-frame, per-class hits and the substitution/deletion/insertion split.

    ``reference`` and ``prediction`` are binary ``[T, C]`` (or ``[B, T, C]``)
    rolls; frames where ``mask`` is false are ignored.
    """
    ref = np.asarray(reference).astype(bool)
    pred = np.asarray(prediction).astype(bool)
    if ref.shape != pred.shape:
        raise ValueError(f"reference {ref.shape} and prediction {pred.shape} differ in shape")
    ref = ref.reshape(-1, ref.shape[-1])
    pred = pred.reshape(-1, pred.shape[-1])
    if mask is not None:
        keep = np.asarray(mask).astype(bool).reshape(-1)
        if keep.shape[0] != ref.shape[0]:
            raise ValueError(f"mask covers {keep.shape[0]} frames, rolls have {ref.shape[0]}")
        ref, pred = ref[keep], pred[keep]
    tp_f = np.sum(ref & pred, axis=1)
    fn_f = np.sum(ref & ~pred, axis=1)
    fp_f = np.sum(~ref & pred, axis=1)
    s_f = np.minimum(fn_f, fp_f)
    return FrameCounts(
        tp=int(tp_f.sum()), fp=int(fp_f.sum()), fn=int(fn_f.sum()),
        subs=int(s_f.sum()), dels=int((fn_f - s_f).sum()), ins=int((fp_f - s_f).sum()),
        n_ref=int(ref.sum()),
    )


def f1(counts: FrameCounts) -> float:
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 2 * counts.tp / denom if denom else 0.0


def error_rate(counts: FrameCounts) -> float:
    """(S + D + I) / N; with no reference activity, 0 if nothing was inserted, else inf."""
    if counts.n_ref == 0:
        return 0.0 if counts.ins == 0 else math.inf
    return (counts.subs + counts.dels + counts.ins) / counts.n_ref


@dataclass
class ScoreReport:
    f1: float
    er: float
    counts: Optional[FrameCounts] = None
    f1_std: float = 0.0
    er_std: float = 0.0
    n_runs: int = 1

    @property
    def er_undefined(self) -> bool:
        return math.isinf(self.er)

    @classmethod
    def from_counts(cls, counts: FrameCounts) -> "ScoreReport":
        return cls(f1=f1(counts), er=error_rate(counts), counts=counts)

    def key_values(self) -> str:
        lines = [f"f1={self.f1:.6f}", f"er={self.er:.6f}"]
        if self.n_runs > 1:
            lines += [f"f1_std={self.f1_std:.6f}", f"er_std={self.er_std:.6f}", f"runs={self.n_runs}"]
        if self.er_undefined:
            lines.append("er_flag=no_reference_activity")
        if self.counts is not None:
            lines += [f"{k}={v}" for k, v in self.counts.as_dict().items()]
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        rows = [("F1", self.f1, self.f1_std), ("ER", self.er, self.er_std)]
        out = [f"{'metric':<8}{'mean':>10}{'std':>10}"]
        out += [f"{name:<8}{mean:>10.4f}{std:>10.4f}" for name, mean, std in rows]
        if self.counts is not None:
            c = self.counts
            out.append(f"TP={c.tp} FP={c.fp} FN={c.fn} S={c.subs} D={c.dels} I={c.ins} N={c.n_ref}")
        return "\n".join(out) + "\n"


def aggregate(reports: Sequence[Sequence[ScoreReport]]) -> ScoreReport:
    """Mean over folds/scenes inside each repeat, then mean and population std across repeats.

    ``reports[r]`` holds the per-fold reports of training repeat ``r``; a flat
    list of reports is read as one repeat.
    """
    if not reports:
        raise ValueError("aggregate needs at least one report")
    if isinstance(reports[0], ScoreReport):
        reports = [reports]
    f1s, ers = [], []
    for folds in reports:
        if not folds:
            raise ValueError("aggregate got a repeat without reports")
        f1s.append(float(np.mean([r.f1 for r in folds])))
        ers.append(float(np.mean([r.er for r in folds])))
    return ScoreReport(
        f1=float(np.mean(f1s)), er=float(np.mean(ers)),
        f1_std=float(np.std(f1s)), er_std=float(np.std(ers)), n_runs=len(f1s),
    )


def brute_force_counts(reference, prediction) -> FrameCounts:
    """Triple-loop reference count over frames and classes (test oracle)."""
    ref = np.asarray(reference)
    pred = np.asarray(prediction)
    total = FrameCounts()
    for t in range(ref.shape[0]):
        tp = fp = fn = n = 0
        for c in range(ref.shape[1]):
            r, p = int(ref[t, c]), int(pred[t, c])
            n += r
            if r and p:
                tp += 1
            elif p:
                fp += 1
            elif r:
                fn += 1
        s = min(fn, fp)
        total = total + FrameCounts(tp, fp, fn, s, fn - s, fp - s, n)
    return total
