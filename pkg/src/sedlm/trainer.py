"""Training loop, early stopping, checkpoints, evaluation and the A/B driver."""
from __future__ import annotations

import io
import logging
import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from sedlm import metrics, nn
from sedlm.features import Standardizer
from sedlm.model import ModelConfig, SedModel, bce_loss, forward, infer
from sedlm.schedule import ActivitySelector, ScheduleParams
from sedlm.synthdata import Corpus, CorpusSpec, make_corpus
from sedlm.tensor import Tape, backward

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SEDM"
CKPT_VERSION = 1
STREAMS = {"init": 0, "dropout": 1, "sampler": 2, "shuffle": 3, "data": 4}
SELECTOR_MODE = {"ground_truth": "always_truth", "scheduled": "scheduled", "predictions": "always_pred"}


class TrainingDiverged(RuntimeError):
    pass


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator per consumer, derived from the master seed."""
    return np.random.default_rng([seed, STREAMS[name], *keys])


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 8
    lr: float = 1e-3
    clip: Optional[float] = None
    patience: int = 50
    max_epochs: int = 300
    seed: int = 0
    gamma: float = 1.0 / 12.0
    p_min: float = 0.05
    p_max: float = 0.9
    log_timing: bool = False
    backend: Optional[str] = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")

    def schedule(self, n_batches: int) -> ScheduleParams:
        return ScheduleParams(self.gamma, self.p_min, self.p_max, n_batches)


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    """Named float32 arrays plus the weight-update counter.

    Record order is preserved, so ``from_bytes(to_bytes())`` is exact.
    """
    fingerprint: int
    counter: int
    arrays: Dict[str, np.ndarray]

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<IQQ", CKPT_VERSION, self.fingerprint, self.counter))
        for name, arr in self.arrays.items():
            raw = name.encode("utf-8")
            a = np.asarray(arr, dtype="<f4")
            buf.write(struct.pack("<I", len(raw)) + raw)
            buf.write(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
            buf.write(np.ascontiguousarray(a).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint (magic {raw[:4]!r})")
        version, fingerprint, counter = struct.unpack_from("<IQQ", raw, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 24
        arrays = {}
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(raw):
                raise ValueError(f"checkpoint truncated inside record {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
        return cls(fingerprint, counter, arrays)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"checkpoint {p} does not exist")
        return cls.from_bytes(p.read_bytes())


def capture(model: SedModel, adam: nn.AdamState, counter: int, standardizer: Standardizer) -> Checkpoint:
    arrays = {}
    params = model.params()
    for name, t in params.items():
        arrays[name] = t.data.astype(np.float32)
    for name, a in model.buffers().items():
        arrays[name] = np.asarray(a, dtype=np.float32)
    arrays["standardizer.mean"] = standardizer.mean.astype(np.float32)
    arrays["standardizer.std"] = standardizer.std.astype(np.float32)
    if adam.m:
        for (name, _), m, v in zip(params.items(), adam.m, adam.v):
            arrays[f"adam.m.{name}"] = m.astype(np.float32)
            arrays[f"adam.v.{name}"] = v.astype(np.float32)
    return Checkpoint(model.config.fingerprint(), counter, arrays)


def restore(ckpt: Checkpoint, config: ModelConfig):
    """Rebuild ``(model, adam_state, standardizer)``; the config must match the fingerprint."""
    if ckpt.fingerprint != config.fingerprint():
        raise ValueError(
            f"checkpoint fingerprint {ckpt.fingerprint:016x} does not match the model config "
            f"({config.fingerprint():016x})")
    model = SedModel.create(config, seed=0)
    dt = np.dtype(config.dtype)
    params = model.params()
    needed = list(params) + list(model.buffers()) + ["standardizer.mean", "standardizer.std"]
    missing = [n for n in needed if n not in ckpt.arrays]
    if missing:
        raise ValueError(f"checkpoint lacks record(s): {', '.join(missing)}")
    for name, t in params.items():
        if ckpt.arrays[name].shape != t.shape:
            raise ValueError(f"checkpoint record {name} has shape {ckpt.arrays[name].shape}, expected {t.shape}")
        t.data = ckpt.arrays[name].astype(dt)
    for name, a in model.buffers().items():
        a[...] = ckpt.arrays[name]
    adam = nn.AdamState(step=ckpt.counter)
    if f"adam.m.{next(iter(params))}" in ckpt.arrays:
        adam.m = [ckpt.arrays[f"adam.m.{n}"].astype(dt) for n in params]
        adam.v = [ckpt.arrays[f"adam.v.{n}"].astype(dt) for n in params]
    st = Standardizer(ckpt.arrays["standardizer.mean"].astype(np.float64),
                      ckpt.arrays["standardizer.std"].astype(np.float64))
    return model, adam, st


# -- training ------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    p_tf: Optional[float]
    seconds: Optional[float]

    def line(self) -> str:
        p = "-" if self.p_tf is None else f"{self.p_tf:.6f}"
        s = "-" if self.seconds is None else f"{self.seconds:.3f}"
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_loss:.6f}\t{p}\t{s}\n"


@dataclass
class TrainLog:
    header: List[str] = field(default_factory=list)
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def render(self) -> str:
        out = [f"# {h}\n" for h in self.header]
        out.append("# epoch\ttrain_loss\tval_loss\tp_tf\tseconds\n")
        out += [r.line() for r in self.epochs]
        return "".join(out)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: TrainLog


def _batches(seqs, order, size):
    for k in range(0, len(order), size):
        idx = order[k:k + size]
        yield (np.stack([seqs[i].features for i in idx]),
               np.stack([seqs[i].roll for i in idx]).astype(np.float32),
               np.stack([seqs[i].mask for i in idx]))


def _conditioning_p(cfg: TrainConfig, sched: ScheduleParams, i: int) -> Optional[float]:
    mode = cfg.model.conditioning
    if mode == "off":
        return None
    return ActivitySelector(sched, mode=SELECTOR_MODE[mode], counter=i).probability


def dataset_loss(model: SedModel, seqs, batch_size: int, backend=None) -> float:
    """Eval-mode loss over a split, frames weighted equally; predictions are fed back."""
    total, frames = 0.0, 0.0
    order = np.arange(len(seqs))
    for X, Y, M in _batches(seqs, order, batch_size):
        yhat = forward(model, X, train=False, backend=backend)
        n = float(M.sum())
        total += float(bce_loss(yhat, Y.astype(yhat.dtype), M).data) * n
        frames += n
    return total / max(frames, 1.0)


def _header(cfg: TrainConfig, n_train: int, n_batches: int) -> List[str]:
    m = cfg.model
    return [
        f"seed={cfg.seed} lr={cfg.lr:g} clip={cfg.clip if cfg.clip is not None else 'off'} "
        f"batch_size={cfg.batch_size} patience={cfg.patience} max_epochs={cfg.max_epochs}",
        f"conditioning={m.conditioning} binarize={m.binarize_conditioning} filters={m.cnn_filters} "
        f"gru_hidden={m.gru_hidden} classes={m.n_classes} dropout={m.dropout:g} dtype={m.dtype}",
        f"gamma={cfg.gamma:.10g} p_min={cfg.p_min:g} p_max={cfg.p_max:g} n_batches={n_batches} "
        f"n_train={n_train}",
    ]


def train(cfg: TrainConfig, corpus: Corpus, resume: Optional[Checkpoint] = None,
          on_epoch=None) -> TrainResult:
    """Fit on ``corpus.train`` with early stopping on validation loss.

    Returns the best-validation checkpoint, the final one, and the log. With
    ``resume``, parameters, optimizer state and the update counter continue
    from that checkpoint.
    """
    if not corpus.train or not corpus.val:
        raise ValueError("corpus needs non-empty train and val splits")
    if corpus.n_classes != cfg.model.n_classes:
        raise ValueError(f"corpus has {corpus.n_classes} classes, model expects {cfg.model.n_classes}")
    standardizer = corpus.fit_standardizer()
    data = corpus.standardized(standardizer)
    n_train = len(data.train)
    n_batches = math.ceil(n_train / cfg.batch_size)
    if n_batches < 1:
        raise ValueError("no training batches")
    sched = cfg.schedule(n_batches)

    if resume is None:
        model = SedModel.create(cfg.model, seed=stream(cfg.seed, "init"))
        adam = nn.AdamState(lr=cfg.lr)
        i = 0
    else:
        model, adam, _ = restore(resume, cfg.model)
        adam.lr = cfg.lr
        i = resume.counter
    params = list(model.params().values())
    layers = [list(ps.values()) for ps in model.layers().values()]
    mode = cfg.model.conditioning
    selector = None
    if mode != "off":
        selector = ActivitySelector(sched, mode=SELECTOR_MODE[mode],
                                    binarize_predictions=cfg.model.binarize_conditioning, counter=i)

    tlog = TrainLog(header=_header(cfg, n_train, n_batches))
    best_val = math.inf
    best = capture(model, adam, i, standardizer)
    best_epoch = -1
    epoch = i // n_batches
    while epoch < cfg.max_epochs:
        start = time.perf_counter()
        order = stream(cfg.seed, "shuffle", epoch).permutation(n_train)
        losses = []
        for b, (X, Y, M) in enumerate(_batches(data.train, order, cfg.batch_size)):
            model.zero_grad()
            drop_rng = stream(cfg.seed, "dropout", i)
            if selector is not None:
                selector.counter = i
                selector.rng = stream(cfg.seed, "sampler", i)
            with Tape() as tape:
                yhat = forward(model, X, Y, selector, train=True, rng=drop_rng, backend=cfg.backend)
                loss = bce_loss(yhat, Y, M)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, batch {b} (update {i})")
            backward(tape, loss)
            if cfg.clip is not None:
                for group in layers:
                    clipped = nn.clip_grad_l2([p.grad for p in group], cfg.clip)
                    for p, g in zip(group, clipped):
                        p.grad = g
            nn.adam_update(params, [p.grad for p in params], adam)
            i += 1
            losses.append(value)
        val = dataset_loss(model, data.val, cfg.batch_size, cfg.backend)
        secs = time.perf_counter() - start if cfg.log_timing else None
        rec = EpochRecord(epoch, float(np.mean(losses)), val, _conditioning_p(cfg, sched, i), secs)
        tlog.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug(rec.line().strip())
        if val < best_val:
            best_val = val
            best = capture(model, adam, i, standardizer)
            best_epoch = epoch
        epoch += 1
        if best_epoch >= 0 and epoch - 1 - best_epoch >= cfg.patience:
            tlog.stopped_early = True
            break
    tlog.best_epoch = best_epoch
    return TrainResult(best, capture(model, adam, i, standardizer), tlog)


def evaluate(ckpt: Checkpoint, config: ModelConfig, seqs, batch_size: int = 8,
             threshold: float = 0.5, backend=None) -> metrics.ScoreReport:
    """Frame F1/ER of the checkpoint on ``seqs`` (raw features), padding excluded."""
    model, _, st = restore(ckpt, config)
    total = metrics.FrameCounts()
    for k in range(0, len(seqs), batch_size):
        chunk = seqs[k:k + batch_size]
        if chunk[0].roll.shape[1] != config.n_classes:
            raise ValueError(f"split has {chunk[0].roll.shape[1]} classes, model has {config.n_classes}")
        X = np.stack([(st.apply(s.features) * s.mask[:, None]).astype(np.float32) for s in chunk])
        _, pred = infer(model, X, threshold, backend)
        for s, p in zip(chunk, pred):
            total = total + metrics.accumulate(s.roll, p, s.mask)
    return metrics.ScoreReport.from_counts(total)


# -- A/B experiment --------------------------------------------------------------

ARMS = ("baseline", "proposed")
KINDS = ("structured", "unstructured")


@dataclass
class CellResult:
    kind: str
    arm: str
    f1: List[float]
    er: List[float]

    @property
    def report(self) -> metrics.ScoreReport:
        return metrics.aggregate([[metrics.ScoreReport(f, e)] for f, e in zip(self.f1, self.er)])


def _run_arm(args):
    cfg, spec, seed = args
    corpus = make_corpus(spec, seed=seed)
    result = train(cfg, corpus)
    rep = evaluate(result.best, cfg.model, corpus.test, cfg.batch_size, backend=cfg.backend)
    return rep.f1, rep.er


def arm_config(base: TrainConfig, arm: str, seed: int) -> TrainConfig:
    cond = "off" if arm == "baseline" else "scheduled"
    return replace(base, seed=seed, model=replace(base.model, conditioning=cond))


def ab_experiment(base: TrainConfig, spec: CorpusSpec, seeds: Sequence[int], workers: int = 1,
                  progress=None) -> Dict[tuple, CellResult]:
    """Train baseline and scheduled-conditioning models on structured and unstructured corpora.

    Both arms of a seed share the same corpus, so deltas are paired.
    """
    if len(seeds) < 3:
        raise ValueError(f"the A/B experiment needs at least 3 seeds, got {len(seeds)}")
    jobs = []
    for kind in KINDS:
        for arm in ARMS:
            for s in seeds:
                jobs.append((kind, arm, s, (arm_config(base, arm, s), replace(spec, kind=kind), s)))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_run_arm, [j[3] for j in jobs]))
    else:
        outs = []
        for j in jobs:
            outs.append(_run_arm(j[3]))
            if progress is not None:
                progress(j[0], j[1], j[2], outs[-1])
    cells = {(k, a): CellResult(k, a, [], []) for k in KINDS for a in ARMS}
    for (kind, arm, _, _), (f, e) in zip(jobs, outs):
        cells[(kind, arm)].f1.append(f)
        cells[(kind, arm)].er.append(e)
    return cells


def ab_table(cells: Dict[tuple, CellResult]) -> str:
    lines = [f"{'corpus':<14}{'arm':<10}{'F1 mean':>9}{'F1 std':>8}{'ER mean':>9}{'ER std':>8}"]
    for kind in KINDS:
        for arm in ARMS:
            r = cells[(kind, arm)].report
            lines.append(f"{kind:<14}{arm:<10}{r.f1:>9.4f}{r.f1_std:>8.4f}{r.er:>9.4f}{r.er_std:>8.4f}")
    for kind in KINDS:
        b, p = cells[(kind, "baseline")].report, cells[(kind, "proposed")].report
        lines.append(f"# {kind}: delta_f1={p.f1 - b.f1:+.4f} delta_er={p.er - b.er:+.4f}")
    return "\n".join(lines) + "\n"
