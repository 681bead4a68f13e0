"""Synthetic labelled corpora with and without temporal event structure.

Structured sequences walk a class-transition matrix (which event follows
which), spawn co-occurring partners and repeat events; unstructured ones
place events independently and uniformly. Features are rendered directly in
log-mel space from per-class spectral templates.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, NamedTuple, Sequence

import numpy as np

from sedlm.features import N_MELS, fit_standardizer, read_feature_cache, write_feature_cache

DEFAULT_HOP = 0.011
RENDER_FLOOR = 1e-2
STREET_LABELS = ("brakes_squeaking", "car", "children", "large_vehicle", "people_speaking", "people_walking")


class Event(NamedTuple):
    label: int
    onset: int
    offset: int
    kind: str       # "lead", "repeat" or "co"
    source: int     # class the lead was drawn from, -1 otherwise


@dataclass
class EventGrammar:
    transitions: np.ndarray            # [C, C] row-stochastic
    cooccurrence: np.ndarray           # [C, C] symmetric, in [0, 1]
    min_duration: np.ndarray           # [C] frames
    max_duration: np.ndarray           # [C] frames
    repeat_prob: np.ndarray            # [C]
    max_polyphony: int = 5
    gap: tuple = (0, 6)

    def __post_init__(self):
        A = np.asarray(self.transitions, dtype=np.float64)
        C = A.shape[0]
        if A.shape != (C, C) or np.any(A < 0) or np.any(np.abs(A.sum(axis=1) - 1) > 1e-9):
            raise ValueError("transition matrix must be square and row-stochastic")
        P = np.asarray(self.cooccurrence, dtype=np.float64)
        if P.shape != (C, C) or np.any(P < 0) or np.any(P > 1) or not np.allclose(P, P.T):
            raise ValueError("co-occurrence affinities must be a symmetric [C, C] matrix in [0, 1]")
        lo = np.asarray(self.min_duration, dtype=int)
        hi = np.asarray(self.max_duration, dtype=int)
        if lo.shape != (C,) or hi.shape != (C,) or np.any(lo < 1) or np.any(hi < lo):
            raise ValueError("durations need 1 <= min <= max for every class")
        if self.max_polyphony < 1:
            raise ValueError("max polyphony must be >= 1")
        self.transitions, self.cooccurrence = A, P
        self.min_duration, self.max_duration = lo, hi
        self.repeat_prob = np.broadcast_to(np.asarray(self.repeat_prob, dtype=np.float64), (C,)).copy()

    @property
    def n_classes(self) -> int:
        return self.transitions.shape[0]


def default_grammar(n_classes: int = 6, strength: float = 0.8, cooccur: float = 0.5,
                    min_duration: int = 10, max_duration: int = 30, repeat_prob: float = 0.15,
                    gap=(0, 4), max_polyphony: int = 5) -> EventGrammar:
    """Cyclic successions ``c -> c+1`` with probability ``strength`` plus paired co-occurrences.

    Classes ``2k`` and ``2k+1`` form co-occurring pairs with affinity
    ``cooccur`` (think "people speaking" with "people walking").
    """
    C = n_classes
    if C == 1:
        A = np.ones((1, 1))
    elif C == 2:
        A = np.array([[0.0, 1.0], [1.0, 0.0]])
    else:
        # the successor gets ``strength``; the rest is spread over the other non-self classes
        A = np.full((C, C), (1.0 - strength) / (C - 2))
        for c in range(C):
            A[c, c] = 0.0
            A[c, (c + 1) % C] = strength
    P = np.zeros((C, C))
    for c in range(0, C - 1, 2):
        P[c, c + 1] = P[c + 1, c] = cooccur
    return EventGrammar(A, P, np.full(C, min_duration), np.full(C, max_duration),
                        np.full(C, repeat_prob), max_polyphony, tuple(gap))


def _place(roll: np.ndarray, ev: Event, cap: int) -> bool:
    a, b = ev.onset, min(ev.offset, roll.shape[0])
    if a >= b:
        return False
    if roll[a:b].sum(axis=1).max() + 1 > cap or roll[a:b, ev.label].any():
        return False
    roll[a:b, ev.label] = 1
    return True


def walk_events(grammar: EventGrammar, T: int, rng: np.random.Generator) -> List[Event]:
    """Chain of lead/repeat events through the transition matrix, plus co-occurring partners."""
    C = grammar.n_classes
    g0, g1 = grammar.gap
    t = int(rng.integers(0, g1 + 1))
    c = int(rng.integers(C))
    kind, source = "lead", -1
    events = []
    while t < T:
        d = int(rng.integers(grammar.min_duration[c], grammar.max_duration[c] + 1))
        events.append(Event(c, t, t + d, kind, source))
        for j in range(C):
            if j != c and grammar.cooccurrence[c, j] > 0 and rng.random() < grammar.cooccurrence[c, j]:
                start = t + int(rng.integers(0, max(1, d // 2)))
                dj = int(rng.integers(grammar.min_duration[j], grammar.max_duration[j] + 1))
                events.append(Event(j, start, start + dj, "co", -1))
        if rng.random() < grammar.repeat_prob[c]:
            kind, source = "repeat", -1
        else:
            kind, source = "lead", c
            c = int(rng.choice(C, p=grammar.transitions[c]))
        t += d + int(rng.integers(g0, g1 + 1))
    return events


def rasterize(events: Sequence[Event], T: int, C: int, max_polyphony: int) -> np.ndarray:
    roll = np.zeros((T, C), dtype=np.uint8)
    for ev in events:
        _place(roll, ev, max_polyphony)
    return roll


def sample_structured(grammar: EventGrammar, T: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rasterize(walk_events(grammar, T, rng), T, grammar.n_classes, grammar.max_polyphony)


def unstructured_events(C, T, expected_events, duration, rng) -> List[Event]:
    n = int(rng.poisson(expected_events)) if expected_events > 0 else 0
    out = []
    for _ in range(n):
        c = int(rng.integers(C))
        onset = int(rng.integers(T))
        d = int(rng.integers(duration[0], duration[1] + 1))
        out.append(Event(c, onset, onset + d, "lead", -1))
    return out


def sample_unstructured(C: int, T: int, expected_events: float, duration=(10, 30),
                        max_polyphony: int = 5, seed=0) -> np.ndarray:
    """Independent uniform class, onset and duration; events breaking the cap are rejected."""
    rng = np.random.default_rng(seed)
    return rasterize(unstructured_events(C, T, expected_events, duration, rng), T, C, max_polyphony)


@dataclass
class ClassPattern:
    center: float          # mel band index of the peak
    bandwidth: float       # gaussian width in bands
    amplitude: float
    decay: float = 0.0     # per-frame envelope decay after onset; 0 keeps it flat
    sustain: float = 1.0   # envelope floor the decay settles to

    def spectrum(self, n_mels: int = N_MELS) -> np.ndarray:
        bands = np.arange(n_mels)
        return self.amplitude * np.exp(-0.5 * ((bands - self.center) / self.bandwidth) ** 2)

    def envelope(self, k: np.ndarray) -> np.ndarray:
        if self.decay <= 0:
            return np.ones_like(k, dtype=np.float64)
        return self.sustain + (1.0 - self.sustain) * np.exp(-self.decay * k)


def default_patterns(n_classes: int = 6, n_mels: int = N_MELS, spacing: float = 3.0,
                     bandwidth: float = 3.0, amplitude: float = 1.0,
                     decay: float = 0.15, sustain: float = 0.35) -> List[ClassPattern]:
    first = float(np.floor((n_mels - spacing * (n_classes - 1)) / 2.0))
    return [ClassPattern(first + spacing * c, bandwidth, amplitude, decay, sustain)
            for c in range(n_classes)]


def _run_starts(roll: np.ndarray) -> np.ndarray:
    """Frames since the current activity run of each class started."""
    T, C = roll.shape
    age = np.zeros((T, C))
    run = np.zeros(C)
    for t in range(T):
        run = np.where(roll[t] > 0, run + 1, 0)
        age[t] = run - 1
    return age


def render_features(roll: np.ndarray, patterns: Sequence[ClassPattern], noise_level: float,
                    seed, n_mels: int = N_MELS) -> np.ndarray:
    """Log of (floor + active templates + squared-gaussian noise), ``[T, n_mels]``."""
    roll = np.asarray(roll)
    T, C = roll.shape
    if len(patterns) < C:
        raise ValueError(f"roll has {C} classes but only {len(patterns)} patterns were given")
    rng = np.random.default_rng(seed)
    lin = np.full((T, n_mels), RENDER_FLOOR)
    age = _run_starts(roll)
    for c in range(C):
        active = roll[:, c] > 0
        if active.any():
            env = np.where(active, patterns[c].envelope(np.maximum(age[:, c], 0)), 0.0)
            lin += env[:, None] * patterns[c].spectrum(n_mels)[None, :]
    if noise_level > 0:
        lin += noise_level * rng.standard_normal((T, n_mels)) ** 2
    return np.log(lin)


# -- annotations ---------------------------------------------------------------

def roll_to_events(roll: np.ndarray, hop: float, labels: Sequence[str]):
    """Runs of active frames as ``(onset_s, offset_s, label)``, ordered by onset then class."""
    roll = np.asarray(roll)
    out = []
    for c in range(roll.shape[1]):
        col = np.concatenate([[0], roll[:, c].astype(np.int8), [0]])
        d = np.diff(col)
        for a, b in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)):
            out.append((a * hop, b * hop, labels[c], c))
    out.sort(key=lambda e: (e[0], e[3]))
    return [(a, b, name) for a, b, name, _ in out]


def write_annotations(roll: np.ndarray, hop: float, path, labels: Sequence[str]) -> None:
    lines = [f"{a:.6f}\t{b:.6f}\t{name}\n" for a, b, name in roll_to_events(roll, hop, labels)]
    Path(path).write_text("".join(lines))


def read_annotations(path, T: int, C: int, hop: float, labels: Sequence[str]) -> np.ndarray:
    """Rasterize ``onset<TAB>offset<TAB>label`` lines; frame ``t`` is active when
    its center ``(t + 0.5) * hop`` lies in ``[onset, offset)``."""
    index = {name: k for k, name in enumerate(labels)}
    if len(labels) != C:
        raise ValueError(f"label map has {len(labels)} entries, expected {C}")
    roll = np.zeros((T, C), dtype=np.uint8)
    centers = (np.arange(T) + 0.5) * hop
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected 'onset<TAB>offset<TAB>label', got {line!r}")
        try:
            onset, offset = float(parts[0]), float(parts[1])
        except ValueError:
            raise ValueError(f"{path}:{n}: onset/offset must be numbers, got {line!r}") from None
        if not onset < offset:
            raise ValueError(f"{path}:{n}: onset {onset} is not before offset {offset}")
        label = parts[2].strip()
        if label not in index:
            raise ValueError(f"{path}:{n}: unknown label {label!r}; known labels: {', '.join(labels)}")
        roll[(centers >= onset) & (centers < offset), index[label]] = 1
    return roll


# -- corpora -------------------------------------------------------------------

@dataclass
class LabelledSequence:
    features: np.ndarray   # [T, F]
    roll: np.ndarray       # [T, C]
    mask: np.ndarray       # [T] bool


@dataclass
class CorpusSpec:
    kind: str = "structured"
    n_sequences: int = 100
    frames: int = 128
    n_classes: int = 6
    ratios: tuple = (0.6, 0.2, 0.2)
    noise_level: float = 0.5
    strength: float = 0.8
    cooccur: float = 0.5
    min_duration: int = 10
    max_duration: int = 30
    repeat_prob: float = 0.15
    gap: tuple = (0, 4)
    max_polyphony: int = 5
    pattern_spacing: float = 3.0
    pattern_bandwidth: float = 3.0
    pattern_decay: float = 0.15
    pattern_sustain: float = 0.35
    expected_events: float = 0.0   # 0: match the structured walk's density

    def grammar(self) -> EventGrammar:
        return default_grammar(self.n_classes, self.strength, self.cooccur, self.min_duration,
                               self.max_duration, self.repeat_prob, self.gap, self.max_polyphony)

    def patterns(self) -> List[ClassPattern]:
        return default_patterns(self.n_classes, N_MELS, self.pattern_spacing, self.pattern_bandwidth,
                                1.0, self.pattern_decay, self.pattern_sustain)

    def unstructured_rate(self) -> float:
        """Events per unstructured sequence; by default matched to the structured walk's frame density."""
        if self.expected_events > 0:
            return self.expected_events
        return matched_rate(self.grammar(), self.frames)


@dataclass
class Corpus:
    train: List[LabelledSequence]
    val: List[LabelledSequence]
    test: List[LabelledSequence]
    labels: List[str]
    hop: float = DEFAULT_HOP

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def split(self, name: str) -> List[LabelledSequence]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def fit_standardizer(self):
        return fit_standardizer([s.features[s.mask] for s in self.train])

    def standardized(self, st=None) -> "Corpus":
        """Copy with features standardized (by training-split statistics unless ``st`` is given)."""
        st = self.fit_standardizer() if st is None else st

        def conv(seqs):
            return [LabelledSequence((st.apply(s.features) * s.mask[:, None]).astype(np.float32), s.roll, s.mask)
                    for s in seqs]

        return Corpus(conv(self.train), conv(self.val), conv(self.test), list(self.labels), self.hop)


def split_counts(n: int, ratios) -> tuple:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios {ratios} do not sum to 1")
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{n} sequences cannot fill non-empty {ratios} splits")
    return n_train, n_val, n_test


def labels_for(C: int) -> List[str]:
    return list(STREET_LABELS[:C]) if C <= len(STREET_LABELS) else [f"class{c}" for c in range(C)]


def make_corpus(spec: CorpusSpec, seed: int) -> Corpus:
    """Deterministic train/val/test corpus; grammar and patterns are shared by all splits."""
    if spec.kind not in ("structured", "unstructured"):
        raise ValueError(f"unknown corpus kind {spec.kind!r}; use 'structured' or 'unstructured'")
    counts = split_counts(spec.n_sequences, spec.ratios)
    grammar = spec.grammar()
    patterns = spec.patterns()
    rate = spec.unstructured_rate()
    seqs = []
    root = np.random.SeedSequence(seed)
    for child in root.spawn(spec.n_sequences):
        label_rng, noise_rng = (np.random.default_rng(s) for s in child.spawn(2))
        if spec.kind == "structured":
            roll = rasterize(walk_events(grammar, spec.frames, label_rng), spec.frames,
                             spec.n_classes, spec.max_polyphony)
        else:
            roll = rasterize(unstructured_events(spec.n_classes, spec.frames, rate,
                                                 (spec.min_duration, spec.max_duration), label_rng),
                             spec.frames, spec.n_classes, spec.max_polyphony)
        feats = render_features(roll, patterns, spec.noise_level, noise_rng)
        seqs.append(LabelledSequence(feats.astype(np.float32), roll, np.ones(spec.frames, dtype=bool)))
    a, b, _ = counts
    return Corpus(seqs[:a], seqs[a:a + b], seqs[a + b:], labels_for(spec.n_classes))


def _density(rolls) -> float:
    return float(np.mean([r.mean() for r in rolls]))


@lru_cache(maxsize=64)
def _matched_rate(transitions, cooccurrence, lo, hi, repeat, cap, gap, T, n_probe) -> float:
    C = len(lo)
    grammar = EventGrammar(np.array(transitions), np.array(cooccurrence), np.array(lo), np.array(hi),
                           np.array(repeat), cap, gap)
    target = _density([rasterize(walk_events(grammar, T, np.random.default_rng([7, k])), T, C, cap)
                       for k in range(n_probe)])
    duration = (int(min(lo)), int(max(hi)))

    def density(rate):
        return _density([rasterize(unstructured_events(C, T, rate, duration, np.random.default_rng([8, k])),
                                   T, C, cap) for k in range(n_probe)])

    a, b = 0.0, 1.0
    while density(b) < target:
        b *= 2.0
    for _ in range(30):
        mid = 0.5 * (a + b)
        a, b = (mid, b) if density(mid) < target else (a, mid)
    return 0.5 * (a + b)


def matched_rate(grammar: EventGrammar, T: int, n_probe: int = 256) -> float:
    """Poisson rate of independent events whose mean frame density equals the grammar's.

    Both densities are Monte Carlo estimates on fixed internal seeds, so the
    result is a deterministic function of the grammar.
    """
    return _matched_rate(tuple(map(tuple, grammar.transitions.tolist())),
                         tuple(map(tuple, grammar.cooccurrence.tolist())),
                         tuple(grammar.min_duration.tolist()), tuple(grammar.max_duration.tolist()),
                         tuple(grammar.repeat_prob.tolist()), grammar.max_polyphony, tuple(grammar.gap),
                         T, n_probe)


def adjacent_frame_mi(rolls: Sequence[np.ndarray]) -> float:
    """Sum over class pairs ``(i, j)`` of the plug-in MI (nats) between ``y[t-1, i]`` and ``y[t, j]``.

    The same-class terms measure persistence; the cross terms pick up
    successions and co-occurrences.
    """
    C = np.shape(rolls[0])[1]
    joint = np.zeros((C, C, 2, 2))
    for roll in rolls:
        r = np.asarray(roll).astype(np.int64)
        prev, nxt = r[:-1], r[1:]
        for a in (0, 1):
            for b in (0, 1):
                joint[:, :, a, b] += ((prev == a).T.astype(np.int64)) @ (nxt == b).astype(np.int64)
    p = joint / joint.sum(axis=(2, 3), keepdims=True)
    outer = p.sum(axis=3, keepdims=True) * p.sum(axis=2, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / outer[nz])))


# -- on-disk corpus ------------------------------------------------------------

MANIFEST = "manifest.tsv"


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Feature caches, annotation TSVs and a manifest of (features, annotations, split)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    T = corpus.train[0].roll.shape[0]
    lines = [f"# labels={','.join(corpus.labels)}\n", f"# hop={corpus.hop!r}\n", f"# frames={T}\n"]
    counts = {}
    for split in ("train", "val", "test"):
        seqs = corpus.split(split)
        counts[split] = len(seqs)
        for k, s in enumerate(seqs):
            stem = f"{split}_{k:04d}"
            write_feature_cache(out / f"{stem}.sedf", s.features)
            write_annotations(s.roll, corpus.hop, out / f"{stem}.tsv", corpus.labels)
            lines.append(f"{stem}.sedf\t{stem}.tsv\t{split}\n")
    lines.insert(3, "# counts=" + ",".join(f"{k}:{v}" for k, v in counts.items()) + "\n")
    path = out / MANIFEST
    path.write_text("".join(lines))
    return path


def read_corpus(data_dir) -> Corpus:
    root = Path(data_dir)
    path = root / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    meta = {}
    entries = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        elif line.strip():
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("train", "val", "test"):
                raise ValueError(f"{path}:{n}: expected 'features<TAB>annotations<TAB>split'")
            entries.append(parts)
    labels = meta["labels"].split(",")
    hop = float(meta["hop"])
    splits = {"train": [], "val": [], "test": []}
    for feat, ann, split in entries:
        x = read_feature_cache(root / feat)
        roll = read_annotations(root / ann, x.shape[0], len(labels), hop, labels)
        splits[split].append(LabelledSequence(x, roll, np.ones(x.shape[0], dtype=bool)))
    return Corpus(splits["train"], splits["val"], splits["test"], labels, hop)
