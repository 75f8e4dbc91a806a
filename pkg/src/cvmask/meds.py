"""MEDS-lite triplet sequences: ingestion, z-scoring, patient splits, truncation.

The on-disk format is a CSV with header ``subject_id,time,code,numeric_value``
(times in hours, empty ``numeric_value`` for events without a result) and an
optional labels CSV ``subject_id,task,label``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EVENT_HEADER = ["subject_id", "time", "code", "numeric_value"]
LABEL_HEADER = ["subject_id", "task", "label"]
STD_EPS = 1e-8
SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Triplet:
    time: float
    code: int
    value: float | None = None

    @property
    def has_value(self) -> bool:
        return self.value is not None


@dataclass
class EventSequence:
    subject_id: str
    events: list[Triplet]
    labels: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.events)

    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.events], dtype=np.float64)

    def codes(self) -> np.ndarray:
        return np.array([e.code for e in self.events], dtype=np.int64)

    def values(self) -> np.ndarray:
        """Values with NaN where absent."""
        return np.array([np.nan if e.value is None else e.value for e in self.events], dtype=np.float64)

    def present(self) -> np.ndarray:
        return np.array([e.value is not None for e in self.events], dtype=bool)

    def with_values(self, values) -> "EventSequence":
        events = [Triplet(e.time, e.code, None if e.value is None else float(v))
                  for e, v in zip(self.events, values)]
        return replace(self, events=events)


class Vocabulary:
    def __init__(self, code_names=()):
        self.code_names: list[str] = []
        self.index: dict[str, int] = {}
        for name in code_names:
            self.add(name)

    def add(self, name: str) -> int:
        if name not in self.index:
            self.index[name] = len(self.code_names)
            self.code_names.append(name)
        return self.index[name]

    def __len__(self):
        return len(self.code_names)

    def __contains__(self, name):
        return name in self.index

    def __getitem__(self, name) -> int:
        return self.index[name]

    def name(self, code: int) -> str:
        return self.code_names[code]

    def copy(self) -> "Vocabulary":
        return Vocabulary(self.code_names)


def _sort_events(events):
    # stable: ties in time keep input order
    return sorted(events, key=lambda e: e.time)


def parse_events(path, vocab: Vocabulary | None = None):
    """Read a MEDS-lite CSV.

    Returns ``(sequences, vocab, rejected)`` where ``rejected`` lists
    ``(line_number, reason)`` for malformed records. Unseen codes are
    appended to a copy of ``vocab``.
    """
    vocab = Vocabulary() if vocab is None else vocab.copy()
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise OSError(f"cannot read events file {path}: {exc}") from exc
    by_subject: dict[str, list[Triplet]] = {}
    rejected = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return [], vocab, rejected
        if [h.strip() for h in header] != EVENT_HEADER:
            raise DataError(f"{path}: expected header {','.join(EVENT_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                rejected.append((lineno, f"expected 4 fields, got {len(row)}"))
                continue
            sid, t_raw, code, v_raw = (s.strip() for s in row)
            try:
                t = float(t_raw)
            except ValueError:
                rejected.append((lineno, f"non-numeric time {t_raw!r}"))
                continue
            if not math.isfinite(t) or t < 0:
                rejected.append((lineno, f"time must be finite and non-negative, got {t_raw!r}"))
                continue
            value = None
            if v_raw:
                try:
                    value = float(v_raw)
                except ValueError:
                    rejected.append((lineno, f"non-numeric value {v_raw!r}"))
                    continue
                if not math.isfinite(value):
                    rejected.append((lineno, f"non-finite value {v_raw!r}"))
                    continue
            if not code:
                rejected.append((lineno, "empty code"))
                continue
            by_subject.setdefault(sid, []).append(Triplet(t, vocab.add(code), value))
    for lineno, reason in rejected:
        log.warning("%s:%d rejected: %s", path, lineno, reason)
    seqs = [EventSequence(sid, _sort_events(evs)) for sid, evs in by_subject.items()]
    return seqs, vocab, rejected


def _fmt(x: float) -> str:
    return repr(float(x))


def write_events(path, sequences, vocab: Vocabulary) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for seq in sequences:
            for e in seq.events:
                w.writerow([seq.subject_id, _fmt(e.time), vocab.name(e.code),
                            "" if e.value is None else _fmt(e.value)])
    return path


def read_labels(path) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LABEL_HEADER:
            raise DataError(f"{path}: expected header {','.join(LABEL_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            label = row["label"].strip()
            if label not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            out.setdefault(row["subject_id"], {})[row["task"]] = int(label)
    return out


def write_labels(path, sequences) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for seq in sequences:
            for task in sorted(seq.labels):
                w.writerow([seq.subject_id, task, int(seq.labels[task])])
    return path


def attach_labels(sequences, labels: dict[str, dict[str, int]]):
    return [replace(s, labels=dict(labels.get(s.subject_id, {}))) for s in sequences]


def values_by_code(sequences, n_codes: int | None = None) -> dict[int, list[float]]:
    out: dict[int, list[float]] = {c: [] for c in range(n_codes)} if n_codes else {}
    for seq in sequences:
        for e in seq.events:
            if e.value is not None:
                out.setdefault(e.code, []).append(e.value)
    return out


# normalisation -------------------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray

    def to_json(self, vocab: Vocabulary) -> dict:
        return {
            "std_kind": "population",
            "eps": STD_EPS,
            "codes": {vocab.name(c): {"mean": float(self.mean[c]), "std": float(self.std[c]),
                                      "count": int(self.count[c])} for c in range(len(self.mean))},
        }

    @classmethod
    def from_json(cls, doc: dict, vocab: Vocabulary) -> "NormStats":
        n = len(vocab)
        mean, std, count = np.zeros(n), np.ones(n), np.zeros(n, dtype=np.int64)
        for name, s in doc["codes"].items():
            c = vocab[name]
            mean[c], std[c], count[c] = s["mean"], s["std"], s["count"]
        return cls(mean, std, count)

    def save(self, path, vocab: Vocabulary):
        Path(path).write_text(json.dumps(self.to_json(vocab), indent=2, sort_keys=True))


def zscore_fit(train_sequences, n_codes: int) -> NormStats:
    """Per-code mean and population std from training values only.

    Codes without training values get the identity transform (mean 0, std 1).
    """
    if not train_sequences:
        raise DataError("zscore_fit needs at least one training sequence")
    mean, std = np.zeros(n_codes), np.ones(n_codes)
    count = np.zeros(n_codes, dtype=np.int64)
    for c, vals in values_by_code(train_sequences, n_codes).items():
        if vals:
            v = np.asarray(vals)
            mean[c], std[c], count[c] = v.mean(), v.std(), v.size
    return NormStats(mean, std, count)


def zscore_apply(seq: EventSequence, stats: NormStats) -> EventSequence:
    denom = np.maximum(stats.std, STD_EPS)
    return replace(seq, events=[
        e if e.value is None else Triplet(e.time, e.code, float((e.value - stats.mean[e.code]) / denom[e.code]))
        for e in seq.events
    ])


def zscore_inverse(values, codes, stats: NormStats) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return np.asarray(values) * np.maximum(stats.std[codes], STD_EPS) + stats.mean[codes]


# splits / truncation -------------------------------------------------------

def split_patients(subject_ids, ratios=(0.70, 0.15, 0.15), seed=42) -> dict[str, str]:
    """Seeded patient-level partition into train/valid/test.

    Ids are sorted, shuffled by ``seed`` and assigned contiguously. Counts use
    largest-remainder allocation; equal remainders go to train, then valid.
    """
    ids = sorted(str(s) for s in subject_ids)
    if len(set(ids)) != len(ids):
        raise DataError("subject ids must be distinct")
    if len(ids) < 3:
        raise DataError(f"need at least 3 subjects to split, got {len(ids)}")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(ids)
    raw = [r * n for r in ratios]
    counts = [math.floor(x + 1e-9) for x in raw]
    frac = [x - c for x, c in zip(raw, counts)]
    for i in sorted(range(3), key=lambda i: (-round(frac[i], 9), i))[: n - sum(counts)]:
        counts[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    out, start = {}, 0
    for split, k in zip(SPLITS, counts):
        for j in perm[start:start + k]:
            out[ids[j]] = split
        start += k
    return out


def truncate(seq: EventSequence, max_len=512) -> EventSequence:
    """Keep the most recent ``max_len`` events; times keep their original offsets."""
    if max_len < 1:
        raise DataError("max_len must be >= 1")
    if len(seq.events) <= max_len:
        return seq
    return replace(seq, events=list(seq.events[-max_len:]))
