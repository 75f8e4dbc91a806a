"""Seeded synthetic cohorts with per-code volatility and AR(1) patient trajectories.

Each (patient, code) series is ``base_mean + offset + ar_noise`` where the
patient offset carries a quarter of the marginal variance and a stationary
AR(1) process carries the rest. Values are floored at ``base_mean * 1e-3``;
the marginal spread is inflated beforehand so that the floored distribution
still has the requested coefficient of variation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize, stats

from .meds import EventSequence, Triplet, Vocabulary, values_by_code
from .volatility import compute_code_stats

FLOOR_FRACTION = 1e-3
OFFSET_FRACTION = 0.5
LABEL_RULES = ("volatile-mean",)
LABEL_TASK = "volatile_mean"
ADMIT_CODE = "ADMIT"


class SpecError(ValueError):
    pass


@dataclass
class CodeSpec:
    name: str
    base_mean: float
    target_cv: float
    ar_coefficient: float = 0.7
    events_per_patient: int = 8

    def validate(self):
        if not self.base_mean > 0:
            raise SpecError(f"code {self.name!r}: base_mean must be > 0, got {self.base_mean}")
        if not (np.isfinite(self.target_cv) and self.target_cv >= 0):
            raise SpecError(f"code {self.name!r}: target_cv must be finite and >= 0")
        if self.target_cv >= _max_cv():
            raise SpecError(f"code {self.name!r}: target_cv {self.target_cv} unreachable under the value floor")
        if not 0 <= self.ar_coefficient < 1:
            raise SpecError(f"code {self.name!r}: ar_coefficient must be in [0, 1)")
        if self.events_per_patient < 0:
            raise SpecError(f"code {self.name!r}: events_per_patient must be >= 0")


@dataclass
class CohortSpec:
    n_patients: int
    codes: list[CodeSpec]
    seed: int = 42
    label_rule: str = "volatile-mean"
    horizon_hours: float = 72.0
    admission_event: bool = True

    def validate(self):
        if self.n_patients < 1:
            raise SpecError("n_patients must be >= 1")
        for c in self.codes:
            c.validate()
        if len({c.name for c in self.codes}) != len(self.codes):
            raise SpecError("code names must be unique")
        if len({c.target_cv for c in self.codes}) < 2:
            raise SpecError("need at least 2 codes with distinct target_cv")
        if self.label_rule not in LABEL_RULES:
            raise SpecError(f"unknown label_rule {self.label_rule!r}")
        if not self.horizon_hours > 0:
            raise SpecError("horizon_hours must be > 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "CohortSpec":
        doc = dict(doc)
        try:
            codes = [CodeSpec(**c) for c in doc.pop("codes")]
            spec = cls(codes=codes, **doc)
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed cohort spec: {exc}") from exc
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "CohortSpec":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def standard_benchmark(n_patients=200, seed=42, n_codes=16) -> CohortSpec:
    """Benchmark cohort: target CVs spanning 0.05-0.8 on scrambled scales.

    Base means are deliberately not ordered like the CVs, so raw variance
    and CV rank the codes differently. More volatile codes also get more
    persistent trajectories, which makes their history more informative.
    """
    cvs = np.linspace(0.05, 0.8, n_codes)
    scales = np.geomspace(0.5, 500.0, n_codes)
    order = np.random.default_rng(12345).permutation(n_codes)
    codes = [CodeSpec(name=f"LAB{i:02d}", base_mean=float(np.round(scales[order[i]], 3)),
                      target_cv=float(np.round(cvs[i], 4)),
                      ar_coefficient=float(np.round(0.3 + 0.6 * i / max(n_codes - 1, 1), 4)),
                      events_per_patient=6)
             for i in range(n_codes)]
    return CohortSpec(n_patients=n_patients, codes=codes, seed=seed)


# calibration ---------------------------------------------------------------

def _floored_moments(sigma: float, floor: float):
    """Mean and std of max(X, floor) for X ~ N(1, sigma^2)."""
    if sigma == 0:
        v = max(1.0, floor)
        return v, 0.0
    a = (floor - 1.0) / sigma
    cdf, pdf = stats.norm.cdf(a), stats.norm.pdf(a)
    m1 = floor * cdf + (1 - cdf) + sigma * pdf
    m2 = floor**2 * cdf + (1 + sigma**2) * (1 - cdf) + sigma * (1 + floor) * pdf
    return m1, float(np.sqrt(max(m2 - m1**2, 0.0)))


@lru_cache(maxsize=1)
def _max_cv() -> float:
    m, s = _floored_moments(1e6, FLOOR_FRACTION)
    return s / m


@lru_cache(maxsize=None)
def marginal_sigma(target_cv: float) -> float:
    """Pre-floor marginal std (in units of base_mean) giving ``target_cv`` after flooring."""
    if target_cv == 0:
        return 0.0
    if not 0 < target_cv < _max_cv():
        raise SpecError(f"target_cv {target_cv} outside (0, {_max_cv():.4f}) reachable under the value floor")

    def gap(s):
        m, sd = _floored_moments(s, FLOOR_FRACTION)
        return sd / m - target_cv

    hi = target_cv
    while gap(hi) < 0:
        hi *= 2
    return float(optimize.brentq(gap, target_cv * 0.5, hi, xtol=1e-14))


# generation ----------------------------------------------------------------

def cohort_vocabulary(spec: CohortSpec) -> Vocabulary:
    names = ([ADMIT_CODE] if spec.admission_event else []) + [c.name for c in spec.codes]
    return Vocabulary(names)


def generate_cohort(spec: CohortSpec) -> tuple[list[EventSequence], Vocabulary]:
    spec.validate()
    vocab = cohort_vocabulary(spec)
    rng = np.random.default_rng(spec.seed)
    seqs = []
    for p in range(spec.n_patients):
        slots = np.concatenate([np.full(c.events_per_patient, j, dtype=np.int64)
                                for j, c in enumerate(spec.codes)])
        slots = slots[rng.permutation(slots.size)]
        times = np.sort(rng.uniform(0.0, spec.horizon_hours, size=slots.size))
        if np.any(np.diff(times) <= 0) or (times.size and times[0] <= 0):
            raise RuntimeError("event times collided; reseed")
        values = np.empty(slots.size)
        for j, c in enumerate(spec.codes):
            idx = np.flatnonzero(slots == j)
            values[idx] = _trajectory(c, idx.size, rng)
        events = [Triplet(0.0, vocab[ADMIT_CODE], None)] if spec.admission_event else []
        events += [Triplet(float(t), vocab[spec.codes[j].name], float(v)) for t, j, v in zip(times, slots, values)]
        seqs.append(EventSequence(f"P{p:05d}", events))
    if spec.label_rule == "volatile-mean":
        _label_volatile_mean(seqs, spec, vocab)
    return seqs, vocab


def _trajectory(c: CodeSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    sigma = marginal_sigma(c.target_cv) * c.base_mean
    off_sd = OFFSET_FRACTION * c.target_cv * c.base_mean
    ar_sd = np.sqrt(max(sigma**2 - off_sd**2, 0.0))
    phi = c.ar_coefficient
    innov_sd = ar_sd * np.sqrt(1 - phi**2)
    offset = rng.normal(0.0, off_sd) if off_sd > 0 else 0.0
    noise = np.empty(n)
    prev = rng.normal(0.0, ar_sd) if ar_sd > 0 else 0.0
    for i in range(n):
        if i:
            prev = phi * prev + (rng.normal(0.0, innov_sd) if innov_sd > 0 else 0.0)
        noise[i] = prev
    return np.maximum(c.base_mean + offset + noise, c.base_mean * FLOOR_FRACTION)


def _label_volatile_mean(seqs, spec: CohortSpec, vocab: Vocabulary):
    from .volatility import percentile

    top = max(spec.codes, key=lambda c: c.target_cv)
    code = vocab[top.name]
    stat = np.array([np.mean([e.value for e in s.events if e.code == code] or [np.nan]) for s in seqs])
    finite = stat[np.isfinite(stat)]
    cut = percentile(finite, 80) if finite.size else np.inf
    for s, x in zip(seqs, stat):
        s.labels[LABEL_TASK] = int(bool(np.isfinite(x) and x > cut))


def empirical_cv_report(seqs, vocab: Vocabulary) -> dict[str, float | None]:
    if not seqs:
        raise ValueError("empty cohort")
    vals = {c: v for c, v in values_by_code(seqs, len(vocab)).items() if v}
    return {vocab.name(s.code): s.cv for s in compute_code_stats(vals)}
