"""Per-code volatility statistics, masking-weight policies and the mask sampler."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CV_EPS = 1e-8
MIN_CV_COUNT = 2
HIGH_WEIGHT = 0.8
LOW_WEIGHT = 0.2
RANDOM_POLICY_WEIGHT = 0.5
POLICIES = ("random", "variance", "cv")


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class CodeStats:
    code: int
    mean: float
    std: float
    cv: float | None
    count: int

    @property
    def cv_valid(self) -> bool:
        return self.cv is not None


@dataclass
class WeightMap:
    weights: dict[int, float]
    policy: str
    cv75: float | None = None

    def __getitem__(self, code: int) -> float:
        return self.weights[code]

    def array(self, n_codes: int, default=RANDOM_POLICY_WEIGHT) -> np.ndarray:
        w = np.full(n_codes, default, dtype=np.float64)
        for c, x in self.weights.items():
            w[c] = x
        return w

    def to_json(self, code_name=str) -> dict:
        return {"policy": self.policy, "cv75": self.cv75,
                "weights": {code_name(c): w for c, w in sorted(self.weights.items())}}

    @classmethod
    def from_json(cls, doc: dict, code_id=int) -> "WeightMap":
        return cls({code_id(k): float(v) for k, v in doc["weights"].items()}, doc["policy"], doc.get("cv75"))


@dataclass
class MaskPlan:
    mask: np.ndarray
    achieved_ratio: float
    target_ratio: float

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


def compute_code_stats(values_by_code: dict[int, list[float]]) -> list[CodeStats]:
    """Mean, population std and CV per code, sorted by code id."""
    out = []
    for code in sorted(values_by_code):
        v = np.asarray(values_by_code[code], dtype=np.float64)
        if v.size == 0:
            out.append(CodeStats(code, 0.0, 0.0, None, 0))
            continue
        mu, sd = float(v.mean()), float(v.std())
        cv = sd / mu if abs(mu) > CV_EPS and v.size >= MIN_CV_COUNT else None
        out.append(CodeStats(code, mu, sd, cv, int(v.size)))
    return out


def stats_to_json(stats: list[CodeStats], code_name=str) -> dict:
    return {code_name(s.code): {"mean": s.mean, "std": s.std, "cv": s.cv, "count": s.count} for s in stats}


def percentile(values, p: float) -> float:
    """Linear-interpolation percentile at fractional index (p/100)(n-1)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty list")
    if not 0 <= p <= 100:
        raise ValueError(f"percentile p must be in [0, 100], got {p}")
    i = (p / 100.0) * (v.size - 1)
    lo = int(np.floor(i))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (i - lo) * (v[hi] - v[lo]))


def assign_weights_cv(stats: list[CodeStats], rng_seed=0) -> WeightMap:
    if not stats:
        raise PolicyError("no code statistics")
    valid = [s.cv for s in stats if s.cv_valid]
    if not valid:
        raise PolicyError("no code has a valid CV, so the 75th percentile is undefined")
    cv75 = percentile(valid, 75)
    rng = np.random.default_rng(rng_seed)
    weights = {}
    for s in stats:
        if s.cv_valid:
            weights[s.code] = HIGH_WEIGHT if s.cv > cv75 else LOW_WEIGHT
        else:
            # redraw the endpoint so the weight lies in the open interval
            w = rng.uniform(LOW_WEIGHT, HIGH_WEIGHT)
            while w == LOW_WEIGHT:
                w = rng.uniform(LOW_WEIGHT, HIGH_WEIGHT)
            weights[s.code] = float(w)
    return WeightMap(weights, "cv", cv75)


def assign_weights_variance(stats: list[CodeStats]) -> WeightMap:
    var = {s.code: s.std**2 for s in stats}
    vmax = max(var.values(), default=0.0)
    if vmax <= 0:
        raise PolicyError("all code variances are zero")
    return WeightMap({c: LOW_WEIGHT + (HIGH_WEIGHT - LOW_WEIGHT) * v / vmax for c, v in var.items()}, "variance")


def assign_weights_random(codes) -> WeightMap:
    return WeightMap({int(c): RANDOM_POLICY_WEIGHT for c in codes}, "random")


def assign_weights(policy: str, stats: list[CodeStats], rng_seed=0) -> WeightMap:
    if policy == "cv":
        return assign_weights_cv(stats, rng_seed)
    if policy == "variance":
        return assign_weights_variance(stats)
    if policy == "random":
        return assign_weights_random([s.code for s in stats])
    raise PolicyError(f"unknown masking policy {policy!r}; expected one of {POLICIES}")


def mask_probabilities(codes, present, weights: np.ndarray, target_ratio=0.25) -> np.ndarray:
    """Per-event masking probability: weight times a common scale, clamped to [0, 1]."""
    present = np.asarray(present, dtype=bool)
    w = np.where(present, weights[np.asarray(codes, dtype=np.int64)], 0.0)
    m = int(present.sum())
    total = w.sum()
    if m == 0 or total <= 0:
        return np.zeros_like(w)
    s = target_ratio * m / total
    return np.clip(s * w, 0.0, 1.0)


def sample_mask(seq, weights, target_ratio=0.25, rng_seed=0) -> MaskPlan:
    """Draw a value mask for an EventSequence under a WeightMap (or dense per-code weight array)."""
    codes = seq.codes()
    if isinstance(weights, WeightMap):
        weights = weights.array(max(int(codes.max(initial=0)) + 1, max(weights.weights, default=0) + 1))
    return sample_mask_arrays(codes, seq.present(), weights, target_ratio, rng_seed)


def sample_mask_arrays(codes, present, weights: np.ndarray, target_ratio=0.25, rng_seed=0) -> MaskPlan:
    """Array form of ``sample_mask``.

    ``weights`` is a dense per-code array (see ``WeightMap.array``). Events
    without a value are never masked; if no event is drawn, the maskable
    event with the highest probability (last index on ties) is masked.
    """
    present = np.asarray(present, dtype=bool)
    m = int(present.sum())
    if m == 0:
        raise PolicyError("sequence has no maskable (value-bearing) events")
    p = mask_probabilities(codes, present, weights, target_ratio)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    mask = (rng.random(p.size) < p) & present
    if not mask.any():
        cand = np.where(present, p, -1.0)
        idx = np.flatnonzero(cand == cand.max())[-1]
        mask[idx] = True
    return MaskPlan(mask, float(mask.sum()) / m, target_ratio)


def save_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
