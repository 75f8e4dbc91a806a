"""Evaluation statistics: R², Pearson r, paired effect size, Wilcoxon, AUROC/AUPRC, bootstrap CIs."""
from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np
from scipy import stats as sps

log = logging.getLogger(__name__)

WILCOXON_EXACT_MAX_N = 25
WILCOXON_MIN_N = 5


class UndefinedStatistic(ValueError):
    pass


def r2(true, pred) -> float:
    t = np.asarray(true, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.size < 2 or t.size != p.size:
        raise UndefinedStatistic("r2 needs at least 2 paired values")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0:
        raise UndefinedStatistic("r2 undefined for constant targets")
    return 1.0 - float(((t - p) ** 2).sum()) / ss_tot


def pearson_r(x, y) -> tuple[float, float]:
    """Product-moment correlation and its square."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 3 or x.size != y.size:
        raise UndefinedStatistic("pearson_r needs at least 3 paired values")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float((xc * xc).sum()), float((yc * yc).sum())
    if sxx == 0 or syy == 0:
        raise UndefinedStatistic("pearson_r undefined for a constant input")
    r = float((xc * yc).sum()) / np.sqrt(sxx * syy)
    r = float(np.clip(r, -1.0, 1.0))
    return r, r * r


def cohens_d_paired(delta) -> float:
    """mean(delta) / population std(delta)."""
    d = np.asarray(delta, dtype=np.float64)
    if d.size < 2:
        raise UndefinedStatistic("cohens_d needs at least 2 differences")
    sd = float(d.std())
    # rounding leaves ~1e-17 spread on identical non-zero differences
    if sd <= 1e-12 * max(1.0, float(np.abs(d).max())):
        raise UndefinedStatistic("cohens_d undefined: differences have zero spread")
    return float(d.mean()) / sd


# Wilcoxon signed-rank ------------------------------------------------------

class WilcoxonResult(NamedTuple):
    statistic: float  # W+, sum of ranks of positive differences
    p_value: float | None
    n: int
    method: str


def _signed_rank_parts(delta):
    d = np.asarray(delta, dtype=np.float64)
    d = d[d != 0]
    ranks = sps.rankdata(np.abs(d))
    return d, ranks, float(ranks[d > 0].sum())


def wilcoxon_exact_null(ranks) -> tuple[np.ndarray, np.ndarray]:
    """Null distribution of W+ for the given (possibly tied, mid-)ranks.

    Returns (support, probabilities). Ranks are doubled to integers so the
    sign-assignment convolution runs over integer sums.
    """
    r2x = np.rint(np.asarray(ranks) * 2).astype(np.int64)
    total = int(r2x.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in r2x:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    support = np.arange(total + 1) / 2.0
    return support, counts / counts.sum()


def wilcoxon_signed_rank(delta) -> WilcoxonResult:
    """Two-sided signed-rank test on paired differences (zeros dropped).

    Exact (tie-aware) null for n <= 25, otherwise a normal approximation with
    tie and continuity corrections. Fewer than 5 non-zero differences give
    ``p_value=None``.
    """
    d, ranks, w_plus = _signed_rank_parts(delta)
    n = d.size
    if n < WILCOXON_MIN_N:
        return WilcoxonResult(w_plus, None, n, "not-applicable")
    if n <= WILCOXON_EXACT_MAX_N:
        support, prob = wilcoxon_exact_null(ranks)
        tol = 1e-9
        lower = float(prob[support <= w_plus + tol].sum())
        upper = float(prob[support >= w_plus - tol].sum())
        return WilcoxonResult(w_plus, min(1.0, 2.0 * min(lower, upper)), n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts**3 - tie_counts).sum()) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / np.sqrt(var)
    return WilcoxonResult(w_plus, float(min(1.0, 2.0 * sps.norm.sf(z))), n, "normal")


# ranking metrics -----------------------------------------------------------

def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if y.min(initial=1) == y.max(initial=0):
        raise UndefinedStatistic("both classes must be present")
    return s, y


def auroc(scores, labels) -> float:
    """P(score+ > score-) + P(tie)/2 via the midrank statistic."""
    s, y = _check_binary(scores, labels)
    ranks = sps.rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = float(ranks[y == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auprc(scores, labels) -> float:
    """Area under the step-wise precision-recall curve with the precision envelope.

    Thresholds are the distinct scores; at each recall step the precision
    used is the best precision achieved at that recall or higher.
    """
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last].astype(np.float64)
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float((steps * envelope).sum())


class BootstrapCI(NamedTuple):
    point: float
    lo: float
    hi: float


def bootstrap_ci(metric_fn, scores, labels, n_boot=1000, seed=0, level=0.95, max_retries=10) -> BootstrapCI:
    """Percentile CI over seeded resamples with replacement.

    Single-class resamples are redrawn up to ``max_retries`` times, then
    skipped; the number skipped is logged.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.size < 10:
        raise ValueError("bootstrap needs at least 10 observations")
    point = float(metric_fn(s, y))
    rng = np.random.default_rng(seed)
    vals, skipped = [], 0
    for _ in range(n_boot):
        for _attempt in range(max_retries + 1):
            idx = rng.integers(0, s.size, size=s.size)
            if y[idx].min() != y[idx].max():
                vals.append(float(metric_fn(s[idx], y[idx])))
                break
        else:
            skipped += 1
    if skipped:
        log.warning("bootstrap skipped %d single-class resamples", skipped)
    if not vals:
        raise UndefinedStatistic("every bootstrap resample was single-class")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(vals, [100 * alpha, 100 * (1 - alpha)])
    return BootstrapCI(point, float(lo), float(hi))
