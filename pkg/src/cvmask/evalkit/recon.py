"""Model-level evaluation: per-code reconstruction, policy comparison, history perturbation, context curves.

A "predictor" is anything with ``predict(seqs, plans) -> list of arrays``
returning normalised predictions at each plan's masked positions. The
trained VO-MAE and the reference oracles below all satisfy it.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..meds import EventSequence, NormStats, zscore_inverse
from ..volatility import MaskPlan, WeightMap, assign_weights_random, sample_mask
from .stats import UndefinedStatistic, cohens_d_paired, pearson_r, r2, wilcoxon_signed_rank

MIN_EVAL_COUNT = 2
LOW_CONFIDENCE_COUNT = 10
NOISE_FACTOR = 0.6 * 1.5
CONTEXT_BUCKETS = (("0", 0, 0), ("1", 1, 1), ("2-4", 2, 4), ("5-9", 5, 9), ("10+", 10, None))


# reference predictors ------------------------------------------------------

class MeanPredictor:
    """Predicts each code's training mean (0 after z-scoring)."""

    def predict(self, seqs, plans):
        return [np.zeros(int(p.mask.sum())) for p in plans]


class LastValuePredictor:
    """Carries forward the latest visible earlier value of the same code (next one if none, else the mean)."""

    def predict(self, seqs, plans):
        out = []
        for s, p in zip(seqs, plans):
            codes, vals = s.codes(), s.values()
            visible = ~np.isnan(vals) & ~p.mask
            preds = []
            for i in np.flatnonzero(p.mask):
                same = np.flatnonzero(visible & (codes == codes[i]))
                before = same[same < i]
                if before.size:
                    preds.append(vals[before[-1]])
                elif same.size:
                    preds.append(vals[same[0]])
                else:
                    preds.append(0.0)
            out.append(np.asarray(preds, dtype=np.float64))
        return out


class IdentityCheat:
    """Reads the hidden value back; only for harness sanity checks."""

    def predict(self, seqs, plans):
        return [s.values()[p.mask] for s, p in zip(seqs, plans)]


# masks ---------------------------------------------------------------------

def subject_seed(eval_seed: int, subject_id: str) -> list[int]:
    return [int(eval_seed), zlib.crc32(str(subject_id).encode())]


def eval_plans(seqs, weights: WeightMap | None, eval_seed: int, n_codes: int, target_ratio=0.25) -> list[MaskPlan]:
    """Evaluation masks keyed by subject id, so they do not depend on sequence order.

    ``weights=None`` means uniform masking, the default evaluation protocol.
    """
    w = (weights or assign_weights_random(range(n_codes))).array(n_codes)
    return [sample_mask(s, w, target_ratio, np.random.default_rng(subject_seed(eval_seed, s.subject_id)))
            for s in seqs]


# reconstruction ------------------------------------------------------------

@dataclass
class Records:
    subject_id: list = field(default_factory=list)
    event_index: list = field(default_factory=list)
    code: list = field(default_factory=list)
    true_norm: list = field(default_factory=list)
    pred_norm: list = field(default_factory=list)
    n_prior: list = field(default_factory=list)

    def arrays(self):
        return {k: np.asarray(v) for k, v in self.__dict__.items()}


def collect_predictions(model, seqs, plans) -> Records:
    """Masked-position predictions, sorted by (subject_id, event index)."""
    preds = model.predict(seqs, plans)
    rows = []
    for s, p, pr in zip(seqs, plans, preds):
        codes, vals = s.codes(), s.values()
        for j, i in enumerate(np.flatnonzero(p.mask)):
            rows.append((s.subject_id, int(i), int(codes[i]), float(vals[i]), float(pr[j]),
                         int((codes[:i] == codes[i]).sum())))
    rows.sort(key=lambda r: (r[0], r[1]))
    rec = Records()
    for r in rows:
        for name, v in zip(("subject_id", "event_index", "code", "true_norm", "pred_norm", "n_prior"), r):
            getattr(rec, name).append(v)
    return rec


@dataclass
class ReconTable:
    per_code: dict[int, dict]
    excluded: dict[int, str]
    overall: dict
    records: Records = field(repr=False, default_factory=Records)

    def r2_by_code(self) -> dict[int, float]:
        return {c: row["r2"] for c, row in self.per_code.items() if row["r2"] is not None}

    def to_json(self, code_name=str) -> dict:
        return {"per_code": {code_name(c): row for c, row in sorted(self.per_code.items())},
                "excluded": {code_name(c): why for c, why in sorted(self.excluded.items())},
                "overall": self.overall}

    def write_csv(self, path, code_name=str):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["code", "n", "r2", "mae", "low_confidence"])
            for c, row in sorted(self.per_code.items()):
                w.writerow([code_name(c), row["n"], "" if row["r2"] is None else repr(row["r2"]),
                            repr(row["mae"]), int(row["low_confidence"])])


def write_predictions_csv(path, table: ReconTable, stats: NormStats, code_name=str):
    a = table.records.arrays()
    true = zscore_inverse(a["true_norm"], a["code"], stats) if a["code"].size else []
    pred = zscore_inverse(a["pred_norm"], a["code"], stats) if a["code"].size else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "event_index", "code", "true_value", "predicted_value"])
        for k in range(a["code"].size):
            w.writerow([a["subject_id"][k], int(a["event_index"][k]), code_name(int(a["code"][k])),
                        repr(float(true[k])), repr(float(pred[k]))])


def reconstruction_table(rec: Records, stats: NormStats) -> ReconTable:
    a = rec.arrays()
    per_code, excluded = {}, {}
    if a["code"].size == 0:
        return ReconTable({}, {}, {"n": 0, "r2_median": None, "r2_mean": None, "mae_norm": None}, rec)
    true = zscore_inverse(a["true_norm"], a["code"], stats)
    pred = zscore_inverse(a["pred_norm"], a["code"], stats)
    for c in np.unique(a["code"]):
        sel = a["code"] == c
        n = int(sel.sum())
        if n < MIN_EVAL_COUNT:
            excluded[int(c)] = f"only {n} evaluated position(s)"
            continue
        try:
            score = r2(true[sel], pred[sel])
        except UndefinedStatistic:
            score = None
        per_code[int(c)] = {"n": n, "r2": score, "mae": float(np.abs(true[sel] - pred[sel]).mean()),
                            "low_confidence": n < LOW_CONFIDENCE_COUNT}
    scores = [row["r2"] for row in per_code.values() if row["r2"] is not None]
    overall = {"n": int(a["code"].size),
               "r2_median": float(np.median(scores)) if scores else None,
               "r2_mean": float(np.mean(scores)) if scores else None,
               "mae_norm": float(np.abs(a["true_norm"] - a["pred_norm"]).mean())}
    return ReconTable(per_code, excluded, overall, rec)


def evaluate_reconstruction(model, seqs, stats: NormStats, weights: WeightMap | None = None, eval_seed=2024,
                            target_ratio=0.25, plans=None) -> ReconTable:
    """Per-code R² and MAE in original units on a fixed evaluation mask."""
    if plans is None:
        plans = eval_plans(seqs, weights, eval_seed, len(stats.mean), target_ratio)
    return reconstruction_table(collect_predictions(model, seqs, plans), stats)


# policy comparison ---------------------------------------------------------

@dataclass
class ComparisonReport:
    delta: dict[int, float]
    win_rate: float | None
    wins: int
    losses: int
    ties: int
    cohens_d: float | None
    wilcoxon_p: float | None
    wilcoxon_stat: float
    wilcoxon_method: str
    pearson_cv_r2: tuple | None
    pearson_cv_r2_a: tuple | None

    def to_json(self, code_name=str) -> dict:
        doc = dict(self.__dict__)
        doc["delta"] = {code_name(c): d for c, d in sorted(self.delta.items())}
        return doc


def compare_policies(table_a: ReconTable, table_b: ReconTable, cv_by_code: dict[int, float | None]
                     ) -> ComparisonReport:
    """Paired per-code comparison of policy A against policy B (delta = R²_A - R²_B).

    Pearson correlations relate each code's CV to its R² under B (the
    reference) and, separately, under A.
    """
    ra, rb = table_a.r2_by_code(), table_b.r2_by_code()
    if set(ra) != set(rb):
        raise ValueError("tables cover different code sets")
    codes = sorted(ra)
    delta = {c: ra[c] - rb[c] for c in codes}
    d = np.array([delta[c] for c in codes])
    wins, losses = int((d > 0).sum()), int((d < 0).sum())
    ties = int(d.size - wins - losses)
    win_rate = wins / (wins + losses) if wins + losses else None
    try:
        cd = cohens_d_paired(d)
    except UndefinedStatistic:
        cd = None
    w = wilcoxon_signed_rank(d)

    def corr(table_r2):
        pairs = [(cv_by_code[c], table_r2[c]) for c in codes if cv_by_code.get(c) is not None]
        if len(pairs) < 3:
            return None
        try:
            return pearson_r(*zip(*pairs))
        except UndefinedStatistic:
            return None

    return ComparisonReport(delta, win_rate, wins, losses, ties, cd, w.p_value, w.statistic, w.method,
                            corr(rb), corr(ra))


# perturbation --------------------------------------------------------------

def perturb_history(seq: EventSequence, plan: MaskPlan, rng, factor=NOISE_FACTOR) -> EventSequence:
    """Add Gaussian noise to historical values, leaving targets, times and codes alone.

    History is every non-target value strictly before the last masked
    target. Each code's noise std is ``factor`` times the population std of
    its historical values in this sequence; codes with fewer than two such
    values are left untouched.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    times, codes, vals = seq.times(), seq.codes(), seq.values()
    targets = np.asarray(plan.mask, dtype=bool)
    if not targets.any():
        return seq
    t_ref = times[targets].max()
    hist = ~targets & ~np.isnan(vals) & (times < t_ref)
    new = vals.copy()
    for c in np.unique(codes[hist]):
        sel = hist & (codes == c)
        if sel.sum() < 2:
            continue
        sigma = float(vals[sel].std()) * factor
        if sigma > 0:
            new[sel] = vals[sel] + rng.normal(0.0, sigma, size=int(sel.sum()))
    return seq.with_values(new)


@dataclass
class PerturbReport:
    overall: dict
    per_code: dict[int, dict]
    factor: float

    def to_json(self, code_name=str) -> dict:
        return {"factor": self.factor, "overall": self.overall,
                "per_code": {code_name(c): row for c, row in sorted(self.per_code.items())}}


def _degradation(orig: float, corr: float) -> float | None:
    return None if orig == 0 else (corr - orig) / orig * 100.0


def perturbation_study(model, seqs, stats: NormStats, weights: WeightMap | None = None, eval_seed=2024,
                       noise_seed=7, factor=NOISE_FACTOR, target_ratio=0.25, plans=None) -> PerturbReport:
    """Masked-value MAE before and after corrupting history, with identical mask plans.

    Per-code MAE is in original units; the overall figure pools all masked
    positions in z-units so codes on different scales are comparable.
    """
    if plans is None:
        plans = eval_plans(seqs, weights, eval_seed, len(stats.mean), target_ratio)
    corrupted = [perturb_history(s, p, np.random.default_rng(subject_seed(noise_seed, s.subject_id)), factor)
                 for s, p in zip(seqs, plans)]
    a = collect_predictions(model, seqs, plans).arrays()
    b = collect_predictions(model, corrupted, plans).arrays()
    err_a = np.abs(a["true_norm"] - a["pred_norm"])
    err_b = np.abs(a["true_norm"] - b["pred_norm"])
    scale_ = np.maximum(stats.std[a["code"]], 1e-8)
    per_code = {}
    for c in np.unique(a["code"]):
        sel = a["code"] == c
        mo, mc = float((err_a[sel] * scale_[sel]).mean()), float((err_b[sel] * scale_[sel]).mean())
        per_code[int(c)] = {"n": int(sel.sum()), "mae_original": mo, "mae_corrupted": mc,
                            "degradation_pct": _degradation(mo, mc)}
    mo, mc = float(err_a.mean()), float(err_b.mean())
    overall = {"n": int(err_a.size), "mae_original": mo, "mae_corrupted": mc, "degradation_pct": _degradation(mo, mc)}
    return PerturbReport(overall, per_code, factor)


# historical context --------------------------------------------------------

def bucket_of(n_prior: int) -> str:
    for name, lo, hi in CONTEXT_BUCKETS:
        if n_prior >= lo and (hi is None or n_prior <= hi):
            return name
    raise ValueError(n_prior)


def context_curve(model, seqs, n_codes: int, weights: WeightMap | None = None, eval_seed=2024,
                  target_ratio=0.25) -> list[dict]:
    """MAE (z-units) of masked positions bucketed by same-code events earlier in the sequence."""
    plans = eval_plans(seqs, weights, eval_seed, n_codes, target_ratio)
    a = collect_predictions(model, seqs, plans).arrays()
    err = np.abs(a["true_norm"] - a["pred_norm"])
    names = np.array([bucket_of(int(k)) for k in a["n_prior"]], dtype=object)
    rows = []
    for name, _, _ in CONTEXT_BUCKETS:
        sel = names == name
        rows.append({"bucket": name, "n": int(sel.sum()), "mae": float(err[sel].mean()) if sel.any() else None})
    return rows
