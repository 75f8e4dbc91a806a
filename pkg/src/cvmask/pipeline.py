"""Shared data preparation: split, truncate, normalise, volatility statistics."""
from __future__ import annotations

from dataclasses import dataclass

from .meds import NormStats, Vocabulary, split_patients, truncate, values_by_code, zscore_apply, zscore_fit
from .volatility import CodeStats, WeightMap, assign_weights, compute_code_stats


@dataclass
class Prepared:
    vocab: Vocabulary
    raw: dict[str, list]
    norm: dict[str, list]
    norm_stats: NormStats
    code_stats: list[CodeStats]
    assignment: dict[str, str]

    def weights(self, policy: str, seed=0) -> WeightMap:
        return assign_weights(policy, self.code_stats, seed)

    def cv_by_code(self) -> dict[int, float | None]:
        return {s.code: s.cv for s in self.code_stats}


def prepare(seqs, vocab: Vocabulary, seed=42, ratios=(0.70, 0.15, 0.15), max_len=512) -> Prepared:
    assignment = split_patients([s.subject_id for s in seqs], ratios, seed)
    raw = {name: [truncate(s, max_len) for s in seqs if assignment[s.subject_id] == name]
           for name in ("train", "valid", "test")}
    norm_stats = zscore_fit(raw["train"], len(vocab))
    norm = {name: [zscore_apply(s, norm_stats) for s in part] for name, part in raw.items()}
    code_stats = compute_code_stats(values_by_code(raw["train"], len(vocab)))
    return Prepared(vocab, raw, norm, norm_stats, code_stats, assignment)


def apply_existing(seqs, prepared: Prepared, max_len=512) -> list:
    """Normalise an unseen cohort with already-fitted training statistics."""
    return [zscore_apply(truncate(s, max_len), prepared.norm_stats) for s in seqs]
