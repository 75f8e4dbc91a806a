"""Small hand-built inputs shared by model and acceptance tests."""
import numpy as np

from cvmask.meds import EventSequence, Triplet
from cvmask.model import ModelConfig, init_params
from cvmask.volatility import MaskPlan

VOCAB = 6


def toy_sequences():
    """Two sequences of unequal length; code 0 carries no value (admission-like)."""
    a = EventSequence("a", [Triplet(0.0, 0, None), Triplet(1.0, 1, 0.5), Triplet(2.5, 2, -1.0),
                            Triplet(3.0, 1, 0.7), Triplet(4.0, 3, 1.5), Triplet(6.0, 4, -0.2)])
    b = EventSequence("b", [Triplet(0.0, 0, None), Triplet(0.5, 5, 2.0), Triplet(1.5, 2, 0.1),
                            Triplet(2.0, 5, 1.1)])
    return [a, b]


def toy_plans(seqs, masked=((2, 4), (1,))):
    plans = []
    for s, idx in zip(seqs, masked):
        m = np.zeros(len(s), dtype=bool)
        m[list(idx)] = True
        plans.append(MaskPlan(m, m.sum() / s.present().sum(), 0.25))
    return plans


def desk_model(seed=0, jitter=0.1, **overrides):
    """Desk-preset parameters with every array perturbed, so no gain/bias sits at a special value."""
    cfg = ModelConfig.preset("desk", VOCAB, **overrides)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for p in params.values():
        p.data += jitter * rng.normal(size=p.data.shape)
    return cfg, params
