from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def grad_check(f: Callable[[dict], Tensor], params: dict[str, Tensor], h=1e-5,
               n_coords=200, seed=0, return_details=False):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` rebuilds the graph from ``params`` on each call and must be
    deterministic. At least ``n_coords`` coordinates (all of them when there
    are fewer) are checked, sampled across every parameter.
    """
    analytic = backward(f(params), params, allow_unused=True)
    coords = [(name, i) for name, p in params.items() for i in range(p.data.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        # every parameter contributes at least one coordinate
        picked = {(name, int(rng.integers(p.data.size))) for name, p in params.items()}
        rest = rng.choice(len(coords), size=n_coords, replace=False)
        picked.update(coords[i] for i in rest)
        coords = sorted(picked)
    worst, details = 0.0, []
    for name, i in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(params).data)
        flat[i] = orig - h
        fm = float(f(params).data)
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        ana = float(analytic[name].reshape(-1)[i])
        err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
        worst = max(worst, err)
        details.append((name, i, ana, num, err))
    return (worst, details) if return_details else worst
