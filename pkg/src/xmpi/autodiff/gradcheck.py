"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import backward


def gradcheck(fn, params, eps: float = 1e-6, probes: int | None = 8, rng=None, floor: float = 1e-7) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn()`` must rebuild the scalar loss from the current values of
    ``params`` (float64 tensors) on each call. ``probes`` entries per
    parameter are checked (all when None). The relative error of one entry is
    ``|g_fd - g| / max(|g_fd|, |g|, floor)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"finite-difference checks need float64 parameters, got {p.dtype}")
    grads = backward(fn(), params, allow_unused=True)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size) if probes is None or flat.size <= probes else \
            rng.choice(flat.size, probes, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), floor)
            worst = max(worst, err)
    return worst
