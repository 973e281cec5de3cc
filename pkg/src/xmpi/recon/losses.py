"""Data-consistency and adversarial objectives."""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.nn import network_forward
from ..autodiff.tensor import Tensor

#: log-sigmoid values are floored here, so losses saturate instead of reaching log(0)
LOG_FLOOR = math.log(1e-7)


def weighted_mse(pred: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    diff = pred - np.asarray(target, pred.dtype)
    sq = T.square(diff)
    if weight is None:
        return T.mean(sq)
    w = np.asarray(weight, pred.dtype)
    return T.tsum(sq * w) * (1.0 / float(w.sum()))


def adversarial_losses(real, fake, discriminator, floor: float = LOG_FLOOR) -> dict[str, Tensor]:
    """Discriminator and non-saturating generator losses for logit-output ``discriminator``.

    ``d_loss = -(mean log σ(D(real)) + mean log(1 - σ(D(fake))))``,
    ``g_loss = -mean log σ(D(fake))``.
    """
    real = T.as_tensor(real)
    fake = T.as_tensor(fake)
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("patch sets must be non-empty")
    lr = network_forward(discriminator, real)
    lf = network_forward(discriminator, fake)
    d_loss = -(T.mean(T.log_sigmoid(lr, floor)) + T.mean(T.log_sigmoid(-lf, floor)))
    g_loss = -T.mean(T.log_sigmoid(lf, floor))
    return {"d_loss": d_loss, "g_loss": g_loss, "real_logits": lr, "fake_logits": lf}
