"""Logit distillation and the combined training objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .amd import AmdConfig, LayerPairing, amd_feature_loss
from .tensor import Tensor, log_softmax, reduce
from .tensor.functional import log_softmax_np


@dataclass
class LossWeights:
    """Weights of the CE, KD and AMD terms.

    Classic two-term KD with a single ``lam`` corresponds to
    ``lambda1 = 1 - lam, lambda2 = lam``.
    """

    lambda1: float = 0.1
    lambda2: float = 0.9
    tau: float = 4.0
    gamma: float = 5000.0

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.tau < 1:
            raise ValueError(f"temperature must be >= 1, got {self.tau}")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    @classmethod
    def complementary(cls, lam: float, tau: float = 4.0, gamma: float = 0.0) -> "LossWeights":
        return cls(1.0 - lam, lam, tau, gamma)


def _targets(labels, n: int, j: int, dtype) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 2:
        if y.shape != (n, j):
            raise ValueError(f"soft targets shape {y.shape} != {(n, j)}")
        return y.astype(dtype)
    y = y.astype(np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for {n} logits")
    if y.min(initial=0) < 0 or y.max(initial=0) >= j:
        raise ValueError(f"label out of range [0, {j})")
    onehot = np.zeros((n, j), dtype=dtype)
    onehot[np.arange(n), y] = 1
    return onehot


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[y]; ``labels`` may be ints or (n, J) soft targets."""
    n, j = logits.shape
    target = Tensor(_targets(labels, n, j, logits.dtype))
    per_sample = reduce("sum", log_softmax(logits, 1) * target, 1)
    return -reduce("mean", per_sample, 0)


def kd_kl(a_t: Tensor, a_s: Tensor, tau: float) -> Tensor:
    """tau^2 * KL(softmax(a_t/tau) || softmax(a_s/tau)), averaged over the batch.

    The teacher side is treated as a constant.
    """
    if a_t.shape != a_s.shape:
        raise ValueError(f"logit shapes differ: {a_t.shape} vs {a_s.shape}")
    if tau < 1:
        raise ValueError(f"temperature must be >= 1, got {tau}")
    log_p = log_softmax_np(np.asarray(a_t.data, dtype=np.float64) / tau).astype(a_s.dtype)
    p = np.exp(log_p)
    log_q = log_softmax(a_s * (1.0 / tau), 1)
    # sum_j p_j (log p_j - log q_j); the entropy part is a constant
    cross = reduce("sum", log_q * Tensor(p), 1)
    neg_entropy = (p * log_p).sum(axis=1)
    kl = Tensor(neg_entropy) - cross
    return reduce("mean", kl, 0) * (tau * tau)


def total_loss(a_t: Optional[Tensor], a_s: Tensor, y, taps_t: Optional[Mapping[str, Tensor]],
               taps_s: Optional[Mapping[str, Tensor]], pairing: Optional[LayerPairing],
               weights: LossWeights, amd_cfg: Optional[AmdConfig]) -> Tuple[Tensor, Dict]:
    """lambda1 * CE + lambda2 * KD + gamma * AMD.

    KD is skipped when no teacher logits are given; AMD is skipped when no
    pairing is given. Skipped terms are logged as 0.
    """
    ce = cross_entropy(a_s, y)
    loss = ce * weights.lambda1
    out = {"ce": float(ce.data), "kd": 0.0, "amd": 0.0, "components": [], "local": None}
    if a_t is not None:
        kd = kd_kl(a_t, a_s, weights.tau)
        loss = loss + kd * weights.lambda2
        out["kd"] = float(kd.data)
    if pairing is not None and len(pairing):
        if taps_t is None or taps_s is None or amd_cfg is None:
            raise ValueError("AMD term needs teacher taps, student taps and an AmdConfig")
        la, info = amd_feature_loss(taps_t, taps_s, pairing, amd_cfg)
        loss = loss + la * weights.gamma
        out["amd"] = float(la.data)
        out["components"] = info["components"]
        out["local"] = info.get("local")
    out["weighted"] = {"ce": weights.lambda1 * out["ce"], "kd": weights.lambda2 * out["kd"],
                       "amd": weights.gamma * out["amd"]}
    out["total"] = float(loss.data)
    return loss, out
