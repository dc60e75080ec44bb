"""Angular-margin distillation loss.

For each paired teacher/student layer the positive and negative attention maps
are read as cosines, the positive angle is stretched by a margin ``m``, and the
per-pixel log-probability that the (scaled) positive cosine beats the negative
one becomes the transferred knowledge ``g``. The loss matches ``g`` and both
attention maps between teacher and student, after per-sample Frobenius
normalisation.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

from .attention import (
    AttentionPair,
    align_spatial,
    attention_map,
    frobenius_normalize,
    mask_negative,
    normalize_pair,
    split_local,
)
from .tensor import Tensor, acos, cos, logaddexp, reduce

# Test hook for mutation testing of the verify command; see verify.py.
FAULT_ENV = "AMDISTILL_FAULT"


class PairingError(ValueError):
    pass


class TeacherMaps(dict):
    """Teacher attention maps computed ahead of time, keyed by tap name.

    Passed in place of raw teacher taps when the teacher's inputs are fixed.
    """


@dataclass
class AmdConfig:
    s: float = 64.0
    m: float = 1.35
    gamma: float = 5000.0
    local_weight: float = 0.2
    global_weight: float = 0.8
    use_local: bool = False
    use_mask: bool = False
    d: float = 2.0
    mask_threshold: float = 0.5
    local_mode: str = "renormalize"
    norm_eps: float = 0.0

    def validate(self) -> None:
        if not self.s > 0:
            raise ValueError(f"scale s must be positive, got {self.s}")
        if self.m < 1:
            raise ValueError(f"margin m must be >= 1, got {self.m}")
        if self.m > 2:
            warnings.warn(f"margin m={self.m} > 2: m*theta can exceed pi and cos stops "
                          "being monotone", stacklevel=2)
        if abs(self.local_weight + self.global_weight - 1.0) > 1e-9:
            raise ValueError("local_weight + global_weight must equal 1")
        if self.d < 1:
            raise ValueError("attention power d must be >= 1")
        if not 0 < self.mask_threshold < 1:
            raise ValueError("mask_threshold must lie in (0, 1)")
        if self.local_mode not in ("renormalize", "slice"):
            raise ValueError(f"unknown local_mode {self.local_mode!r}")


@dataclass
class AngularKnowledge:
    g: Tensor
    layer: str = ""


@dataclass
class LayerPairing:
    """Ordered (teacher tap, student tap) transfer points."""

    pairs: List[Tuple[str, str]] = field(default_factory=list)

    @classmethod
    def by_group(cls, teacher_taps: Sequence[str], student_taps: Sequence[str]) -> "LayerPairing":
        """Pair the i-th group of the teacher with the i-th group of the student."""
        if len(teacher_taps) != len(student_taps):
            raise PairingError(f"teacher exposes {len(teacher_taps)} groups, student "
                               f"{len(student_taps)}; pairing needs equal group counts")
        return cls(list(zip(teacher_taps, student_taps)))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def angular_knowledge(pair: AttentionPair, s: float, m: float) -> AngularKnowledge:
    """Per-pixel log-softmax of [s*cos(m*theta_p), s*cos(theta_n)], first entry."""
    pos = cos(acos(pair.q_pos) * m) * s
    neg = cos(acos(pair.q_neg)) * s
    g = pos - logaddexp(pos, neg)
    if os.environ.get(FAULT_ENV) == "g-sign":
        g = -g
    return AngularKnowledge(g, pair.layer)


def _sq_frobenius_batch_mean(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    per_sample = reduce("sum", diff * diff, tuple(range(1, diff.ndim)))
    return reduce("mean", per_sample, 0)


def _detached(pair: AttentionPair) -> AttentionPair:
    if pair.q_pos.requires_grad or pair.q_neg.requires_grad:
        return AttentionPair(pair.q_pos.detach(), pair.q_neg.detach(), pair.layer,
                             pair.scope, pair.quadrant, None if pair.f is None else pair.f.detach())
    return pair


def am_loss(teacher_pairs: Sequence[AttentionPair], student_pairs: Sequence[AttentionPair],
            cfg: AmdConfig) -> Tuple[Tensor, List[Dict[str, float]]]:
    """Three-term loss averaged over layers: (1/3|L|) * sum_l (A + P + N).

    Returns the loss and one ``{"layer", "A", "P", "N"}`` record per layer.
    Teacher inputs are detached.
    """
    if not teacher_pairs:
        raise PairingError("empty layer pairing")
    if len(teacher_pairs) != len(student_pairs):
        raise PairingError("teacher and student pair lists differ in length")
    total = None
    parts = []
    for tp, sp in zip(teacher_pairs, student_pairs):
        tp = _detached(tp)
        if tp.shape != sp.shape:
            raise ValueError(f"attention shapes differ at {sp.layer}: {tp.shape} vs {sp.shape}")
        g_t = angular_knowledge(tp, cfg.s, cfg.m).g
        g_s = angular_knowledge(sp, cfg.s, cfg.m).g
        a = _sq_frobenius_batch_mean(frobenius_normalize(g_t, guard_zero=True),
                                     frobenius_normalize(g_s, guard_zero=True))
        p = _sq_frobenius_batch_mean(frobenius_normalize(tp.q_pos, guard_zero=True),
                                     frobenius_normalize(sp.q_pos, guard_zero=True))
        n = _sq_frobenius_batch_mean(frobenius_normalize(tp.q_neg, guard_zero=True),
                                     frobenius_normalize(sp.q_neg, guard_zero=True))
        term = a + p + n
        total = term if total is None else total + term
        parts.append({"layer": sp.layer or tp.layer, "A": float(a.data), "P": float(p.data),
                      "N": float(n.data)})
    return total / (3 * len(teacher_pairs)), parts


def build_pairs(taps_t: Mapping[str, Tensor], taps_s: Mapping[str, Tensor],
                pairing: LayerPairing, cfg: AmdConfig):
    """Attention pairs for every transfer point, spatially aligned."""
    t_pairs, s_pairs = [], []
    for lt, ls in pairing:
        if lt not in taps_t:
            raise PairingError(f"teacher has no tap {lt!r}")
        if ls not in taps_s:
            raise PairingError(f"student has no tap {ls!r}")
        if isinstance(taps_t, TeacherMaps):
            f_t = taps_t[lt].detach()
        else:
            f_t = attention_map(taps_t[lt].detach(), cfg.d)
        f_s = attention_map(taps_s[ls], cfg.d)
        f_t, f_s = align_spatial(f_t, f_s)
        t_pairs.append(normalize_pair(f_t, layer=lt, eps=cfg.norm_eps))
        s_pairs.append(normalize_pair(f_s, layer=ls, eps=cfg.norm_eps))
    return t_pairs, s_pairs


def _maybe_mask(pairs, cfg):
    return [mask_negative(p, cfg.mask_threshold) for p in pairs] if cfg.use_mask else list(pairs)


def amd_feature_loss(taps_t: Mapping[str, Tensor], taps_s: Mapping[str, Tensor],
                     pairing: LayerPairing, cfg: AmdConfig) -> Tuple[Tensor, Dict]:
    """Global AM loss, optionally blended with the mean of the four quadrant losses."""
    if not len(pairing):
        raise PairingError("empty layer pairing")
    t_pairs, s_pairs = build_pairs(taps_t, taps_s, pairing, cfg)
    global_loss, global_parts = am_loss(_maybe_mask(t_pairs, cfg), _maybe_mask(s_pairs, cfg), cfg)
    info = {"global": float(global_loss.data), "components": global_parts}
    if not cfg.use_local:
        return global_loss, info

    t_quads = [split_local(p, cfg.local_mode, cfg.norm_eps) for p in t_pairs]
    s_quads = [split_local(p, cfg.local_mode, cfg.norm_eps) for p in s_pairs]
    local_sum = None
    for k in range(4):
        lk, _ = am_loss(_maybe_mask([q[k] for q in t_quads], cfg),
                        _maybe_mask([q[k] for q in s_quads], cfg), cfg)
        local_sum = lk if local_sum is None else local_sum + lk
    local_loss = local_sum / 4
    info["local"] = float(local_loss.data)
    return global_loss * cfg.global_weight + local_loss * cfg.local_weight, info

