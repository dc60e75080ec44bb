"""Attention maps and their positive/negative decomposition.

An activation ``A`` of shape (n, c, h, w) is collapsed over channels into
``f = sum_j |A_j|^d``. The positive map is ``f`` divided by its per-sample
Frobenius norm and the negative map is its complement ``1 - q_pos``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from .tensor import Tensor, avg_pool2d, expand, reduce


class DegenerateAttentionError(ValueError):
    pass


@dataclass
class AttentionPair:
    q_pos: Tensor
    q_neg: Tensor
    layer: str = ""
    scope: str = "global"   # "global", "local", or "masked"
    quadrant: Optional[int] = None
    # raw map the pair was normalised from; local splits re-normalise slices of it
    f: Optional[Tensor] = None

    @property
    def shape(self):
        return self.q_pos.shape


def attention_map(a: Tensor, d: float = 2) -> Tensor:
    """Channel-summed |A|^d, shape (n, 1, h, w)."""
    if a.ndim != 4:
        raise ValueError(f"expected an (n, c, h, w) activation, got {a.shape}")
    if a.shape[1] == 0:
        raise ValueError("activation has an empty channel axis")
    if d < 1:
        raise ValueError(f"attention power must be >= 1, got {d}")
    powered = a * a if d == 2 else a.abs() ** d
    return reduce("sum", powered, 1, keepdims=True)


def frobenius_normalize(x: Tensor, eps: float = 0.0, guard_zero: bool = False) -> Tensor:
    """Divide every sample of ``x`` by its Frobenius norm over all non-batch axes.

    ``guard_zero`` (implied by a nonzero ``eps``) maps an all-zero sample to
    zeros with a finite gradient instead of dividing by zero.
    """
    axes = tuple(range(1, x.ndim))
    sq = reduce("sum", x * x, axes, keepdims=True)
    if guard_zero or eps:
        zero = (sq.data == 0).astype(x.dtype)
        if zero.any():
            sq = sq + Tensor(zero)
    norm = sq ** 0.5
    if eps:
        norm = norm + eps
    return x / expand(norm, x.shape)


def normalize_pair(f: Tensor, layer: str = "", eps: float = 0.0) -> AttentionPair:
    """Build (q_pos, q_neg) from an attention map.

    Raises:
        DegenerateAttentionError: a sample's map is identically zero and ``eps`` is 0.
    """
    norms = np.sqrt((f.data.astype(np.float64) ** 2).reshape(f.shape[0], -1).sum(axis=1))
    if eps == 0.0 and np.any(norms == 0):
        bad = np.flatnonzero(norms == 0).tolist()
        raise DegenerateAttentionError(f"degenerate attention map (all zero) for samples {bad}"
                                       + (f" at {layer}" if layer else ""))
    q_pos = frobenius_normalize(f, eps=eps)
    q_neg = 1.0 - q_pos
    return AttentionPair(q_pos, q_neg, layer=layer, f=f)


def split_local(pair: AttentionPair, mode: str = "renormalize", eps: float = 0.0) -> List[AttentionPair]:
    """Split a pair into its four 2x2 quadrants (row-major: TL, TR, BL, BR).

    ``mode="renormalize"`` re-derives each quadrant from the matching slice of
    the raw map; ``mode="slice"`` slices the already-normalised maps.
    """
    n, _, h, w = pair.shape
    if h % 2 or w % 2:
        raise ValueError(f"local split needs even spatial extents, got {h}x{w}"
                         + (f" at {pair.layer}" if pair.layer else ""))
    if mode not in ("renormalize", "slice"):
        raise ValueError(f"unknown local mode {mode!r}")
    if mode == "renormalize" and pair.f is None:
        raise ValueError("renormalize mode needs the raw attention map on the pair")
    hh, hw = h // 2, w // 2
    out = []
    for k in range(4):
        r, c = divmod(k, 2)
        idx = (slice(None), slice(None), slice(r * hh, (r + 1) * hh), slice(c * hw, (c + 1) * hw))
        if mode == "renormalize":
            sub = normalize_pair(pair.f[idx], layer=pair.layer, eps=eps)
            out.append(replace(sub, scope="local", quadrant=k))
        else:
            out.append(AttentionPair(pair.q_pos[idx], pair.q_neg[idx], pair.layer, "local", k,
                                     None if pair.f is None else pair.f[idx]))
    return out


def mask_negative(pair: AttentionPair, threshold: float = 0.5) -> AttentionPair:
    """Zero the negative map wherever it is not above ``threshold``.

    The masked pair no longer satisfies q_pos + q_neg == 1.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"mask threshold must lie in (0, 1), got {threshold}")
    keep = (pair.q_neg.data > threshold).astype(pair.q_neg.dtype)
    return replace(pair, q_neg=pair.q_neg * Tensor(keep), scope="masked")


def align_spatial(f_t: Tensor, f_s: Tensor):
    """Average-pool the larger of two attention maps down to the other's size."""
    ht, hs = f_t.shape[2], f_s.shape[2]
    if f_t.shape[2:] == f_s.shape[2:]:
        return f_t, f_s
    big, small = (f_t, f_s) if ht > hs else (f_s, f_t)
    kh = big.shape[2] // small.shape[2]
    kw = big.shape[3] // small.shape[3]
    if kh != kw or big.shape[2] != kh * small.shape[2] or big.shape[3] != kw * small.shape[3]:
        raise ValueError(f"cannot align attention maps {f_t.shape[2:]} and {f_s.shape[2:]}")
    pooled = avg_pool2d(big, kh)
    return (pooled, f_s) if ht > hs else (f_t, pooled)
