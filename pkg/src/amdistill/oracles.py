"""Independent reference implementations in plain Python floats.

Nothing here touches the tensor library: maps are nested lists, loops are
explicit, and the angular knowledge uses the literal exp/exp-sum ratio rather
than the stabilised form. These are the ground truth for the verify command
and the test-suite.
"""
from __future__ import annotations

import math
from typing import List, Sequence

Map = List[List[float]]


def attention_map(activation: Sequence[Map], d: float = 2.0) -> Map:
    """activation: c maps of h x w -> sum_j |A_j|^d."""
    h, w = len(activation[0]), len(activation[0][0])
    out = [[0.0] * w for _ in range(h)]
    for ch in activation:
        for i in range(h):
            for j in range(w):
                out[i][j] += abs(ch[i][j]) ** d
    return out


def frobenius(m: Map) -> float:
    return math.sqrt(sum(v * v for row in m for v in row))


def normalize(m: Map) -> Map:
    n = frobenius(m)
    if n == 0.0:
        return [[0.0 for _ in row] for row in m]
    return [[v / n for v in row] for row in m]


def positive_negative(f: Map):
    q_pos = normalize(f)
    q_neg = [[1.0 - v for v in row] for row in q_pos]
    return q_pos, q_neg


def g_literal(q_pos: float, q_neg: float, s: float, m: float) -> float:
    """log( e^{s cos(m acos q_pos)} / (e^{s cos(m acos q_pos)} + e^{s cos(acos q_neg)}) )."""
    q_pos = min(max(q_pos, -1.0), 1.0)
    q_neg = min(max(q_neg, -1.0), 1.0)
    a = math.exp(s * math.cos(m * math.acos(q_pos)))
    b = math.exp(s * math.cos(math.acos(q_neg)))
    return math.log(a / (a + b))


def g_map(q_pos: Map, q_neg: Map, s: float, m: float) -> Map:
    return [[g_literal(p, n, s, m) for p, n in zip(rp, rn)] for rp, rn in zip(q_pos, q_neg)]


def sq_dist(a: Map, b: Map) -> float:
    return sum((x - y) ** 2 for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def mask(q_neg: Map, threshold: float = 0.5) -> Map:
    return [[v if v > threshold else 0.0 for v in row] for row in q_neg]


def am_loss(teacher: Sequence[Sequence[Map]], student: Sequence[Sequence[Map]], s: float,
            m: float, masked: bool = False, threshold: float = 0.5):
    """teacher/student: per layer, per sample, an attention map f (h x w).

    Returns (loss, [(A, P, N) per layer]) with batch-mean reduction.
    """
    total = 0.0
    parts = []
    for f_t_batch, f_s_batch in zip(teacher, student):
        a_sum = p_sum = n_sum = 0.0
        for f_t, f_s in zip(f_t_batch, f_s_batch):
            tp, tn = positive_negative(f_t)
            sp, sn = positive_negative(f_s)
            if masked:
                tn, sn = mask(tn, threshold), mask(sn, threshold)
            a_sum += sq_dist(normalize(g_map(tp, tn, s, m)), normalize(g_map(sp, sn, s, m)))
            p_sum += sq_dist(normalize(tp), normalize(sp))
            n_sum += sq_dist(normalize(tn), normalize(sn))
        nb = len(f_t_batch)
        parts.append((a_sum / nb, p_sum / nb, n_sum / nb))
        total += (a_sum + p_sum + n_sum) / nb
    return total / (3 * len(teacher)), parts


def quadrants(f: Map) -> List[Map]:
    h, w = len(f), len(f[0])
    hh, hw = h // 2, w // 2
    return [[row[c * hw:(c + 1) * hw] for row in f[r * hh:(r + 1) * hh]]
            for r in range(2) for c in range(2)]


def amd_feature_loss(teacher, student, s, m, use_local=False, local_weight=0.2,
                     masked=False, threshold=0.5) -> float:
    glob, _ = am_loss(teacher, student, s, m, masked, threshold)
    if not use_local:
        return glob
    local = 0.0
    for k in range(4):
        tq = [[quadrants(f)[k] for f in layer] for layer in teacher]
        sq = [[quadrants(f)[k] for f in layer] for layer in student]
        local += am_loss(tq, sq, s, m, masked, threshold)[0]
    return (1 - local_weight) * glob + local_weight * local / 4


def log_softmax(row: Sequence[float]) -> List[float]:
    mx = max(row)
    z = math.log(sum(math.exp(v - mx) for v in row)) + mx
    return [v - z for v in row]


def cross_entropy(logits: Sequence[Sequence[float]], labels: Sequence[int]) -> float:
    return sum(-log_softmax(r)[y] for r, y in zip(logits, labels)) / len(labels)


def kd_kl(t_logits, s_logits, tau: float) -> float:
    total = 0.0
    for rt, rs in zip(t_logits, s_logits):
        lp = log_softmax([v / tau for v in rt])
        lq = log_softmax([v / tau for v in rs])
        total += sum(math.exp(a) * (a - b) for a, b in zip(lp, lq))
    return tau * tau * total / len(t_logits)


def logsumexp(values: Sequence[float]) -> float:
    mx = max(values)
    return mx + math.log(sum(math.exp(v - mx) for v in values))


def matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def conv2d(x, w, stride=1, padding=0):
    """Direct six-loop cross-correlation over nested lists x[n][c][h][w], w[o][c][kh][kw]."""
    n, c, h, wd = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    o, kh, kw = len(w), len(w[0][0]), len(w[0][0][0])
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = [[[[0.0] * ow for _ in range(oh)] for _ in range(o)] for _ in range(n)]
    for b in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                y = i * stride + u - padding
                                z = j * stride + v - padding
                                if 0 <= y < h and 0 <= z < wd:
                                    acc += x[b][ch][y][z] * w[f][ch][u][v]
                    out[b][f][i][j] = acc
    return out
