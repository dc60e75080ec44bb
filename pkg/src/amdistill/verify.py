"""Self-check suite: library math against the plain-Python references, plus
finite-difference gradient checks. Runs offline on random fixtures."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import oracles
from .amd import AmdConfig, LayerPairing, am_loss, amd_feature_loss, angular_knowledge
from .attention import mask_negative, normalize_pair
from .kd import LossWeights, cross_entropy, kd_kl, total_loss
from .tensor import Tensor, grad_check, matmul, reduce
from .tensor.functional import batch_norm2d, conv2d, log_softmax


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tol: float
    detail: str = ""


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-300)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def _random_maps(rng, n, c, h, w):
    return rng.uniform(0.05, 1.5, size=(n, c, h, w)) * rng.choice([-1, 1], size=(n, c, h, w))


# -- tensor core ---------------------------------------------------------------

def check_conv(rng) -> float:
    worst = 0.0
    for stride, pad in [(1, 1), (2, 1), (1, 0)]:
        x = rng.normal(size=(2, 3, 6, 6))
        k = rng.normal(size=(4, 3, 3, 3))
        got = conv2d(Tensor(x), Tensor(k), stride, pad).data
        ref = oracles.conv2d(x.tolist(), k.tolist(), stride, pad)
        worst = max(worst, _rel(got, ref))
    return worst


def check_matmul(rng) -> float:
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    return _rel(matmul(Tensor(a), Tensor(b)).data, oracles.matmul(a.tolist(), b.tolist()))


def check_logsumexp(rng) -> float:
    x = rng.normal(scale=30.0, size=(6, 9))
    got = reduce("logsumexp", Tensor(x), 1).data
    return _rel(got, [oracles.logsumexp(r) for r in x.tolist()])


def grad_conv_bn(rng) -> float:
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    gamma, beta = Tensor(rng.uniform(0.5, 1.5, 3)), Tensor(rng.normal(size=3))
    w = rng.normal(size=(2, 3, 4, 4))

    def fn(x):
        y = conv2d(x, k, 1, 1)
        y = batch_norm2d(y, gamma, beta, np.zeros(3), np.ones(3), training=True)
        return reduce("sum", y.relu() * Tensor(w))

    x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
    return grad_check(fn, x, tol=1e-6, rng=rng).max_rel_err


def grad_log_softmax(rng) -> float:
    w = Tensor(rng.normal(size=(4, 6)))
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    return grad_check(lambda t: reduce("sum", log_softmax(t, 1) * w), x, tol=1e-6, rng=rng).max_rel_err


# -- amd loss ------------------------------------------------------------------

def check_angular_component(rng) -> float:
    """Library angular knowledge map against the literal exp-ratio reference."""
    worst = 0.0
    for s, m in [(1.0, 1.0), (30.0, 1.35), (64.0, 1.35), (64.0, 2.0)]:
        f = rng.uniform(0.0, 1.0, size=(1, 5, 5))
        pair = normalize_pair(Tensor(f))
        got = angular_knowledge(pair, s, m).g.data[0]
        tp, tn = oracles.positive_negative(f[0].tolist())
        worst = max(worst, _rel(got, oracles.g_map(tp, tn, s, m)))
    return worst


def _am_fixture(rng, masked: bool):
    f_t = rng.uniform(0.0, 1.0, size=(3, 6, 6))
    f_s = rng.uniform(0.0, 1.0, size=(3, 6, 6))
    cfg = AmdConfig(s=64.0, m=1.35)
    tp, sp = normalize_pair(Tensor(f_t), "l"), normalize_pair(Tensor(f_s), "l")
    if masked:
        tp, sp = mask_negative(tp), mask_negative(sp)
    loss, parts = am_loss([tp], [sp], cfg)
    ref, ref_parts = oracles.am_loss([f_t.tolist()], [f_s.tolist()], 64.0, 1.35, masked=masked)
    return loss, parts, ref, ref_parts


def check_am_components(rng, key: str) -> float:
    _, parts, _, ref_parts = _am_fixture(rng, masked=False)
    idx = "APN".index(key)
    return _rel(parts[0][key], ref_parts[0][idx])


def check_am_masked(rng) -> float:
    loss, _, ref, _ = _am_fixture(rng, masked=True)
    return _rel(loss.data, ref)


def check_amd_local(rng) -> float:
    a_t = _random_maps(rng, 2, 3, 4, 4)
    a_s = _random_maps(rng, 2, 2, 4, 4)
    cfg = AmdConfig(use_local=True)
    pairing = LayerPairing([("t", "s")])
    loss, _ = amd_feature_loss({"t": Tensor(a_t)}, {"s": Tensor(a_s)}, pairing, cfg)
    f_t = [oracles.attention_map(x) for x in a_t.tolist()]
    f_s = [oracles.attention_map(x) for x in a_s.tolist()]
    ref = oracles.amd_feature_loss([f_t], [f_s], cfg.s, cfg.m, use_local=True)
    return _rel(loss.data, ref)


def grad_amd(rng) -> float:
    a_t = Tensor(_random_maps(rng, 2, 3, 4, 4))
    cfg = AmdConfig(use_local=True, use_mask=True, s=8.0)
    pairing = LayerPairing([("t", "s")])
    x = Tensor(_random_maps(rng, 2, 2, 4, 4), requires_grad=True)
    fn = lambda t: amd_feature_loss({"t": a_t}, {"s": t}, pairing, cfg)[0]
    return grad_check(fn, x, step=1e-6, tol=1e-4, rng=rng).max_rel_err


# -- kd loss -------------------------------------------------------------------

def check_ce(rng) -> float:
    logits, y = rng.normal(scale=3.0, size=(6, 5)), rng.integers(0, 5, 6)
    return _rel(cross_entropy(Tensor(logits), y).data, oracles.cross_entropy(logits.tolist(), y.tolist()))


def check_kd(rng) -> float:
    a_t, a_s = rng.normal(scale=3.0, size=(6, 5)), rng.normal(scale=3.0, size=(6, 5))
    return _rel(kd_kl(Tensor(a_t), Tensor(a_s), 4.0).data, oracles.kd_kl(a_t.tolist(), a_s.tolist(), 4.0))


def grad_total(rng) -> float:
    a_t = Tensor(rng.normal(size=(3, 4)))
    taps_t = {"t": Tensor(_random_maps(rng, 3, 2, 4, 4))}
    y = rng.integers(0, 4, 3)
    w = Tensor(rng.normal(size=(4, 2 * 16)) * 0.3)
    pairing = LayerPairing([("t", "s")])
    weights = LossWeights(0.1, 0.9, 4.0, 50.0)
    cfg = AmdConfig(s=8.0, use_local=True)

    def fn(x):
        logits = matmul(x.reshape((3, 32)), w.transpose())
        return total_loss(a_t, logits, y, taps_t, {"s": x}, pairing, weights, cfg)[0]

    x = Tensor(_random_maps(rng, 3, 2, 4, 4), requires_grad=True)
    return grad_check(fn, x, step=1e-6, tol=1e-4, rng=rng).max_rel_err


# (name, function, tolerance)
CHECKS: List = [
    ("tensor.conv2d-oracle", check_conv, 1e-10),
    ("tensor.matmul-oracle", check_matmul, 1e-12),
    ("tensor.logsumexp-oracle", check_logsumexp, 1e-12),
    ("tensor.grad-conv-bn", grad_conv_bn, 1e-6),
    ("tensor.grad-log-softmax", grad_log_softmax, 1e-6),
    ("amd.A-component", check_angular_component, 1e-6),
    ("amd.A-loss-oracle", lambda r: check_am_components(r, "A"), 1e-6),
    ("amd.P-loss-oracle", lambda r: check_am_components(r, "P"), 1e-6),
    ("amd.N-loss-oracle", lambda r: check_am_components(r, "N"), 1e-6),
    ("amd.masked-oracle", check_am_masked, 1e-6),
    ("amd.global-local-oracle", check_amd_local, 1e-6),
    ("amd.grad-feature-loss", grad_amd, 1e-4),
    ("kd.cross-entropy-oracle", check_ce, 1e-12),
    ("kd.kl-oracle", check_kd, 1e-10),
    ("kd.grad-total-loss", grad_total, 1e-4),
]


def run_checks(seed: int = 0, only: Optional[Callable[[str], bool]] = None) -> List[CheckResult]:
    results = []
    for name, fn, tol in CHECKS:
        if only is not None and not only(name):
            continue
        rng = np.random.default_rng(seed)
        try:
            err = float(fn(rng))
            results.append(CheckResult(name, bool(err <= tol), err, tol))
        except Exception as exc:  # a crash is a failed check, reported in the table
            results.append(CheckResult(name, False, float("nan"), tol, f"{type(exc).__name__}: {exc}"))
    return results


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  result  rel_err     tol"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{r.name.ljust(width)}  {status}    {r.error:.3e}  {r.tol:.0e}"
        if r.detail:
            line += f"  {r.detail}"
        lines.append(line)
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines)
