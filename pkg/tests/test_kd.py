import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from amdistill import oracles
from amdistill.amd import AmdConfig, LayerPairing
from amdistill.kd import LossWeights, cross_entropy, kd_kl, total_loss
from amdistill.tensor import Tensor, grad_check

logits_2x4 = hnp.arrays(np.float64, (2, 4), elements=st.floats(-20, 20, width=64))


class TestLossWeights:
    def test_presets(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.tau, w.gamma) == (0.1, 0.9, 4.0, 5000.0)

    def test_complementary(self):
        w = LossWeights.complementary(0.9)
        assert w.lambda1 == pytest.approx(0.1) and w.lambda2 == 0.9

    @pytest.mark.parametrize("kw", [{"lambda1": -1}, {"lambda2": -0.1}, {"tau": 0.5}, {"gamma": -1}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            LossWeights(**kw).validate()


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(math.log(10), rel=1e-15)

    def test_huge_aligned_logit(self):
        logits = np.zeros((2, 5))
        logits[0, 1] = logits[1, 3] = 200.0
        assert cross_entropy(Tensor(logits), [1, 3]).item() == pytest.approx(0.0, abs=1e-60)

    def test_against_scalar_oracle(self, rng):
        logits, y = rng.normal(scale=4, size=(4, 10)), rng.integers(0, 10, 4)
        ref = oracles.cross_entropy(logits.tolist(), y.tolist())
        assert cross_entropy(Tensor(logits), y).item() == pytest.approx(ref, rel=1e-9)

    def test_soft_targets(self, rng):
        logits = rng.normal(size=(3, 4))
        onehot = np.eye(4)[[0, 2, 3]]
        assert cross_entropy(Tensor(logits), onehot).item() == pytest.approx(
            cross_entropy(Tensor(logits), [0, 2, 3]).item(), rel=1e-15)

    @pytest.mark.parametrize("labels", [[0, 4], [-1, 0]])
    def test_out_of_range(self, labels):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 4))), labels)

    @settings(max_examples=50, deadline=None)
    @given(logits_2x4, st.lists(st.integers(0, 3), min_size=2, max_size=2))
    def test_nonnegative(self, logits, y):
        assert cross_entropy(Tensor(logits), y).item() >= 0


class TestKdKl:
    def test_identical(self, rng):
        a = rng.normal(size=(3, 5))
        assert kd_kl(Tensor(a), Tensor(a), 4.0).item() == pytest.approx(0.0, abs=1e-13)

    def test_hand_sized(self):
        a_t, a_s = [[2.0, -1.0]], [[0.5, 0.3]]
        p = [math.exp(2) / (math.exp(2) + math.exp(-1))]
        p.append(1 - p[0])
        q = [math.exp(0.5) / (math.exp(0.5) + math.exp(0.3))]
        q.append(1 - q[0])
        ref = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
        assert kd_kl(Tensor(a_t), Tensor(a_s), 1.0).item() == pytest.approx(ref, rel=1e-9)

    def test_tau_squared_scaling(self, rng):
        a_t, a_s = rng.normal(scale=3, size=(4, 10)), rng.normal(scale=3, size=(4, 10))
        ref = oracles.kd_kl(a_t.tolist(), a_s.tolist(), 4.0)
        got = kd_kl(Tensor(a_t), Tensor(a_s), 4.0).item()
        assert got == pytest.approx(ref, rel=1e-9)
        unscaled = oracles.kd_kl((a_t / 4).tolist(), (a_s / 4).tolist(), 1.0)
        assert got == pytest.approx(16.0 * unscaled, rel=1e-9)

    def test_gradient_only_to_student(self, rng):
        a_t = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        a_s = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        kd_kl(a_t, a_s, 4.0).backward()
        assert a_t.grad is None and a_s.grad is not None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kd_kl(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), 4.0)

    @settings(max_examples=50, deadline=None)
    @given(logits_2x4, logits_2x4, st.floats(1.0, 8.0))
    def test_nonnegative(self, a_t, a_s, tau):
        assert kd_kl(Tensor(a_t), Tensor(a_s), tau).item() >= -1e-12


class TestTotalLoss:
    PAIRING = LayerPairing([("t", "s")])

    def _inputs(self, rng, n=3, j=4):
        a_t, a_s = rng.normal(size=(n, j)), rng.normal(size=(n, j))
        y = rng.integers(0, j, n)
        taps_t = {"t": Tensor(rng.normal(size=(n, 3, 4, 4)))}
        taps_s = {"s": Tensor(rng.normal(size=(n, 2, 4, 4)))}
        return Tensor(a_t), Tensor(a_s), y, taps_t, taps_s

    def test_presets_against_composed_oracle(self, rng):
        a_t, a_s, y, taps_t, taps_s = self._inputs(rng)
        cfg = AmdConfig(use_local=True)
        loss, info = total_loss(a_t, a_s, y, taps_t, taps_s, self.PAIRING, LossWeights(), cfg)
        f_t = [[oracles.attention_map(x) for x in taps_t["t"].data.tolist()]]
        f_s = [[oracles.attention_map(x) for x in taps_s["s"].data.tolist()]]
        ref = (0.1 * oracles.cross_entropy(a_s.data.tolist(), y.tolist())
               + 0.9 * oracles.kd_kl(a_t.data.tolist(), a_s.data.tolist(), 4.0)
               + 5000 * oracles.amd_feature_loss(f_t, f_s, 64.0, 1.35, use_local=True))
        assert loss.item() == pytest.approx(ref, rel=1e-6)
        assert info["total"] == loss.item()

    def test_breakdown_recomposes(self, rng):
        a_t, a_s, y, taps_t, taps_s = self._inputs(rng)
        w = LossWeights(0.3, 0.7, 2.0, 12.0)
        loss, info = total_loss(a_t, a_s, y, taps_t, taps_s, self.PAIRING, w, AmdConfig())
        assert info["weighted"] == {"ce": 0.3 * info["ce"], "kd": 0.7 * info["kd"], "amd": 12.0 * info["amd"]}
        assert loss.item() == pytest.approx(sum(info["weighted"].values()), rel=1e-12)

    def test_gamma_zero_is_kd(self, rng):
        a_t, a_s, y, taps_t, taps_s = self._inputs(rng)
        w = LossWeights(0.1, 0.9, 4.0, 0.0)
        with_amd, _ = total_loss(a_t, a_s, y, taps_t, taps_s, self.PAIRING, w, AmdConfig())
        kd_only, _ = total_loss(a_t, a_s, y, None, None, None, w, None)
        assert with_amd.item() == kd_only.item()
        assert kd_only.item() == pytest.approx(
            0.1 * cross_entropy(a_s, y).item() + 0.9 * kd_kl(a_t, a_s, 4.0).item(), rel=1e-15)

    def test_plain_cross_entropy(self, rng):
        a_t, a_s, y, taps_t, taps_s = self._inputs(rng)
        loss, _ = total_loss(a_t, a_s, y, taps_t, taps_s, self.PAIRING, LossWeights(1.0, 0.0, 4.0, 0.0),
                             AmdConfig())
        assert loss.item() == cross_entropy(a_s, y).item()

    def test_linear_in_gamma(self, rng):
        a_t, a_s, y, taps_t, taps_s = self._inputs(rng)
        one = total_loss(a_t, a_s, y, taps_t, taps_s, self.PAIRING, LossWeights(gamma=10.0), AmdConfig())[1]
        two = total_loss(a_t, a_s, y, taps_t, taps_s, self.PAIRING, LossWeights(gamma=20.0), AmdConfig())[1]
        assert two["weighted"]["amd"] == 2 * one["weighted"]["amd"]

    def test_needs_taps_for_amd(self, rng):
        a_t, a_s, y, _, _ = self._inputs(rng)
        with pytest.raises(ValueError):
            total_loss(a_t, a_s, y, None, None, self.PAIRING, LossWeights(), AmdConfig())

    def test_gradient_wrt_student_logits(self, rng):
        a_t, a_s, y, taps_t, taps_s = self._inputs(rng)
        w, cfg = LossWeights(), AmdConfig()
        x = Tensor(a_s.data, requires_grad=True)
        rep = grad_check(lambda t: total_loss(a_t, t, y, taps_t, taps_s, self.PAIRING, w, cfg)[0],
                         x, step=1e-5, tol=1e-6, rng=rng)
        assert rep.passed, rep.max_rel_err
