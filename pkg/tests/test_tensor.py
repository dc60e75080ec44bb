import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from amdistill import oracles
from amdistill.tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    acos,
    backward,
    cos,
    elementwise,
    grad_check,
    matmul,
    no_grad,
    reduce,
)
from amdistill.tensor import io as tio
from amdistill.tensor.functional import avg_pool2d, batch_norm2d, conv2d, log_softmax
from amdistill.tensor.gradcheck import NonDeterministicError

finite = st.floats(-50, 50, allow_nan=False, width=64)


class TestElementwise:
    def test_acos_half(self):
        assert acos(Tensor([0.5])).data[0] == pytest.approx(math.pi / 3, abs=1e-10)

    def test_cos_zero(self):
        assert cos(Tensor([0.0])).data[0] == 1.0

    def test_acos_clamps_float_noise(self):
        out = acos(Tensor([1.0 + 1e-12]))
        assert np.isfinite(out.data).all()
        assert out.data[0] == pytest.approx(math.acos(1 - 1e-12))

    def test_acos_clamped_coordinate_has_zero_grad(self):
        x = Tensor([1.0, 0.3], requires_grad=True)
        acos(x).sum().backward()
        assert x.grad[0] == 0.0
        assert x.grad[1] == pytest.approx(-1 / math.sqrt(1 - 0.09))

    @pytest.mark.parametrize("kind", ["add", "sub", "mul", "div", "pow", "exp", "log", "cos",
                                      "acos", "clamp", "relu"])
    def test_every_kind_has_an_adjoint(self, kind, rng):
        b = {"add": 0.7, "sub": 0.7, "mul": 0.7, "div": 1.7, "pow": 3.0}.get(kind)
        kw = {"lo": -0.2, "hi": 0.2} if kind == "clamp" else {}
        base = rng.uniform(0.15, 0.85, 6)
        x = Tensor(base, requires_grad=True)
        rep = grad_check(lambda t: elementwise(kind, t, b, **kw).sum(), x, rng=rng)
        assert rep.passed, rep.max_rel_err

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_no_implicit_broadcast(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) * Tensor(np.ones(3))

    def test_div_by_exact_zero(self):
        with pytest.raises(ZeroDivisionError):
            Tensor([1.0, 2.0]) / Tensor([1.0, 0.0])

    def test_log_of_nonpositive(self):
        with pytest.raises(ValueError):
            Tensor([1.0, 0.0]).log()

    def test_overflow_raises_instead_of_propagating(self):
        with pytest.raises(NonFiniteError):
            Tensor([1000.0]).exp()

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, 5, elements=finite), hnp.arrays(np.float64, 5, elements=finite))
    def test_add_mul_commute(self, a, b):
        ta, tb = Tensor(a), Tensor(b)
        np.testing.assert_array_equal((ta + tb).data, (tb + ta).data)
        np.testing.assert_array_equal((ta * tb).data, (tb * ta).data)


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(m)).data, m)

    def test_hand_expansion(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_against_triple_loop(self, rng):
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data,
                                   oracles.matmul(a.tolist(), b.tolist()), rtol=1e-12, atol=1e-12)

    def test_adjoints(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        g = rng.normal(size=(3, 2))
        (matmul(a, b) * Tensor(g)).sum().backward()
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_counting(self):
        out = conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out.data, 9.0)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_against_six_loops(self, rng, stride, pad):
        x, k = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
        out = conv2d(Tensor(x), Tensor(k), stride, pad)
        ref = np.array(oracles.conv2d(x.tolist(), k.tolist(), stride, pad))
        assert out.shape == ref.shape == (2, 4, (8 + 2 * pad - 3) // stride + 1,
                                          (8 + 2 * pad - 3) // stride + 1)
        assert np.abs(out.data - ref).max() < 1e-10

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients(self, rng, stride):
        k = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
        out_shape = conv2d(x, k, stride, 1).shape
        w = Tensor(rng.normal(size=out_shape))
        assert grad_check(lambda t: (conv2d(t, k, stride, 1) * w).sum(), x, rng=rng).passed
        assert grad_check(lambda t: (conv2d(x, t, stride, 1) * w).sum(), k, rng=rng).passed


class TestReduce:
    def test_logsumexp_large_entries(self):
        x = Tensor([64 * 0.82, 6.4])
        expected = 52.48 + math.log1p(math.exp(6.4 - 52.48))
        assert reduce("logsumexp", x).item() == pytest.approx(expected, rel=1e-14)
        assert reduce("logsumexp", x).item() == pytest.approx(52.48, abs=1e-12)

    def test_sum_of_zeros(self):
        assert reduce("sum", Tensor(np.zeros((3, 2)))).item() == 0.0

    def test_logsumexp_symmetric_pair(self):
        assert reduce("logsumexp", Tensor([3.3, 3.3])).item() == pytest.approx(3.3 + math.log(2))

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(-64, 64, width=64)))
    def test_logsumexp_finite_at_scale(self, x):
        val = reduce("logsumexp", Tensor(x)).item()
        assert math.isfinite(val)
        assert val == pytest.approx(oracles.logsumexp(x.tolist()), rel=1e-12, abs=1e-12)

    def test_empty_axes_on_scalar(self):
        with pytest.raises(ShapeError):
            reduce("sum", Tensor(3.0))
        with pytest.raises(ShapeError):
            reduce("sum", Tensor([1.0, 2.0]), ())

    @pytest.mark.parametrize("kind", ["sum", "mean", "max", "logsumexp"])
    def test_gradients(self, kind, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=3))
        assert grad_check(lambda t: (reduce(kind, t, 1) * w).sum(), x, rng=rng).passed


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_detached_untouched(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([5.0, 6.0])
        (x * c.detach()).sum().backward()
        assert c.grad is None

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_double_backward(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_retain_graph_allows_second_pass(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward(retain_graph=True)
        loss.backward()
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_composite_graph(self, rng):
        w = Tensor(rng.normal(size=(4, 3)))

        def fn(x):
            h = matmul(x, w).relu() + 0.5
            z = log_softmax(h * h, 1)
            return reduce("mean", z * z) + reduce("logsumexp", h.cos().reshape((-1,)))

        x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        assert grad_check(fn, x, step=1e-5, tol=1e-6, rng=rng).passed

    def test_replay_bit_identical(self, rng):
        data = rng.normal(size=(2, 3, 6, 6))
        k = rng.normal(size=(4, 3, 3, 3))
        outs, grads = [], []
        for _ in range(2):
            x = Tensor(data, requires_grad=True)
            y = conv2d(x, Tensor(k), 1, 1)
            loss = reduce("logsumexp", y.reshape((-1,)))
            loss.backward()
            outs.append(loss.data.copy())
            grads.append(x.grad.copy())
        np.testing.assert_array_equal(outs[0], outs[1])
        np.testing.assert_array_equal(grads[0], grads[1])


class TestGradCheck:
    def test_sum_cos(self, rng):
        x = Tensor(rng.normal(size=7), requires_grad=True)
        rep = grad_check(lambda t: t.cos().sum(), x)
        assert rep.max_rel_err < 1e-6 and rep.passed

    def test_constant(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        rep = grad_check(lambda t: (t * 0.0).sum() + 2.5, x)
        np.testing.assert_array_equal(rep.analytic, 0.0)
        np.testing.assert_array_equal(rep.numeric, 0.0)

    def test_nondeterministic_fn(self, rng):
        noise = np.random.default_rng(0)
        x = Tensor(rng.normal(size=3), requires_grad=True)
        with pytest.raises(NonDeterministicError):
            grad_check(lambda t: t.sum() + float(noise.normal()), x)


class TestBatchNormAndPooling:
    def test_batch_norm_gradients(self, rng):
        gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 2, 2)))

        def fn(x):
            return (batch_norm2d(x, gamma, beta, np.zeros(3), np.ones(3), True) * w).sum()

        x = Tensor(rng.normal(size=(4, 3, 2, 2)), requires_grad=True)
        assert grad_check(fn, x, rng=rng).passed

    def test_running_buffers(self, rng):
        x = rng.normal(2.0, 3.0, size=(8, 2, 4, 4))
        rm, rv = np.zeros(2), np.ones(2)
        batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_avg_pool(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(avg_pool2d(x, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


class TestTensorFormat:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, rng, dtype):
        arr = rng.normal(size=(2, 3, 4)).astype(dtype)
        back = tio.loads(tio.dumps(arr))
        assert back.dtype == dtype
        np.testing.assert_array_equal(back.data, arr)

    def test_header_layout(self):
        buf = tio.dumps(np.array([[1.0, 2.0]], dtype=np.float32))
        assert buf[:4] == b"AMDT"
        assert buf[4] == 1 and buf[5] == 2
        assert int.from_bytes(buf[6:14], "little") == 1
        assert int.from_bytes(buf[14:22], "little") == 2
        assert np.frombuffer(buf[22:], "<f4").tolist() == [1.0, 2.0]

    def test_file_object(self, rng):
        fh = io.BytesIO()
        tio.save(rng.normal(size=5), fh)
        fh.seek(0)
        assert tio.load(fh).shape == (5,)

    @pytest.mark.parametrize("buf", [b"XXXX\x01\x00", b"AMDT\x07\x00", b"AMDT\x02\x01" + (4).to_bytes(8, "little")])
    def test_malformed(self, buf):
        with pytest.raises(tio.TensorFormatError):
            tio.loads(buf)
