"""Engine tests: ops, broadcasting, convolutions, and the backward pass."""

import numpy as np
import pytest

from encapnet import tensor as T
from encapnet.errors import DomainError, ShapeError
from encapnet.gradcheck import check_grads
from encapnet.tensor import Tensor, find_first_nonfinite, seeded_rng


@pytest.fixture(autouse=True)
def _float64():
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(prev)


def conv2d_naive(x, w, stride, padding, groups):
    """Direct loop convolution used as the oracle."""
    b, cin, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    cpg_out = cout // groups
    for bi in range(b):
        for co in range(cout):
            g = co // cpg_out
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, g * cin_g:(g + 1) * cin_g,
                               i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, co, i, j] = (patch * w[co]).sum()
    return out


class TestElementwise:
    def test_broadcast_add_mul_grads(self):
        rng = seeded_rng(0, "bcast")
        for trial in range(5):
            a = Tensor(rng.normal(size=(3, 1, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
            errs = check_grads(lambda: T.tsum(a * b + b), [a, b])
            assert max(errs) < 1e-6, f"trial {trial}: {errs}"

    def test_div_neg_sub(self):
        rng = seeded_rng(0, "div")
        a = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, size=(3,)), requires_grad=True)
        errs = check_grads(lambda: T.tsum(-a / b - (a - b)), [a, b])
        assert max(errs) < 1e-6

    def test_relu_sigmoid_exp_log(self):
        rng = seeded_rng(0, "acts")
        x = Tensor(rng.uniform(0.2, 2.0, size=(5, 5)), requires_grad=True)
        errs = check_grads(
            lambda: T.tsum(T.relu(x) + T.sigmoid(x) + T.exp(x) + T.log(x)), [x])
        assert max(errs) < 1e-6

    def test_sigmoid_extreme_inputs_stable(self):
        x = Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
        y = T.sigmoid(x).data
        assert np.all(np.isfinite(y))
        assert y[0] == 0.0 and y[-1] == 1.0 and y[2] == 0.5

    def test_sqrt_rejects_negative(self):
        with pytest.raises(DomainError):
            T.sqrt(Tensor(np.array([1.0, -1e-12])))

    def test_maximum_floor_grad_routes_to_larger(self):
        x = Tensor(np.array([0.5, 2.0]), requires_grad=True)
        y = T.tsum(T.maximum(x, 1.0))
        y.backward()
        assert np.array_equal(x.grad, [0.0, 1.0])

    def test_softmax_rows_sum_to_one(self):
        rng = seeded_rng(0, "softmax")
        x = Tensor(rng.normal(size=(6, 7)) * 30)
        s = T.softmax(x, axis=1).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_logsumexp_matches_numpy(self):
        rng = seeded_rng(0, "lse")
        x = rng.normal(size=(4, 9)) * 20
        got = T.logsumexp(Tensor(x), axis=1).data
        want = np.log(np.exp(x - x.max(1, keepdims=True)).sum(1)) + x.max(1)
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestShapesAndReductions:
    def test_reshape_transpose_concat_slice_grads(self):
        rng = seeded_rng(0, "shapes")
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)

        def build():
            c = T.concat([a.transpose(0, 2, 1), b.transpose(0, 2, 1)], axis=0)
            d = T.slice_axis(c, axis=0, start=1, stop=3)
            return T.tsum(d.reshape((24,)) * d.reshape((24,)))

        errs = check_grads(build, [a, b])
        assert max(errs) < 1e-6

    def test_transpose_no_args_reverses(self):
        x = Tensor(np.zeros((2, 3, 4)))
        assert x.transpose().shape == (4, 3, 2)

    def test_mean_keepdims(self):
        rng = seeded_rng(0, "mean")
        x = rng.normal(size=(3, 4, 5))
        got = T.tmean(Tensor(x), axis=(0, 2), keepdims=True).data
        np.testing.assert_allclose(got, x.mean(axis=(0, 2), keepdims=True))

    def test_matmul_batched_broadcast(self):
        rng = seeded_rng(0, "matmul")
        a = Tensor(rng.normal(size=(5, 2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        y = T.matmul(a, b)
        assert y.shape == (5, 2, 4)
        errs = check_grads(lambda: T.tsum(T.matmul(a, b) * T.matmul(a, b)), [a, b])
        assert max(errs) < 1e-6


class TestConv:
    def test_matches_naive_conv(self):
        rng = seeded_rng(0, "conv")
        for stride, padding, groups in [(1, 0, 1), (1, 1, 1), (2, 1, 2), (3, 2, 4)]:
            cin, cout = 4, 8
            x = rng.normal(size=(2, cin, 9, 9))
            w = rng.normal(size=(cout, cin // groups, 3, 3))
            got = T.conv2d(Tensor(x), Tensor(w), stride, padding, groups).data
            want = conv2d_naive(x, w, stride, padding, groups)
            np.testing.assert_allclose(got, want, atol=1e-12,
                                       err_msg=f"s{stride} p{padding} g{groups}")

    def test_grouped_equals_independent_slices(self):
        rng = seeded_rng(0, "groups")
        x = rng.normal(size=(2, 6, 7, 7))
        w = rng.normal(size=(9, 2, 3, 3))
        full = T.conv2d(Tensor(x), Tensor(w), 1, 1, 3).data
        parts = [T.conv2d(Tensor(x[:, 2 * g:2 * g + 2]),
                          Tensor(w[3 * g:3 * g + 3]), 1, 1, 1).data
                 for g in range(3)]
        assert np.array_equal(full, np.concatenate(parts, axis=1))

    def test_conv_grads(self):
        rng = seeded_rng(0, "convgrad")
        x = Tensor(rng.normal(size=(2, 4, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 2, 3, 3)), requires_grad=True)
        errs = check_grads(
            lambda: T.tsum(T.conv2d(x, w, 2, 1, 2) * T.conv2d(x, w, 2, 1, 2)),
            [x, w])
        assert max(errs) < 1e-6

    def test_transpose_is_exact_adjoint(self):
        # <conv(x), y> == <x, conv_transpose(y)> with the opad recovering 8x8
        rng = seeded_rng(0, "adjoint")
        checked = 0
        for stride, padding, groups in [(1, 0, 1), (1, 1, 2), (2, 1, 1),
                                        (2, 1, 2), (3, 2, 2)]:
            x = rng.normal(size=(2, 6, 8, 8))
            w = rng.normal(size=(6, 6 // groups, 3, 3))
            fwd = T.conv2d(Tensor(x), Tensor(w), stride, padding, groups).data
            ho = fwd.shape[2]
            opad = 8 - ((ho - 1) * stride - 2 * padding + 3)
            if not 0 <= opad < max(stride, 1):
                continue
            y = rng.normal(size=fwd.shape)
            lhs = (fwd * y).sum()
            rhs = (x * T.conv_transpose2d(Tensor(y), Tensor(w), stride,
                                          padding, opad, groups).data).sum()
            rel = abs(lhs - rhs) / max(abs(lhs), 1e-12)
            assert rel < 1e-13, f"s{stride} p{padding} g{groups}: {rel}"
            checked += 1
        assert checked >= 4

    def test_conv_transpose_grads(self):
        rng = seeded_rng(0, "ctgrad")
        v = Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        errs = check_grads(
            lambda: T.tsum(T.conv_transpose2d(v, w, 2, 1, 1, 2)
                           * T.conv_transpose2d(v, w, 2, 1, 1, 2)),
            [v, w])
        assert max(errs) < 1e-6

    def test_out_size_formula(self):
        assert T.conv_out_size(28, 3, 2, 1) == 14
        assert T.conv_out_size(7, 3, 2, 1) == 4
        assert T.conv_out_size(5, 1, 1, 0) == 5


class TestBackward:
    def test_requires_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * x).backward()

    def test_grads_accumulate_on_reuse(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = T.tsum(x * x + x * x)
        y.backward()
        assert x.grad[0] == pytest.approx(12.0, abs=1e-14)

    def test_constant_leaves_keep_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        c = Tensor(np.ones(3), requires_grad=False)
        T.tsum(x * c).backward()
        assert c.grad is None and x.grad is not None

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_find_first_nonfinite_names_culprit(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        bad = T.log(x - 1.0)  # log(0) -> -inf
        loss = T.tsum(bad * 0.0)  # nan downstream
        assert find_first_nonfinite(loss) == "log"


class TestSeededRng:
    def test_same_path_same_stream(self):
        a = seeded_rng(7, "x", 3).normal(size=4)
        b = seeded_rng(7, "x", 3).normal(size=4)
        assert np.array_equal(a, b)

    def test_distinct_paths_differ(self):
        a = seeded_rng(7, "x", 3).normal(size=4)
        b = seeded_rng(7, "x", 4).normal(size=4)
        c = seeded_rng(8, "x", 3).normal(size=4)
        assert not np.array_equal(a, b) and not np.array_equal(a, c)

    def test_dtype_switch(self):
        T.set_default_dtype(np.float32)
        assert Tensor([1.0]).data.dtype == np.float32
        T.set_default_dtype(np.float64)
        assert Tensor([1.0]).data.dtype == np.float64
