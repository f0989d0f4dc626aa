"""Tensor engine tests: forward values against direct numpy oracles, gradients
against the central-difference checker, and the backward-pass contracts."""

import numpy as np
import pytest

from elfis.errors import DimensionError, NumericError, UsageError
from elfis.tensor import (
    GradCheckReport,
    Tensor,
    concat,
    elementwise,
    finite_diff_check,
    is_grad_enabled,
    l2_norm,
    log_softmax,
    matmul,
    no_grad,
    reduce,
    relu,
    scale,
    softmax,
    stack,
    _node,
)


def weighted_sum(t, weights):
    """Reduce a tensor output to a scalar with fixed weights (for grad checks)."""
    return reduce(elementwise(t, Tensor(weights), "mul"), "sum")


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_small_product(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradient_3x4_by_4x2(self):
        rng = np.random.default_rng(7)
        b = Tensor(rng.normal(size=(4, 2)))
        w = rng.normal(size=(3, 2))
        report = finite_diff_check(
            lambda t: weighted_sum(matmul(t, b), w), Tensor(rng.normal(size=(3, 4))), tol=1e-6
        )
        assert report.passed, report


class TestElementwise:
    def test_add_zero(self):
        out = elementwise(Tensor([1.0, 2.0]), Tensor([0.0, 0.0]), "add")
        np.testing.assert_array_equal(out.data, [1.0, 2.0])

    def test_mul_direct(self):
        out = elementwise(Tensor([2.0, 3.0]), Tensor([4.0, 5.0]), "mul")
        np.testing.assert_array_equal(out.data, [8.0, 15.0])

    def test_sub_gradient_2x3(self):
        rng = np.random.default_rng(3)
        b = Tensor(rng.normal(size=(2, 3)))
        w = rng.normal(size=(2, 3))
        report = finite_diff_check(
            lambda t: weighted_sum(elementwise(t, b, "sub"), w),
            Tensor(rng.normal(size=(2, 3))),
            tol=1e-6,
        )
        assert report.passed, report

    def test_row_broadcast_forward_and_gradient(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=3)
        out = elementwise(Tensor(a), Tensor(b), "add")
        np.testing.assert_allclose(out.data, a + b)
        w = rng.normal(size=(4, 3))
        report = finite_diff_check(
            lambda t: weighted_sum(elementwise(Tensor(a), t, "mul"), w), Tensor(b), tol=1e-6
        )
        assert report.passed, report

    def test_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            elementwise(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)), "add")

    def test_unknown_kind(self):
        with pytest.raises(UsageError):
            elementwise(Tensor([1.0]), Tensor([1.0]), "div")


class TestRelu:
    def test_sign_cases(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_identity_on_positives(self):
        x = np.array([0.5, 1.0, 3.25])
        np.testing.assert_array_equal(relu(Tensor(x)).data, x)

    def test_gradient_away_from_zero(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0.1, 1.0, size=6) * rng.choice([-1.0, 1.0], size=6)
        w = rng.normal(size=6)
        report = finite_diff_check(lambda t: weighted_sum(relu(t), w), Tensor(x), tol=1e-6)
        assert report.passed, report


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_large_logits_no_overflow(self):
        out = softmax(Tensor([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)

    def test_against_direct_exp_sum(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()  # direct oracle
        np.testing.assert_allclose(softmax(Tensor(x)).data, expected, atol=1e-12)
        np.testing.assert_allclose(
            softmax(Tensor(x)).data, [0.09003057, 0.24472847, 0.66524096], atol=1e-7
        )

    def test_rows_sum_to_one_even_for_huge_magnitudes(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            x = rng.normal(size=(2, 5)) * rng.choice([1.0, 1e3])
            y = softmax(Tensor(x)).data
            assert (y >= 0).all()
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_non_finite_input_rejected(self):
        with pytest.raises(NumericError):
            softmax(Tensor([np.inf, 0.0]))


class TestLogSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(
            log_softmax(Tensor([0.0, 0.0])).data, [-np.log(2)] * 2, atol=1e-15
        )

    def test_exp_matches_softmax(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            x = rng.normal(size=7) * 3
            np.testing.assert_allclose(
                np.exp(log_softmax(Tensor(x)).data), softmax(Tensor(x)).data, atol=1e-12
            )

    def test_gradient(self):
        rng = np.random.default_rng(29)
        x = rng.normal(size=5)
        w = rng.normal(size=5)
        report = finite_diff_check(lambda t: weighted_sum(log_softmax(t), w), Tensor(x), tol=1e-6)
        assert report.passed, report


class TestReduce:
    def test_mean_axis0(self):
        out = reduce(Tensor([[1.0, 3.0], [5.0, 7.0]]), "mean", axis=0)
        np.testing.assert_array_equal(out.data, [3.0, 5.0])

    def test_sum_of_zeros(self):
        assert reduce(Tensor(np.zeros(4)), "sum").item() == 0.0

    def test_max_value_and_gradient_mask(self):
        x = Tensor([2.0, 9.0, 4.0], requires_grad=True)
        out = reduce(x, "max")
        assert out.item() == 9.0
        out.backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_max_ties_route_to_first(self):
        x = Tensor([5.0, 5.0, 1.0], requires_grad=True)
        reduce(x, "max").backward()
        np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])

    def test_mean_gradient(self):
        rng = np.random.default_rng(31)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=4)
        report = finite_diff_check(
            lambda t: weighted_sum(reduce(t, "mean", axis=0), w), Tensor(x), tol=1e-6
        )
        assert report.passed, report

    def test_median_forward_only(self):
        x = Tensor([3.0, 1.0, 2.0], requires_grad=True)
        out = reduce(x, "median")
        assert out.item() == 2.0
        assert not out.requires_grad

    def test_invalid_axis(self):
        with pytest.raises(DimensionError):
            reduce(Tensor(np.zeros((2, 2))), "sum", axis=2)


class TestL2Norm:
    def test_pythagorean(self):
        assert abs(l2_norm(Tensor([3.0, 4.0])).item() - 5.0) < 1e-12

    def test_zero_vector_has_finite_gradient(self):
        x = Tensor([0.0, 0.0], requires_grad=True)
        out = l2_norm(x)
        assert out.item() < 1e-5
        out.backward()
        assert np.isfinite(x.grad).all()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_gradient_length_8(self):
        rng = np.random.default_rng(37)
        report = finite_diff_check(l2_norm, Tensor(rng.normal(size=8)), tol=1e-6)
        assert report.passed, report

    def test_rejects_matrix(self):
        with pytest.raises(DimensionError):
            l2_norm(Tensor(np.zeros((2, 2))))


class TestStackConcat:
    def test_stack_and_gradient(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        out = reduce(stack([a, b]), "mean", axis=0)
        np.testing.assert_array_equal(out.data, [2.0, 3.0])
        reduce(out, "sum").backward()
        np.testing.assert_array_equal(a.grad, [0.5, 0.5])
        np.testing.assert_array_equal(b.grad, [0.5, 0.5])

    def test_concat_shapes_and_gradient(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.full((2, 2), 2.0), requires_grad=True)
        out = concat([a, b])
        assert out.shape == (2, 5)
        reduce(out, "sum").backward()
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 2)))

    def test_mismatched_shapes(self):
        with pytest.raises(DimensionError):
            stack([Tensor(np.zeros(2)), Tensor(np.zeros(3))])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor([1.0, -2.0, 0.5, 3.0], requires_grad=True)
        reduce(x, "sum").backward()
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0, 1.0])

    def test_zero_times_x_gives_zero_grads(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        reduce(scale(x, 0.0), "sum").backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(UsageError):
            Tensor(np.zeros(3), requires_grad=True).backward()

    def test_repeated_backward_doubles_grads(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = reduce(scale(x, 2.0), "sum")
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        np.testing.assert_array_equal(x.grad, 2.0 * first)

    def test_backward_is_deterministic(self):
        rng = np.random.default_rng(41)

        def run():
            x = Tensor(rng.normal(size=(3, 4)), requires_grad=False)
            w = Tensor(np.linspace(-1, 1, 8).reshape(4, 2), requires_grad=True)
            loss = reduce(softmax(matmul(Tensor(x.data), w)), "sum")
            loss.backward()
            return w.grad.copy()

        g1, g2 = run(), run()
        np.testing.assert_array_equal(g1, g2)

    def test_every_reachable_tensor_has_grad(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        mid = elementwise(a, b, "mul")
        reduce(mid, "sum").backward()
        assert a.grad is not None and b.grad is not None and mid.grad is not None

    def test_diamond_graph_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = elementwise(x, x, "add")  # 2x; grad should be 2
        reduce(y, "sum").backward()
        np.testing.assert_array_equal(x.grad, [2.0])


class TestNoGrad:
    def test_blocks_graph_construction(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            out = relu(x)
        assert not out.requires_grad
        assert is_grad_enabled()

    def test_restored_after_exception(self):
        try:
            with no_grad():
                raise RuntimeError("boom")
        except RuntimeError:
            pass
        assert is_grad_enabled()


class TestFiniteDiffCheck:
    def test_quadratic(self):
        report = finite_diff_check(
            lambda t: reduce(elementwise(t, t, "mul"), "sum"), Tensor([1.0, 2.0]), tol=1e-6
        )
        assert report.passed
        assert report.max_relative_error < 1e-6

    def test_softmax_cross_entropy_shape(self):
        rng = np.random.default_rng(43)
        x = rng.normal(size=(3, 4))
        onehot = np.zeros((3, 4))
        onehot[np.arange(3), rng.integers(0, 4, size=3)] = 1.0

        def f(t):
            picked = elementwise(log_softmax(t), Tensor(onehot), "mul")
            return scale(reduce(picked, "sum"), -1.0 / 3.0)

        report = finite_diff_check(f, Tensor(x), tol=1e-5)
        assert report.passed, report

    def test_corrupted_gradient_detected(self):
        def bad_square(t):
            # forward x^2, backward deliberately wrong (3x instead of 2x)
            return _node(t.data * t.data, (t,), lambda g: [(t, g * 3.0 * t.data)])

        report = finite_diff_check(
            lambda t: reduce(bad_square(t), "sum"), Tensor([1.0, -2.0]), tol=1e-5
        )
        assert not report.passed

    def test_report_invariant(self):
        report = GradCheckReport("x", 1e-7, 1e-5, True)
        assert report.passed == (report.max_relative_error < report.tolerance)
