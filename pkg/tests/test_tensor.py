import numpy as np
import pytest

from redcon import tensor as T
from redcon.errors import DegenerateInputError, NumericFaultError, ShapeError

from conftest import central_diff, rel_err


def grad_of(build, arrays):
    """Tape gradients of the scalar built by `build(*tensors)` w.r.t. all inputs."""
    tape = T.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = build(*leaves)
    T.backward(out)
    return out.item(), [leaf.grad for leaf in leaves]


def check_against_fd(build, arrays, tol=1e-6, step=1e-5):
    _, analytic = grad_of(build, arrays)
    numeric = central_diff(lambda *xs: grad_of(build, list(xs))[0], arrays, step=step)
    for a, n in zip(analytic, numeric):
        denom = max(np.abs(n).max(), 1e-8)
        assert np.abs(a - n).max() / denom < tol


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(T.constant(np.eye(2)), T.constant(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_product(self):
        # [[1,2],[3,4]] @ [[1],[1]] worked out by hand: rows sum to [3],[7]
        out = T.matmul(T.constant([[1.0, 2.0], [3.0, 4.0]]), T.constant([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(T.constant(np.zeros((2, 3))), T.constant(np.zeros((2, 2))))

    def test_gradient_matches_fd(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        check_against_fd(lambda x, y: T.sum_axis(T.matmul(x, y)), [a, b])


class TestL2NormalizeRows:
    def test_three_four_five(self):
        out = T.l2_normalize_rows(T.constant([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-12)

    def test_unit_row_unchanged(self):
        row = np.array([[1.0, 0.0, 0.0]])
        out = T.l2_normalize_rows(T.constant(row))
        np.testing.assert_allclose(out.data, row, atol=1e-12)

    def test_output_norms_are_one(self, rng):
        out = T.l2_normalize_rows(T.constant(rng.normal(size=(5, 7))))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-9)

    def test_zero_row_raises_with_index(self):
        a = np.ones((3, 2))
        a[1] = 0.0
        with pytest.raises(DegenerateInputError, match="row 1"):
            T.l2_normalize_rows(T.constant(a))

    def test_gradient_matches_fd(self, rng):
        a = rng.normal(size=(2, 5)) + 0.5
        check_against_fd(
            lambda x: T.sum_axis(T.mul(T.l2_normalize_rows(x), T.constant(np.arange(10.0).reshape(2, 5)))),
            [a],
            tol=1e-5,
        )


class TestRowMin:
    def test_exhaustive_example(self):
        m = np.array([[0.3, 0.8, 0.6], [0.9, 0.2, 0.7]])
        vals, argmins = T.row_min(T.constant(m))
        # oracle: exhaustive min per row
        np.testing.assert_array_equal(vals.data, m.min(axis=1))
        assert argmins == [0, 1]

    def test_tie_takes_lowest_index(self):
        vals, argmins = T.row_min(T.constant([[2.0, 2.0, 2.0]]))
        assert vals.data[0] == 2.0
        assert argmins == [0]

    def test_empty_rows_raise(self):
        with pytest.raises(ShapeError):
            T.row_min(T.constant(np.zeros((2, 0))))

    def test_subgradient_hits_only_argmin(self, rng):
        a = rng.normal(size=(4, 6))
        val, grads = grad_of(lambda x: T.sum_axis(T.row_min(x)[0]), [a])
        expected = np.zeros_like(a)
        expected[np.arange(4), np.argmin(a, axis=1)] = 1.0
        np.testing.assert_array_equal(grads[0], expected)

    def test_gradient_matches_fd_away_from_ties(self, rng):
        a = rng.normal(size=(3, 4))
        check_against_fd(lambda x: T.sum_axis(T.row_min(x)[0]), [a])

    def test_transpose_duality(self, rng):
        m = rng.normal(size=(5, 3))
        by_col = T.row_min(T.transpose(T.constant(m)))[0]
        np.testing.assert_array_equal(by_col.data, m.min(axis=0))


class TestElementwiseAndReductions:
    def test_add_sub_shapes(self):
        with pytest.raises(ShapeError):
            T.add(T.constant(np.zeros(2)), T.constant(np.zeros(3)))
        with pytest.raises(ShapeError):
            T.subtract(T.constant(np.zeros((1, 2))), T.constant(np.zeros(2)))

    def test_log_rejects_nonpositive(self):
        with pytest.raises(NumericFaultError):
            T.log(T.constant([1.0, 0.0]))

    def test_mean_over_leading_axis(self, rng):
        a = rng.normal(size=(4, 3, 2))
        out = T.mean_axis(T.constant(a), axis=0)
        np.testing.assert_allclose(out.data, a.mean(axis=0), atol=1e-15)

    @pytest.mark.parametrize("build", [
        lambda x: T.sum_axis(T.exp(x)),
        lambda x: T.sum_axis(T.log(T.scalar_add(T.mul(x, x), 1.0))),
        lambda x: T.sum_axis(T.gelu(x)),
        lambda x: T.sum_axis(T.mul(T.softmax_last(x), T.constant(np.arange(12.0).reshape(3, 4)))),
        lambda x: T.sum_axis(T.mul(T.layer_norm_last(x), T.constant(np.arange(12.0).reshape(3, 4)))),
        lambda x: T.sum_axis(T.slice_axis(x, 1, 1, 3)),
        lambda x: T.sum_axis(T.mul(T.reshape(x, (4, 3)), T.constant(np.arange(12.0).reshape(4, 3)))),
    ])
    def test_gradients_match_fd(self, build, rng):
        a = rng.normal(size=(3, 4))
        check_against_fd(build, [a], tol=1e-5)

    def test_clamp_gradient_is_masked(self, rng):
        a = np.array([-0.5, 0.3, 1.7])
        _, grads = grad_of(lambda x: T.sum_axis(T.clamp(x, 0.0, 1.0)), [a])
        np.testing.assert_array_equal(grads[0], [0.0, 1.0, 0.0])

    def test_expand_and_concat_gradients(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(1, 3))

        def build(x, y):
            stacked = T.concat([x, y], axis=0)
            tiled = T.expand(y, (4,))
            return T.sum_axis(T.mul(stacked, stacked)) + T.sum_axis(tiled)

        check_against_fd(build, [a, b])

    def test_bmm_and_linear_gradients(self, rng):
        x = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 5))
        b = rng.normal(size=(5,))

        def build(xx, ww, bb):
            y = T.linear(xx, ww, bb)
            return T.sum_axis(T.bmm(y, T.transpose(y, (0, 2, 1))))

        check_against_fd(build, [x, w, b], tol=1e-5)

    def test_embedding_gradient_scatters(self):
        table = np.arange(12.0).reshape(4, 3)
        ids = np.array([[0, 2], [2, 1]])
        _, grads = grad_of(lambda t: T.sum_axis(T.embedding(t, ids)), [table])
        expected = np.zeros_like(table)
        np.add.at(expected, ids, 1.0)
        np.testing.assert_array_equal(grads[0], expected)


class TestBackward:
    def test_every_tape_tensor_gets_grad(self, rng):
        tape = T.Tape()
        a = tape.leaf(rng.normal(size=(2, 2)))
        b = tape.leaf(rng.normal(size=(2, 2)))
        used = T.sum_axis(T.mul(a, a))
        T.mul(b, b)  # dead branch, still on the tape
        T.backward(used)
        assert a.grad.shape == a.data.shape
        np.testing.assert_array_equal(b.grad, np.zeros_like(b.data))

    def test_shared_input_accumulates_once_per_use(self, rng):
        a = rng.normal(size=(3,))
        _, grads = grad_of(lambda x: T.sum_axis(T.add(T.mul(x, x), x)), [a])
        np.testing.assert_allclose(grads[0], 2 * a + 1, atol=1e-12)

    def test_root_must_be_scalar(self):
        tape = T.Tape()
        a = tape.leaf(np.zeros((2,)))
        with pytest.raises(ShapeError):
            T.backward(a)

    def test_cross_tape_mixing_rejected(self):
        t1, t2 = T.Tape(), T.Tape()
        a = t1.leaf(np.zeros((2,)))
        b = t2.leaf(np.zeros((2,)))
        with pytest.raises(ShapeError):
            T.add(a, b)

    def test_stop_gradient_blocks_flow(self, rng):
        a = rng.normal(size=(3,))

        def build(x):
            return T.sum_axis(T.mul(T.stop_gradient(x), x))

        _, grads = grad_of(build, [a])
        np.testing.assert_allclose(grads[0], a, atol=1e-12)

    def test_same_inputs_bit_identical(self, rng):
        a = rng.normal(size=(4, 4))
        b = rng.normal(size=(4, 4))

        def run():
            return grad_of(lambda x, y: T.sum_axis(T.matmul(T.softmax_last(x), y)), [a, b])

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        for x, y in zip(g1, g2):
            assert np.array_equal(x, y)
