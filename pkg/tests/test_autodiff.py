import numpy as np
import pytest

from clusiam.autodiff import AdamState, Tape, adam_step, finite_diff_check


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestPrimitives:
    def test_l2_normalize_three_four_five(self):
        tape = Tape()
        out = tape.l2_normalize_rows(tape.constant([3.0, 4.0]))
        assert np.allclose(out.data, [0.6, 0.8], atol=1e-15)

    def test_relu(self):
        tape = Tape()
        out = tape.relu(tape.constant([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_matmul_matches_triple_loop(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 1))
        tape = Tape()
        out = tape.matmul(tape.constant(a), tape.constant(b))
        assert np.abs(out.data - naive_matmul(a, b)).max() < 1e-12

    def test_add_row_broadcast(self):
        tape = Tape()
        x = tape.leaf(np.ones((3, 2)), requires_grad=True)
        b = tape.leaf(np.array([1.0, 2.0]), requires_grad=True)
        loss = tape.sum(tape.add(x, b))
        grads = tape.backward(loss)
        assert np.array_equal(grads[b.node_id], [3.0, 3.0])

    def test_shape_mismatch_names_op_and_shapes(self):
        tape = Tape()
        with pytest.raises(ValueError, match=r"add.*\(2,\).*\(3,\)"):
            tape.add(tape.constant([1.0, 2.0]), tape.constant([1.0, 2.0, 3.0]))

    def test_matmul_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(ValueError, match="matmul"):
            tape.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))

    def test_ln_rejects_non_positive(self):
        tape = Tape()
        with pytest.raises(ValueError, match="ln"):
            tape.ln(tape.constant([1.0, 0.0]))

    def test_concat_rows_splits_gradient(self):
        tape = Tape()
        a = tape.leaf(np.ones((2, 2)), requires_grad=True)
        b = tape.leaf(np.ones((3, 2)), requires_grad=True)
        out = tape.concat_rows(a, b)
        assert out.shape == (5, 2)
        grads = tape.backward(tape.sum(out))
        assert grads[a.node_id].shape == (2, 2)
        assert grads[b.node_id].shape == (3, 2)

    def test_mean_and_sum_scalars(self):
        tape = Tape()
        x = tape.constant(np.arange(6.0).reshape(2, 3))
        assert tape.mean(x).item() == 2.5
        assert tape.sum(x).item() == 15.0

    def test_unknown_primitive(self):
        tape = Tape()
        with pytest.raises(ValueError, match="unknown primitive"):
            tape.apply("pow", tape.constant(1.0))

    def test_zero_norm_row_rejected(self):
        tape = Tape()
        with pytest.raises(ValueError, match="zero-norm row 1"):
            tape.l2_normalize_rows(tape.constant([[1.0, 0.0], [0.0, 0.0]]))


class TestBackward:
    def test_sum_of_squares_gradient(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0, 3.0], requires_grad=True)
        loss = tape.sum(tape.mul(x, x))
        grads = tape.backward(loss)
        assert np.array_equal(grads[x.node_id], [2.0, 4.0, 6.0])

    def test_detach_blocks_gradient_bitwise(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0], requires_grad=True)
        loss = tape.sum(tape.mul(x.detach(), x.detach()))
        grads = tape.backward(loss)
        assert np.array_equal(grads[x.node_id], np.zeros(2))
        assert grads[x.node_id].tobytes() == np.zeros(2).tobytes()

    def test_detach_preserves_values(self):
        tape = Tape()
        x = tape.leaf([1.5, -2.0], requires_grad=True)
        d = x.detach()
        assert np.array_equal(d.data, x.data)
        assert d.requires_grad is False

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(tape.mul(x, x))

    def test_three_layer_composition_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        w1 = rng.normal(size=(4, 5))
        w2 = rng.normal(size=(5, 3))
        w3 = rng.normal(size=(3, 1))

        def fn(tape, x):
            h = tape.relu(tape.matmul(x, tape.constant(w1)))
            h = tape.exp(tape.scale(tape.matmul(h, tape.constant(w2)), 0.3))
            return tape.mean(tape.matmul(h, tape.constant(w3)))

        report = finite_diff_check(fn, rng.normal(size=(2, 4)), h=1e-5, tol=1e-4)
        assert report.passed, f"max rel err {report.max_rel_error}"

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(3, 3))

        def run():
            tape = Tape()
            x = tape.leaf(x0.copy(), requires_grad=True)
            h = tape.l2_normalize_rows(tape.relu(tape.matmul(x, x)))
            loss = tape.mean(tape.mul(h, h))
            g = tape.backward(loss)[x.node_id]
            return loss.item(), g.tobytes()

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2 and g1 == g2

    def test_gradient_for_unreached_leaf_is_zero(self):
        tape = Tape()
        x = tape.leaf([1.0], requires_grad=True)
        y = tape.leaf([2.0], requires_grad=True)
        grads = tape.backward(tape.sum(tape.mul(x, x)))
        assert np.array_equal(grads[y.node_id], [0.0])

    @pytest.mark.parametrize("kind", ["add", "sub", "mul_elementwise", "matmul", "relu",
                                      "exp", "ln", "mean", "sum", "scale",
                                      "l2_normalize_rows", "concat_rows"])
    def test_each_primitive_matches_finite_differences(self, kind):
        rng = np.random.default_rng(abs(hash(kind)) % 2**31)
        other = rng.normal(size=(3, 4))
        weight = rng.normal(size=(4, 2))

        def fn(tape, x):
            c = tape.constant(other)
            if kind in ("add", "sub", "mul_elementwise"):
                out = tape.apply(kind, x, c)
            elif kind == "matmul":
                out = tape.matmul(x, tape.constant(weight))
            elif kind == "ln":
                out = tape.ln(tape.exp(x))  # keep the argument positive
            elif kind == "scale":
                out = tape.scale(x, -1.7)
            elif kind == "concat_rows":
                out = tape.concat_rows(x, c)
            elif kind in ("mean", "sum"):
                return tape.apply(kind, tape.mul(x, x))
            else:
                out = tape.apply(kind, x)
            return tape.mean(tape.mul(out, out))

        point = np.random.default_rng(5).normal(size=(3, 4)) * 0.7 + 0.1
        report = finite_diff_check(fn, point)
        assert report.passed, f"{kind}: max rel err {report.max_rel_error}"


class TestAdam:
    def test_first_step_closed_form(self):
        theta = {"p": np.array([0.0])}
        grads = {"p": np.array([1.0])}
        state = AdamState(lr=1e-3)
        adam_step(theta, grads, state)
        # after one step m_hat = g, v_hat = g^2, so the update is -lr*g/(|g|+eps)
        expected = -1e-3 * (1.0 / (1.0 + 1e-8))
        assert abs(theta["p"][0] - expected) < 1e-18
        assert state.t == 1

    def test_zero_gradient_no_decay_is_identity(self):
        theta = {"p": np.array([1.0, -2.0])}
        before = theta["p"].copy()
        adam_step(theta, {"p": np.zeros(2)}, AdamState(lr=1e-3))
        assert np.array_equal(theta["p"], before)

    def test_weight_decay_shrinks_parameter(self):
        theta = {"p": np.array([1.0])}
        adam_step(theta, {"p": np.zeros(1)}, AdamState(lr=1e-3, weight_decay=0.0005))
        assert theta["p"][0] < 1.0

    def test_lr_must_be_positive(self):
        with pytest.raises(ValueError, match="lr"):
            adam_step({"p": np.zeros(1)}, {"p": np.zeros(1)}, AdamState(lr=0.0))

    def test_gradient_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            adam_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, AdamState(lr=1e-3))

    def test_step_counter_increments(self):
        state = AdamState(lr=1e-2)
        theta = {"p": np.zeros(1)}
        for expected in (1, 2, 3):
            adam_step(theta, {"p": np.ones(1)}, state)
            assert state.t == expected


class TestFiniteDiffCheck:
    def test_constant_function_passes(self):
        report = finite_diff_check(lambda tape, x: tape.constant(np.asarray(3.0)),
                                   np.ones(4))
        assert report.passed and report.max_rel_error == 0.0

    def test_broken_gradient_caught(self):
        # value is sum(2x) but the tape sees only sum(x): gradients disagree
        def fn(tape, x):
            return tape.sum(tape.add(x, tape.constant(x.data.copy())))

        report = finite_diff_check(fn, np.ones(3))
        assert not report.passed
