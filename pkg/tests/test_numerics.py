import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from speechlm.gradcheck import kernel_cases, run_case
from speechlm.numerics import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    eval_graph,
    finite_diff_check,
    value_and_grad,
    ops,
)


def _leaf(a, name=None):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, name=name)


class TestTape:
    def test_non_participating_input_gets_exact_zero(self):
        a, b = _leaf([1.0, 2.0]), _leaf([3.0, 4.0])
        with Tape() as tape:
            y = ops.sum(ops.mul(a, a))
        g = tape.gradient(y, {"a": a, "b": b})
        np.testing.assert_array_equal(g["a"], [2.0, 4.0])
        np.testing.assert_array_equal(g["b"], [0.0, 0.0])

    def test_each_node_backward_runs_once(self):
        calls = []
        a = _leaf([1.0, -1.0])
        with Tape() as tape:
            h = ops.scale(a, 3.0)
            y = ops.sum(ops.add(h, h))
        for node in tape.nodes:
            orig = node.backward
            node.backward = lambda g, orig=orig, k=node.kernel: calls.append(k) or orig(g)
        g = tape.gradient(y, [a])
        np.testing.assert_array_equal(g[0], [6.0, 6.0])
        assert sorted(calls) == sorted(n.kernel for n in tape.nodes)

    def test_fan_out_accumulates(self):
        x = _leaf(2.0)
        with Tape() as tape:
            y = ops.mul(ops.mul(x, x), x)
        assert tape.gradient(y, [x])[0] == pytest.approx(12.0)

    def test_intermediate_gradient_available(self):
        x = _leaf([1.0, 2.0])
        with Tape() as tape:
            h = ops.scale(x, 2.0)
            y = ops.sum(ops.mul(h, h))
        g = tape.gradient(y, {"h": h, "x": x})
        np.testing.assert_allclose(g["h"], [4.0, 8.0])
        np.testing.assert_allclose(g["x"], [8.0, 16.0])

    def test_no_recording_outside_tape(self):
        a = _leaf([1.0])
        with Tape() as tape:
            pass
        ops.add(a, a)
        assert tape.nodes == []

    def test_non_scalar_output_rejected(self):
        a = _leaf([1.0, 2.0])
        with Tape() as tape:
            y = ops.scale(a, 2.0)
        with pytest.raises(ShapeError):
            tape.gradient(y, [a])

    def test_check_finite_names_kernel(self):
        a = _leaf([1.0, 2.0])
        with pytest.raises(NonFiniteError, match="scale"):
            with Tape(check_finite=True):
                ops.scale(a, np.inf)

    def test_operator_sugar(self):
        a, b = _leaf([1.0, 2.0]), _leaf([3.0, 5.0])
        with Tape() as tape:
            y = ops.sum((a * b - a + 2.0) * 0.5)
        g = tape.gradient(y, [a, b])
        np.testing.assert_allclose(g[0], (np.array([3.0, 5.0]) - 1) * 0.5)
        np.testing.assert_allclose(g[1], [0.5, 1.0])


class TestShapes:
    def test_matmul_mismatch(self):
        with pytest.raises(ShapeError, match="matmul"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_add_broadcast_mismatch(self):
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))

    def test_cross_entropy_target_shape(self):
        with pytest.raises(ShapeError):
            ops.cross_entropy(Tensor(np.zeros((2, 3))), np.zeros(3, dtype=int))

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            ops.embedding(Tensor(np.zeros((3, 2))), np.array([3]))

    def test_replace_rows_mask_shape(self):
        with pytest.raises(ShapeError):
            ops.replace_rows(Tensor(np.zeros((2, 3, 4))), np.zeros((2, 4), bool), Tensor(np.zeros(4)))


class TestKernelValues:
    def test_gelu_reference_points(self):
        x = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
        k = np.sqrt(2 / np.pi)
        ref = 0.5 * x * (1 + np.tanh(k * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(ops.gelu(Tensor(x)).data, ref, rtol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=st.floats(-50, 50)))
    def test_softmax_rows_sum_to_one(self, x):
        p = ops.softmax(Tensor(x)).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(p >= 0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-30, 30)))
    def test_log_softmax_matches_softmax(self, x):
        np.testing.assert_allclose(
            np.exp(ops.log_softmax(Tensor(x)).data), ops.softmax(Tensor(x)).data, rtol=1e-12, atol=1e-300
        )

    def test_logsumexp_large_values(self):
        x = np.array([[1000.0, 1000.0]])
        np.testing.assert_allclose(ops.logsumexp(Tensor(x)).data, [1000.0 + np.log(2.0)])

    def test_layer_norm_statistics(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, size=(4, 16))
        y = ops.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(-1), 1.0, rtol=1e-4)

    def test_cross_entropy_zero_weight_never_reads_target(self):
        logits = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
        a = ops.cross_entropy(logits, np.array([0, 1, 2]), np.array([1.0, 1.0, 0.0])).data
        b = ops.cross_entropy(logits, np.array([0, 1, 3]), np.array([1.0, 1.0, 0.0])).data
        assert a == b

    def test_cosine_zero_vector_is_zero(self):
        sim = ops.cosine_similarity(Tensor(np.zeros((1, 3))), Tensor(np.eye(3))).data
        np.testing.assert_array_equal(sim, 0.0)

    def test_replace_rows_keeps_unselected_bits(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 5, 3)).astype(np.float32)
        where = np.zeros((2, 5), bool)
        where[0, 1] = where[1, 4] = True
        out = ops.replace_rows(Tensor(x), where, Tensor(np.ones(3, np.float32))).data
        np.testing.assert_array_equal(out[~where], x[~where])
        np.testing.assert_array_equal(out[where], 1.0)

    def test_dropout_identity_without_rng(self):
        x = Tensor(np.ones(5))
        assert ops.dropout(x, 0.5, None) is x

    def test_dropout_preserves_mean(self):
        x = Tensor(np.ones(200_000))
        y = ops.dropout(x, 0.25, np.random.default_rng(0)).data
        assert abs(y.mean() - 1.0) < 0.01
        assert set(np.unique(y)) == {0.0, np.float64(1 / 0.75)}


class TestGraph:
    @staticmethod
    def _quadratic(t, rng):
        a = t["A"]
        x = t["x"]
        ax = ops.matmul(a, ops.reshape(x, (3, 1)))
        return ops.sum(ops.mul(ops.reshape(x, (3, 1)), ax))

    def test_quadratic_form_gradient(self):
        rng = np.random.default_rng(0)
        inputs = {"A": rng.normal(size=(3, 3)), "x": rng.normal(size=3)}
        value, grads = value_and_grad(inputs, self._quadratic)
        a, x = inputs["A"], inputs["x"]
        assert value == pytest.approx(x @ a @ x)
        np.testing.assert_allclose(grads["x"], (a + a.T) @ x, rtol=1e-12)
        np.testing.assert_allclose(grads["A"], np.outer(x, x), rtol=1e-12)

    def test_quadratic_finite_difference_error(self):
        rng = np.random.default_rng(1)
        inputs = {"A": rng.normal(size=(3, 3)), "x": rng.normal(size=3)}
        errs = finite_diff_check(self._quadratic, inputs, step=1e-4)
        assert max(errs.values()) < 1e-8

    @pytest.mark.parametrize("step", [1e-8, 1e-3])
    def test_step_bounds(self, step):
        with pytest.raises(ValueError):
            finite_diff_check(self._quadratic, {"A": np.eye(3), "x": np.ones(3)}, step=step)

    def test_non_finite_reported_with_kernel(self):
        def prog(t, rng):
            return ops.sum(ops.scale(t["x"], np.inf))

        with pytest.raises(NonFiniteError, match="scale"):
            finite_diff_check(prog, {"x": np.ones(2)})

    def test_eval_graph_deterministic(self):
        def prog(t, rng):
            return ops.sum(ops.dropout(t["x"], 0.5, rng))

        x = {"x": np.arange(100.0)}
        assert eval_graph(x, prog, seed=3).data.tobytes() == eval_graph(x, prog, seed=3).data.tobytes()

    def test_eval_graph_does_not_alias_inputs(self):
        x = np.ones(3)

        def prog(t, rng):
            t["x"].data[0] = 5.0
            return ops.sum(t["x"])

        eval_graph({"x": x}, prog)
        assert x[0] == 1.0


_CASES = kernel_cases(n_instances=20, seed=0)


class TestKernelGradients:
    @pytest.mark.parametrize("case", _CASES, ids=[c.name for c in _CASES])
    def test_finite_difference(self, case):
        assert run_case(case) < 1e-5
