import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_gru_params, oracle_softmax, rand_param
from multiattn.core import NonFiniteError, Parameter, SeededRng, ShapeMismatchError
from multiattn.graph import (Graph, GraphError, finite_difference_check,
                             set_adjoint_corruption)


def leafed(g, rng, name, shape, scale=1.0):
    return g.leaf(rand_param(rng, name, shape, scale))


class TestSoftmax:
    def test_symmetry(self):
        g = Graph()
        out = g.softmax(g.constant([0.0, 0.0]))
        assert np.allclose(out.value, [0.5, 0.5], atol=1e-15)

    def test_shift_invariance_constant_input(self):
        g = Graph()
        out = g.softmax(g.constant([3.7, 3.7, 3.7]))
        assert np.allclose(out.value, [1 / 3] * 3, atol=1e-15)

    def test_closed_form_ln2(self):
        # exp(ln 2) = 2 and exp(0) = 1, so the weights are 2/3 and 1/3.
        g = Graph()
        out = g.softmax(g.constant([math.log(2.0), 0.0]))
        assert abs(out.value[0] - 2.0 / 3.0) < 1e-12
        assert abs(out.value[1] - 1.0 / 3.0) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=30),
           st.floats(min_value=-50, max_value=50))
    def test_sums_to_one_and_shift_invariant(self, values, shift):
        g = Graph()
        base = g.softmax(g.constant(values)).value
        shifted = g.softmax(g.constant([v + shift for v in values])).value
        assert abs(base.sum() - 1.0) <= 1e-12
        assert (base >= 0).all()
        assert np.abs(base - shifted).max() < 1e-12

    def test_large_inputs_stay_finite(self):
        g = Graph()
        out = g.softmax(g.constant([1000.0, 999.0]))
        assert np.isfinite(out.value).all()

    def test_errors(self):
        g = Graph()
        with pytest.raises(ShapeMismatchError):
            g.softmax(g.constant(np.zeros((0,))))
        with pytest.raises(ShapeMismatchError):
            g.softmax(g.constant(np.zeros((2, 2))))
        node = g.constant([1.0, 2.0])
        node.value[0] = np.nan  # sneak a NaN past the constant check
        with pytest.raises(NonFiniteError):
            g.softmax(node)


class TestForwardExamples:
    def test_matmul_identity(self):
        g = Graph()
        x = g.constant([1.0, -2.0, 3.0])
        out = g.matmul(g.constant(np.eye(3)), x)
        assert np.array_equal(out.value, x.value)

    def test_tanh_sigmoid_at_zero(self):
        g = Graph()
        z = g.constant([0.0])
        assert g.tanh(z).value[0] == 0.0
        assert g.sigmoid(z).value[0] == 0.5

    def test_cross_entropy_uniform_is_log_vocab(self):
        g = Graph()
        for v in (3, 7, 20):
            probs = g.constant(np.full(v, 1.0 / v))
            assert abs(float(g.cross_entropy(probs, 1).value) - math.log(v)) < 1e-12

    def test_shape_error_reports_op_and_shapes(self):
        g = Graph()
        with pytest.raises(ShapeMismatchError) as exc:
            g.matmul(g.constant(np.zeros((2, 3))), g.constant(np.zeros((4,))))
        msg = str(exc.value)
        assert "matmul" in msg and "(2, 3)" in msg and "(4,)" in msg

    def test_add_broadcast_rules(self):
        g = Graph()
        m = g.constant(np.ones((2, 3)))
        v = g.constant(np.array([1.0, 2.0, 3.0]))
        assert np.array_equal(g.add(m, v).value, np.ones((2, 3)) + [1, 2, 3])
        assert np.array_equal(g.add(v, m).value, np.ones((2, 3)) + [1, 2, 3])
        with pytest.raises(ShapeMismatchError):
            g.add(m, g.constant(np.ones(2)))

    def test_embedding_lookup_and_bounds(self):
        g = Graph()
        table = g.constant(np.arange(12.0).reshape(4, 3))
        out = g.embedding_lookup(table, [2, 0, 2])
        assert np.array_equal(out.value, [[6, 7, 8], [0, 1, 2], [6, 7, 8]])
        with pytest.raises(GraphError):
            g.embedding_lookup(table, [4])

    def test_duplicate_leaf_names_rejected(self):
        g = Graph()
        g.leaf(Parameter("p", [1.0]))
        with pytest.raises(GraphError):
            g.leaf(Parameter("p", [2.0]))


class TestBackwardExamples:
    def test_quadratic(self):
        p = Parameter("x", [3.0])
        g = Graph()
        x = g.leaf(p)
        loss = g.matmul(x, x)  # x . x
        grads = g.backward(loss)
        assert np.allclose(grads["x"], [6.0])

    def test_cross_entropy_softmax_gradient(self):
        rng = SeededRng(0)
        p = Parameter("z", rng.uniform_array((6,), -2, 2))
        label = 4
        g = Graph()
        z = g.leaf(p)
        probs = g.softmax(z)
        loss = g.cross_entropy(probs, label)
        grads = g.backward(loss)
        expected = oracle_softmax(p.value).copy()
        expected[label] -= 1.0
        assert np.abs(grads["z"] - expected).max() < 1e-12

    def test_unused_parameter_gets_zero_gradient(self):
        used = Parameter("used", [2.0])
        unused = Parameter("unused", [[1.0, 2.0]])
        g = Graph()
        x = g.leaf(used)
        g.leaf(unused)
        loss = g.matmul(x, x)
        grads = g.backward(loss, params=[used, unused])
        assert np.array_equal(grads["unused"], np.zeros((1, 2)))

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        node = g.constant([1.0, 2.0])
        with pytest.raises(GraphError):
            g.backward(node)

    def test_backward_needs_recording(self):
        g = Graph(recording=False)
        node = g.constant(1.0)
        with pytest.raises(GraphError):
            g.backward(node)


def _scalar_reduce(g: Graph, node, rng: SeededRng):
    """Project an op output to a scalar with fixed random weights."""
    if node.value.ndim == 0:
        return node
    flat = g.reshape(node, (node.value.size,))
    w = g.constant(rng.uniform_array((node.value.size,), -1.0, 1.0))
    return g.matmul(flat, w)


def _check_op(build_op, params, seed=0, tol=1e-4):
    reduce_rng = SeededRng(seed + 99)
    weights = {}

    def build(g):
        node = build_op(g)
        key = node.value.shape
        if key not in weights:
            weights[key] = reduce_rng.uniform_array((node.value.size,), -1.0, 1.0) \
                if node.value.ndim else None
        if node.value.ndim == 0:
            return node
        flat = g.reshape(node, (node.value.size,))
        return g.matmul(flat, g.constant(weights[key]))

    report = finite_difference_check(build, params)
    assert report.max_rel_error < tol, f"{report}"


class TestPerOpGradients:
    """Every registered op passes a random-input finite-difference check."""

    def setup_method(self):
        self.rng = SeededRng(2024)

    def test_matmul_matrix_matrix(self):
        a = rand_param(self.rng, "a", (3, 4))
        b = rand_param(self.rng, "b", (4, 2))
        _check_op(lambda g: g.matmul(g.leaf(a), g.leaf(b)), [a, b])

    def test_matmul_matrix_vector(self):
        a = rand_param(self.rng, "a", (3, 4))
        b = rand_param(self.rng, "b", (4,))
        _check_op(lambda g: g.matmul(g.leaf(a), g.leaf(b)), [a, b])

    def test_matmul_vector_matrix(self):
        a = rand_param(self.rng, "a", (4,))
        b = rand_param(self.rng, "b", (4, 3))
        _check_op(lambda g: g.matmul(g.leaf(a), g.leaf(b)), [a, b])

    def test_matmul_vector_vector(self):
        a = rand_param(self.rng, "a", (5,))
        b = rand_param(self.rng, "b", (5,))
        _check_op(lambda g: g.matmul(g.leaf(a), g.leaf(b)), [a, b])

    def test_transpose(self):
        a = rand_param(self.rng, "a", (3, 5))
        _check_op(lambda g: g.transpose(g.leaf(a)), [a])

    def test_add_same_shape(self):
        a = rand_param(self.rng, "a", (4,))
        b = rand_param(self.rng, "b", (4,))
        _check_op(lambda g: g.add(g.leaf(a), g.leaf(b)), [a, b])

    def test_add_broadcast(self):
        a = rand_param(self.rng, "a", (3, 4))
        b = rand_param(self.rng, "b", (4,))
        _check_op(lambda g: g.add(g.leaf(a), g.leaf(b)), [a, b])
        _check_op(lambda g: g.add(g.leaf(b), g.leaf(a)), [a, b])

    def test_add_n(self):
        ps = [rand_param(self.rng, f"p{i}", (3,)) for i in range(4)]
        _check_op(lambda g: g.add_n([g.leaf(p) for p in ps]), ps)

    def test_scale_and_one_minus(self):
        a = rand_param(self.rng, "a", (4,))
        _check_op(lambda g: g.scale(g.leaf(a), -2.5), [a])
        _check_op(lambda g: g.one_minus(g.leaf(a)), [a])

    def test_elementwise_mul(self):
        a = rand_param(self.rng, "a", (6,))
        b = rand_param(self.rng, "b", (6,))
        _check_op(lambda g: g.elementwise_mul(g.leaf(a), g.leaf(b)), [a, b])

    def test_tanh_sigmoid(self):
        a = rand_param(self.rng, "a", (5,))
        _check_op(lambda g: g.tanh(g.leaf(a)), [a])
        _check_op(lambda g: g.sigmoid(g.leaf(a)), [a])

    def test_softmax(self):
        a = rand_param(self.rng, "a", (6,))
        _check_op(lambda g: g.softmax(g.leaf(a)), [a])

    def test_concat_stack_ops(self):
        a = rand_param(self.rng, "a", (3,))
        b = rand_param(self.rng, "b", (2,))
        _check_op(lambda g: g.concat_rows([g.leaf(a), g.leaf(b)]), [a, b])
        m1 = rand_param(self.rng, "m1", (2, 3))
        m2 = rand_param(self.rng, "m2", (4, 3))
        _check_op(lambda g: g.concat_rows([g.leaf(m1), g.leaf(m2)]), [m1, m2])
        v1 = rand_param(self.rng, "v1", (3,))
        v2 = rand_param(self.rng, "v2", (3,))
        _check_op(lambda g: g.stack_rows([g.leaf(v1), g.leaf(v2)]), [v1, v2])
        c1 = rand_param(self.rng, "c1", (2, 3))
        c2 = rand_param(self.rng, "c2", (2, 2))
        _check_op(lambda g: g.concat_cols(g.leaf(c1), g.leaf(c2)), [c1, c2])

    def test_take_row_and_reshape(self):
        m = rand_param(self.rng, "m", (4, 3))
        _check_op(lambda g: g.take_row(g.leaf(m), 2), [m])
        _check_op(lambda g: g.reshape(g.leaf(m), (3, 4)), [m])

    def test_embedding_lookup(self):
        table = rand_param(self.rng, "table", (5, 3))
        _check_op(lambda g: g.embedding_lookup(g.leaf(table), [1, 3, 1, 0]), [table])

    def test_cross_entropy(self):
        raw = rand_param(self.rng, "raw", (5,))

        def build(g):
            probs = g.softmax(g.leaf(raw))
            return g.cross_entropy(probs, 2)

        report = finite_difference_check(build, [raw])
        assert report.max_rel_error < 1e-4

    def test_affine(self):
        w = rand_param(self.rng, "w", (3, 4))
        x = rand_param(self.rng, "x", (4,))
        b = rand_param(self.rng, "b", (3,))
        _check_op(lambda g: g.affine(g.leaf(w), g.leaf(x), g.leaf(b)), [w, x, b])

    def test_tanh_scores(self):
        keys = rand_param(self.rng, "keys", (4, 5))
        shift = rand_param(self.rng, "shift", (5,))
        score = rand_param(self.rng, "score", (5,))
        _check_op(lambda g: g.tanh_scores(g.leaf(keys), g.leaf(shift), g.leaf(score)),
                  [keys, shift, score])

    def test_gru_cell(self):
        p = make_gru_params(self.rng, "gru", 3, 4)
        x = rand_param(self.rng, "x", (3,))
        s = rand_param(self.rng, "s", (4,), scale=0.9)

        def build_op(g):
            return g.gru_cell(
                g.leaf(x), g.leaf(s),
                g.leaf(p.update_input), g.leaf(p.update_state), g.leaf(p.update_bias),
                g.leaf(p.reset_input), g.leaf(p.reset_state), g.leaf(p.reset_bias),
                g.leaf(p.cand_input), g.leaf(p.cand_state), g.leaf(p.cand_bias))

        _check_op(build_op, [x, s] + p.all())


class TestAttentionSubgraphGradients:
    def test_two_encoder_attention_subgraph(self):
        """Additive attention over two encoders (lengths 3 and 2, dim 4)
        composed from raw ops matches finite differences."""
        rng = SeededRng(31)
        H1 = rand_param(rng, "H1", (3, 4))
        H2 = rand_param(rng, "H2", (2, 4))
        s = rand_param(rng, "s", (4,))
        W = rand_param(rng, "W", (5, 4))
        U1 = rand_param(rng, "U1", (5, 4))
        U2 = rand_param(rng, "U2", (5, 4))
        v = rand_param(rng, "v", (5,))
        out_w = rand_param(rng, "out_w", (4,))

        def build(g):
            q = g.matmul(g.leaf(W), g.leaf(s))
            e1 = g.tanh_scores(g.matmul(g.leaf(H1), g.transpose(g.leaf(U1))), q, g.leaf(v))
            e2 = g.tanh_scores(g.matmul(g.leaf(H2), g.transpose(g.leaf(U2))), q, g.leaf(v))
            alphas = g.softmax(g.concat_rows([e1, e2]))
            ctx = g.matmul(alphas, g.concat_rows([g.leaf(H1), g.leaf(H2)]))
            return g.matmul(ctx, g.leaf(out_w))

        params = [H1, H2, s, W, U1, U2, v, out_w]
        report = finite_difference_check(build, params)
        assert report.max_rel_error < 1e-4


class TestFiniteDifferenceCheck:
    def test_cubic_derivative(self):
        p = Parameter("x", [2.0])

        def build(g):
            x = g.leaf(p)
            xx = g.elementwise_mul(x, x)
            return g.matmul(xx, x)  # x^3

        report = finite_difference_check(build, [p])
        # d/dx x^3 at 2 is 12; central differences agree to ~eps^2.
        assert abs(report.worst.numeric - 12.0) < 12.0 * 1e-6
        assert report.max_rel_error < 1e-8

    def test_constant_function(self):
        p = Parameter("x", [1.0, 2.0])

        def build(g):
            g.leaf(p)
            return g.constant(3.5)

        report = finite_difference_check(build, [p])
        assert report.max_rel_error == 0.0
        assert report.worst.numeric == 0.0 and report.worst.analytic == 0.0

    def test_nondeterminism_detected(self):
        p = Parameter("x", [1.0])
        counter = {"n": 0}

        def build(g):
            counter["n"] += 1
            x = g.leaf(p)
            return g.matmul(g.scale(x, float(counter["n"])), x)

        with pytest.raises(GraphError):
            finite_difference_check(build, [p])

    def test_eps_validation(self):
        p = Parameter("x", [1.0])
        with pytest.raises(ValueError):
            finite_difference_check(lambda g: g.matmul(g.leaf(p), g.leaf(p)),
                                    [p], eps=0.0)

    def test_corrupted_adjoint_is_caught(self):
        rng = SeededRng(8)
        p = rand_param(rng, "x", (4,))

        def build(g):
            t = g.tanh(g.leaf(p))
            return g.matmul(t, t)

        set_adjoint_corruption(True)
        try:
            report = finite_difference_check(build, [p])
        finally:
            set_adjoint_corruption(False)
        assert report.max_rel_error > 1e-4

    def test_reports_worst_coordinate_identity(self):
        rng = SeededRng(12)
        a = rand_param(rng, "a", (3,))
        b = rand_param(rng, "b", (3,))

        def build(g):
            return g.matmul(g.leaf(a), g.leaf(b))

        report = finite_difference_check(build, [a, b])
        assert report.worst.param in ("a", "b")
        assert 0 <= report.worst.index < 3
        assert set(report.per_param) == {"a", "b"}
