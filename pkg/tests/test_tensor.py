"""Tensor-core tests: forward examples, finite-difference gradient oracle,
softmax/layer-norm properties, dump round-trips, and contract errors."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sella.tensor import (
    Graph,
    IndexError_,
    NonFiniteError,
    PRIMITIVE_OPS,
    ShapeError,
    Tensor,
    TensorError,
    grad_check,
    load_tensor,
    primitive_forward,
    save_tensor,
)


def finite_diff(graph, loss, param, step=1e-5):
    """Independent central-difference gradient for a leaf node."""
    base = param.out.numpy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(flat.size):
        for sign, slot in ((+step, 0), (-step, 1)):
            p = base.copy().reshape(-1)
            p[i] += sign
            val = float(graph.recompute(loss, {param.nid: p.reshape(base.shape)}))
            if slot == 0:
                up = val
            else:
                down = val
        flat[i] = (up - down) / (2 * step)
    return grad


def rel_err(analytic, numeric):
    return np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)))


# ---------------------------------------------------------------------------
# forward examples


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 5))
    out = primitive_forward("matmul", Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_row_softmax_quarter_three_quarters():
    out = primitive_forward("row_softmax", Tensor([0.0, np.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)


def test_layer_norm_constant_row_is_zero():
    out = primitive_forward("layer_norm", Tensor([[7.0, 7.0, 7.0, 7.0]]))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_gelu_matches_tanh_formula():
    x = np.linspace(-3, 3, 13)
    out = primitive_forward("gelu", Tensor(x))
    expected = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(out.data, expected, atol=1e-15)


def test_embedding_lookup_rows():
    table = np.arange(12.0).reshape(4, 3)
    out = primitive_forward("embedding_lookup", Tensor(table), indices=(2, 0, 2))
    np.testing.assert_array_equal(out.data, table[[2, 0, 2]])


def test_cosine_similarity_matrix_and_vectors():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    out = primitive_forward("cosine_similarity", Tensor(a), Tensor(a))
    np.testing.assert_allclose(out.data, np.eye(2), atol=1e-15)
    v = Tensor([3.0, 4.0])
    self_cos = primitive_forward("cosine_similarity", v, v)
    assert self_cos.shape == ()
    assert self_cos.item() == pytest.approx(1.0, abs=1e-15)


def test_determinism_bit_identical():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 4))
    outs = []
    for _ in range(2):
        g = Graph()
        n = g.leaf(x)
        outs.append(g.row_softmax(g.gelu(g.layer_norm(n))).out.numpy())
    assert np.array_equal(outs[0], outs[1])


# ---------------------------------------------------------------------------
# softmax / layer-norm properties


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8),
       st.floats(-50, 50))
@settings(max_examples=60, deadline=None)
def test_row_softmax_simplex_and_shift_invariance(row, shift):
    base = primitive_forward("row_softmax", Tensor(row)).data
    assert (base >= 0).all()
    assert abs(base.sum() - 1.0) <= 1e-12
    shifted = primitive_forward(
        "row_softmax", Tensor(np.asarray(row) + shift)).data
    np.testing.assert_allclose(shifted, base, atol=1e-12)


def test_row_softmax_rows_sum_to_one_2d():
    rng = np.random.default_rng(3)
    out = primitive_forward("row_softmax", Tensor(rng.normal(size=(6, 9)))).data
    np.testing.assert_allclose(out.sum(axis=1), np.ones(6), atol=1e-12)


# ---------------------------------------------------------------------------
# backward examples


def test_backward_sum_is_all_ones():
    g = Graph()
    x = g.leaf(np.random.default_rng(1).normal(size=(3, 4)), param=True)
    grads = g.backward(g.sum(x))
    np.testing.assert_array_equal(grads[x.nid].data, np.ones((3, 4)))


def test_backward_dot_is_other_operand():
    rng = np.random.default_rng(2)
    xv, yv = rng.normal(size=5), rng.normal(size=5)
    g = Graph()
    x = g.leaf(xv, param=True)
    y = g.leaf(yv, param=True)
    grads = g.backward(g.sum(g.mul(x, y)))
    np.testing.assert_allclose(grads[x.nid].data, yv, atol=1e-15)
    np.testing.assert_allclose(grads[y.nid].data, xv, atol=1e-15)


def test_backward_unreached_param_gets_zeros():
    g = Graph()
    x = g.leaf(np.ones(3), param=True)
    unused = g.leaf(np.ones((2, 2)), param=True)
    grads = g.backward(g.sum(x))
    np.testing.assert_array_equal(grads[unused.nid].data, np.zeros((2, 2)))


def test_backward_random_three_op_graph_matches_fd():
    rng = np.random.default_rng(11)
    g = Graph()
    x = g.leaf(rng.normal(size=(3, 3)), param=True)
    w = g.leaf(rng.normal(size=(3, 3)), param=True)
    loss = g.mean(g.gelu(g.matmul(x, w)))
    grads = g.backward(loss)
    assert rel_err(grads[x.nid].data, finite_diff(g, loss, x)) < 1e-4
    assert rel_err(grads[w.nid].data, finite_diff(g, loss, w)) < 1e-4


# ---------------------------------------------------------------------------
# per-primitive gradient oracle (20 random trials each)


def _scalarize(g, node):
    # fold any output into a scalar through a fixed random weighting
    rng = np.random.default_rng(99)
    w = g.leaf(rng.normal(size=node.out.shape))
    return g.sum(g.mul(node, w)) if node.out.shape else g.sum(node)


CASES = {
    "matmul": lambda g, rng: (lambda a, b: g.matmul(a, b))(
        g.leaf(rng.normal(size=(3, 4)), param=True),
        g.leaf(rng.normal(size=(4, 2)), param=True)),
    "add": lambda g, rng: g.add(g.leaf(rng.normal(size=(3, 4)), param=True),
                                g.leaf(rng.normal(size=(3, 4)), param=True)),
    "add_bias_row": lambda g, rng: g.add(
        g.leaf(rng.normal(size=(3, 4)), param=True),
        g.leaf(rng.normal(size=4), param=True)),
    "mul": lambda g, rng: g.mul(g.leaf(rng.normal(size=(2, 5)), param=True),
                                g.leaf(rng.normal(size=(2, 5)), param=True)),
    "scale": lambda g, rng: g.scale(
        g.leaf(rng.normal(size=(3, 3)), param=True), -1.7),
    "row_softmax": lambda g, rng: g.row_softmax(
        g.leaf(rng.normal(size=(3, 5)), param=True)),
    "layer_norm": lambda g, rng: g.layer_norm(
        g.leaf(rng.normal(size=(3, 6)), param=True)),
    "gelu": lambda g, rng: g.gelu(g.leaf(rng.normal(size=(4, 3)), param=True)),
    "embedding_lookup": lambda g, rng: g.embedding_lookup(
        g.leaf(rng.normal(size=(5, 3)), param=True), (1, 4, 1, 0)),
    "transpose": lambda g, rng: g.transpose(
        g.leaf(rng.normal(size=(2, 4)), param=True)),
    "concat_rows": lambda g, rng: g.concat_rows(
        g.leaf(rng.normal(size=(2, 3)), param=True),
        g.leaf(rng.normal(size=(4, 3)), param=True)),
    "sum": lambda g, rng: g.sum(g.leaf(rng.normal(size=(3, 3)), param=True)),
    "mean": lambda g, rng: g.mean(g.leaf(rng.normal(size=(3, 3)), param=True)),
    "sigmoid": lambda g, rng: g.sigmoid(
        g.leaf(rng.normal(size=(2, 4)), param=True)),
    "log": lambda g, rng: g.log(g.leaf(
        rng.uniform(0.2, 3.0, size=(2, 4)), param=True)),
    "exp": lambda g, rng: g.exp(g.leaf(rng.normal(size=(2, 4)), param=True)),
    "cosine_similarity": lambda g, rng: g.cosine_similarity(
        g.leaf(rng.normal(size=(3, 4)), param=True),
        g.leaf(rng.normal(size=(2, 4)), param=True)),
}


@pytest.mark.parametrize("case", sorted(CASES))
def test_primitive_gradients_match_finite_differences(case):
    for trial in range(20):
        rng = np.random.default_rng(1000 * hash(case) % 2**31 + trial)
        g = Graph()
        node = CASES[case](g, rng)
        loss = _scalarize(g, node)
        grads = g.backward(loss)
        for pid in g.param_ids:
            numeric = finite_diff(g, loss, g.nodes[pid])
            assert rel_err(grads[pid].data, numeric) <= 1e-4, (case, trial)


def test_all_primitives_covered_by_gradient_cases():
    exercised = {c.split("_bias")[0] for c in CASES}
    assert exercised == set(PRIMITIVE_OPS)


# ---------------------------------------------------------------------------
# grad_check


def test_grad_check_quadratic_tight():
    g = Graph()
    x = g.leaf(np.array([1.0, -2.0, 0.5]), param=True)
    loss = g.sum(g.mul(x, x))
    assert grad_check(g, loss, x, 1e-5) < 1e-6


def test_grad_check_gelu_chain():
    rng = np.random.default_rng(4)
    g = Graph()
    x = g.leaf(rng.normal(size=(2, 3)), param=True)
    w = g.leaf(rng.normal(size=(3, 3)), param=True)
    loss = g.mean(g.gelu(g.matmul(g.gelu(x), w)))
    assert grad_check(g, loss, w, 1e-5) < 1e-4


def test_grad_check_zero_influence():
    g = Graph()
    x = g.leaf(np.ones(3), param=True)
    dead = g.leaf(np.ones(2), param=True)
    loss = g.sum(x)
    assert g.backward(loss)[dead.nid].data.tolist() == [0.0, 0.0]
    assert grad_check(g, loss, dead, 1e-5) == 0.0


def test_grad_check_rejects_bad_step():
    g = Graph()
    x = g.leaf(np.ones(2), param=True)
    loss = g.sum(x)
    with pytest.raises(TensorError):
        grad_check(g, loss, x, 0.0)


# ---------------------------------------------------------------------------
# contract errors


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        primitive_forward("matmul", Tensor(np.ones((2, 3))),
                          Tensor(np.ones((4, 5))))


def test_embedding_lookup_out_of_bounds():
    with pytest.raises(IndexError_, match="out of bounds"):
        primitive_forward("embedding_lookup", Tensor(np.ones((3, 2))),
                          indices=(0, 3))


def test_mul_broadcast_rejected():
    with pytest.raises(ShapeError):
        primitive_forward("mul", Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_non_scalar_loss_rejected():
    g = Graph()
    x = g.leaf(np.ones((2, 2)), param=True)
    with pytest.raises(TensorError, match="scalar"):
        g.backward(g.gelu(x))


def test_nan_input_surfaces_immediately():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_log_rejects_non_positive():
    with pytest.raises(TensorError, match="log"):
        primitive_forward("log", Tensor([1.0, 0.0]))


def test_cosine_zero_norm_rejected():
    with pytest.raises(TensorError, match="zero-norm"):
        primitive_forward("cosine_similarity", Tensor([[0.0, 0.0]]),
                          Tensor([[1.0, 0.0]]))


def test_foreign_node_rejected():
    g1, g2 = Graph(), Graph()
    a = g1.leaf(np.ones(2))
    g2.leaf(np.ones(2))
    with pytest.raises(TensorError, match="belong"):
        g2.sum(a)


# ---------------------------------------------------------------------------
# dump format


def test_tensor_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    for shape in [(), (4,), (3, 5), (2, 3, 4)]:
        arr = rng.normal(size=shape)
        path = tmp_path / "t.bin"
        save_tensor(path, arr)
        back = load_tensor(path)
        assert back.shape == arr.shape
        assert np.array_equal(back, np.asarray(arr))


def test_tensor_dump_header_is_ascii_line(tmp_path):
    path = tmp_path / "t.bin"
    save_tensor(path, np.zeros((2, 3)))
    with open(path, "rb") as f:
        assert f.readline() == b"shape: 2 3\n"
