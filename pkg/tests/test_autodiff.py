import numpy as np
import pytest

from hirnet import autodiff as ad
from hirnet.errors import ContractError, ShapeError


def naive_matmul(a, b):
    """Triple-loop reference product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(ad.tensor(np.eye(2)), ad.tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_unit_row_selects_first_entry(self):
        out = ad.matmul(ad.tensor([[1.0, 0.0]]), ad.tensor([[2.0], [5.0]]))
        np.testing.assert_array_equal(out.data, [[2.0]])

    def test_matches_naive_triple_loop(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = ad.matmul(ad.tensor(a), ad.tensor(b))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))


class TestRelu:
    def test_sign_cases(self):
        out = ad.relu(ad.tensor([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 2.0]])

    def test_all_positive_unchanged(self):
        x = np.array([[0.5, 1.5], [2.0, 3.0]])
        np.testing.assert_array_equal(ad.relu(ad.tensor(x)).data, x)

    def test_gradient_mask(self):
        g = ad.Graph()
        x = g.param([[-1.0, 2.0]])
        loss = ad.sum_all(ad.relu(x))
        grads = g.backward(loss)
        np.testing.assert_array_equal(grads[x.node_id], [[0.0, 1.0]])


class TestLogSoftmax:
    def test_uniform_two_class(self):
        out = ad.log_softmax(ad.tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[-np.log(2), -np.log(2)]], atol=1e-15)

    def test_one_zero_logits(self):
        # Direct evaluation of the softmax formula as the oracle.
        logits = np.array([[1.0, 0.0]])
        expected = logits - np.log(np.exp(logits).sum())
        out = ad.log_softmax(ad.tensor(logits))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)
        np.testing.assert_allclose(out.data, [[-0.31326168751822286, -1.3132616875182228]],
                                   atol=1e-12)

    def test_huge_logits_stay_finite(self):
        out = ad.log_softmax(ad.tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert abs(out.data[0, 0]) < 1e-12

    def test_rows_exponentiate_to_one(self):
        rng = np.random.default_rng(5)
        x = rng.normal(scale=50.0, size=(7, 4))
        out = ad.log_softmax(ad.tensor(x))
        np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-12)

    def test_needs_two_columns(self):
        with pytest.raises(ShapeError):
            ad.log_softmax(ad.tensor([[1.0]]))


class TestBackward:
    def test_sum_gradient_all_ones(self):
        g = ad.Graph()
        x = g.param(np.arange(4.0).reshape(2, 2))
        grads = g.backward(ad.sum_all(x))
        np.testing.assert_array_equal(grads[x.node_id], np.ones((2, 2)))

    def test_square_gradient(self):
        g = ad.Graph()
        x = g.param([[3.0]])
        grads = g.backward(ad.sum_all(x * x))
        np.testing.assert_array_equal(grads[x.node_id], [[6.0]])

    def test_loss_gradient_wrt_itself_is_one(self):
        g = ad.Graph()
        x = g.param([[2.0]])
        loss = ad.sum_all(x * x)
        grads = g.backward(loss)
        np.testing.assert_array_equal(grads[loss.node_id], [[1.0]])

    def test_non_scalar_rejected(self):
        g = ad.Graph()
        x = g.param(np.ones((2, 2)))
        with pytest.raises(ContractError):
            g.backward(x * x)

    def test_second_backward_rejected(self):
        g = ad.Graph()
        x = g.param([[1.0]])
        loss = ad.sum_all(x)
        g.backward(loss)
        with pytest.raises(ContractError):
            g.backward(loss)

    def test_constant_loss_rejected(self):
        with pytest.raises(ContractError):
            ad.backward(ad.tensor([[1.0]]))

    def test_mixing_graphs_rejected(self):
        g1, g2 = ad.Graph(), ad.Graph()
        with pytest.raises(ContractError):
            g1.param([[1.0]]) * g2.param([[1.0]])

    def test_unused_param_gets_zero_gradient(self):
        g = ad.Graph()
        x = g.param([[1.0, 2.0]])
        unused = g.param([[5.0]])
        grads = g.backward(ad.sum_all(x))
        np.testing.assert_array_equal(grads[unused.node_id], [[0.0]])

    def test_composite_mlp_loss_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 3))
        w1, b1 = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
        w2, b2 = rng.normal(size=(4, 2)), rng.normal(size=(1, 2))

        def f(graph, ts):
            h = ad.relu(ad.matmul(ad.tensor(x), ts[0]) + ts[1])
            logits = ad.matmul(h, ts[2]) + ts[3]
            return ad.sum_all(ad.log_softmax(logits) * ad.log_softmax(logits)) * (1.0 / 6)

        assert ad.grad_check(f, [w1, b1, w2, b2], step=1e-5) < 1e-4


class TestGradCheck:
    def test_quadratic_is_nearly_exact(self):
        err = ad.grad_check(lambda g, ts: ad.sum_all(ts[0] * ts[0]),
                            [np.array([[0.3, -1.2], [2.0, 0.7]])])
        assert err < 1e-9

    def test_constant_function(self):
        err = ad.grad_check(lambda g, ts: ad.sum_all(ts[0] * 0.0), [np.array([[1.0, 2.0]])])
        assert err < 1e-9


OPS = {
    "add": lambda g, ts: ad.sum_all((ts[0] + ts[1]) * (ts[0] + ts[1])),
    "add_bias_row": lambda g, ts: ad.sum_all(ad.exp(ts[0] + ts[1])),
    "sub": lambda g, ts: ad.sum_all((ts[0] - ts[1]) * (ts[0] - ts[1])),
    "mul": lambda g, ts: ad.sum_all(ts[0] * ts[1] * 0.5),
    "scale": lambda g, ts: ad.sum_all(ts[0] * 3.7),
    "matmul": lambda g, ts: ad.sum_all(ad.matmul(ts[0], ts[1]) * ad.matmul(ts[0], ts[1])),
    "relu": lambda g, ts: ad.sum_all(ad.relu(ts[0]) * ad.relu(ts[0])),
    "exp": lambda g, ts: ad.sum_all(ad.exp(ts[0])),
    "log_softmax": lambda g, ts: ad.sum_all(ad.log_softmax(ts[0]) * ad.log_softmax(ts[0])),
    "gather_rows": lambda g, ts: ad.sum_all(ad.gather_rows(ts[0], [2, 0, 2]) * 2.0),
    "row_sum": lambda g, ts: ad.sum_all(ad.row_sum(ts[0]) * ad.row_sum(ts[0])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_grad_check(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    a = rng.normal(size=(3, 4))
    if name == "add_bias_row":
        params = [a, rng.normal(size=(1, 4))]
    elif name == "matmul":
        params = [a, rng.normal(size=(4, 2))]
    elif name in ("add", "sub", "mul"):
        params = [a, rng.normal(size=(3, 4))]
    else:
        params = [a]
    assert ad.grad_check(OPS[name], params, step=1e-5) < 1e-4


def test_tensors_require_two_dims():
    with pytest.raises(ShapeError):
        ad.tensor(np.zeros((2, 2, 2)))


def test_scalar_item():
    assert ad.tensor(3.5).item() == 3.5
    with pytest.raises(ShapeError):
        ad.tensor([[1.0, 2.0]]).item()
