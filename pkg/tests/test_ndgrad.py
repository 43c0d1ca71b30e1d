import numpy as np
import pytest

from marginkd import ndgrad as nd
from marginkd.errors import ContractError, DegenerateEmbeddingError, DimensionError, NumericError
from marginkd.ndgrad import Tensor


def test_softmax_rows_uniform():
    out = nd.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_rows_are_simplexes(rng):
    out = nd.softmax_rows(Tensor(rng.uniform(-30, 30, size=(50, 7))))
    assert np.all(out.data >= 0)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_l2_normalize_three_four_five():
    np.testing.assert_allclose(nd.l2_normalize_rows(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)


def test_l2_normalize_zero_row_raises():
    with pytest.raises(DegenerateEmbeddingError):
        nd.l2_normalize_rows(Tensor([[1.0, 0.0], [0.0, 0.0]]))


def test_exp_of_dot():
    out = nd.exp(nd.dot(Tensor([1.0, 0.0]), Tensor([-1.0, 0.0])))
    assert out.item() == pytest.approx(0.367879, abs=1e-6)


def test_matmul_shape_mismatch_reports_shapes():
    with pytest.raises(DimensionError) as info:
        nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert (2, 3) in info.value.shapes
    assert isinstance(info.value, ValueError)


def test_forward_op_dispatch_and_unknown_kind():
    x = Tensor([0.0, 1.0])
    np.testing.assert_allclose(nd.forward_op("exp", x).data, np.exp([0.0, 1.0]))
    assert nd.forward_op("scale", x, c=3.0).data.tolist() == [0.0, 3.0]
    with pytest.raises(ContractError):
        nd.forward_op("conv2d", x)


def test_backward_sum_is_ones():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    nd.backward(nd.sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_dot_self():
    x = Tensor([2.0], requires_grad=True)
    nd.backward(nd.dot(x, x))
    assert x.grad.tolist() == [4.0]


def test_backward_accumulates_over_shared_inputs():
    x = Tensor([1.5, -0.5], requires_grad=True)
    nd.backward(nd.sum(nd.add(nd.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_non_scalar_root_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        nd.backward(nd.exp(x))


def test_backward_is_deterministic(rng):
    data = rng.standard_normal((4, 3))
    grads = []
    for _ in range(2):
        x = Tensor(data, requires_grad=True)
        nd.backward(nd.sum(nd.softmax_rows(nd.matmul(x, Tensor(np.arange(6.0).reshape(3, 2))))))
        grads.append(x.grad.tobytes())
    assert grads[0] == grads[1]


def test_trace_is_topological():
    x = Tensor([1.0, 2.0], requires_grad=True)
    root = nd.sum(nd.mul(nd.exp(x), x))
    graph = nd.trace(root)
    assert graph.nodes[-1].output is root
    for rec in graph.nodes:
        assert all(i < rec.node_id for i in rec.input_ids)
    assert len(graph) == 4


def test_log_without_floor_rejects_non_positive():
    with pytest.raises(NumericError):
        nd.log(Tensor([1.0, 0.0]))


def test_log_floor_clamps_and_stops_gradient():
    x = Tensor([0.0, 0.5], requires_grad=True)
    out = nd.log(x, floor=1e-12)
    assert out.data[0] == pytest.approx(np.log(1e-12))
    nd.backward(nd.sum(out))
    assert x.grad[0] == 0.0
    assert x.grad[1] == pytest.approx(2.0)


def test_block_is_zero_with_zero_gradients():
    a = Tensor([0.3, 0.4], requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    out = nd.block(a, b)
    assert out.item() == 0.0
    nd.backward(out)
    assert not a.grad.any() and not b.grad.any()


def test_take_rows_and_gather_scatter_gradients():
    a = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    nd.backward(nd.sum(nd.take_rows(a, [0, 0, 2])))
    assert a.grad.tolist() == [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]
    b = Tensor(np.arange(9.0).reshape(3, 3), requires_grad=True)
    picked = nd.gather(b, [[0, 0], [2, 2]], [[1, 1], [0, 2]])
    assert picked.data.tolist() == [[1.0, 1.0], [6.0, 8.0]]
    nd.backward(nd.sum(picked))
    assert b.grad[0, 1] == 2.0 and b.grad[2, 0] == 1.0 and b.grad.sum() == 4.0


def test_sgd_step_and_zero_grad():
    w = Tensor([1.0, 2.0], requires_grad=True)
    nd.backward(nd.sum(nd.scale(w, 3.0)))
    nd.sgd_step([w], 0.1)
    np.testing.assert_allclose(w.data, [0.7, 1.7])
    nd.zero_grad([w])
    assert w.grad is None


def test_item_requires_single_element():
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()


def test_grad_check_linear_is_exact(rng):
    assert nd.grad_check(nd.sum, rng.standard_normal(5)) < 1e-10


def test_grad_check_constant_function():
    assert nd.grad_check(lambda t: Tensor(2.0), np.ones(3)) == 0.0


def test_grad_check_rejects_bad_step():
    with pytest.raises(ContractError):
        nd.grad_check(nd.sum, np.ones(2), step=0.0)


def test_grad_check_non_finite_raises():
    with pytest.raises(NumericError):
        nd.grad_check(lambda t: nd.sum(nd.exp(nd.scale(t, 1e3))), np.ones(2))


W = np.array([[0.3, -1.2], [0.8, 0.5], [-0.4, 1.1]])
BIAS = np.array([0.1, -0.2])

OP_CASES = {
    "matmul": lambda t: nd.sum(nd.matmul(t, Tensor(W))),
    "matmul_vec": lambda t: nd.sum(nd.matmul(Tensor(W.T), nd.take_rows(t, 0))),
    "add_bias": lambda t: nd.sum(nd.exp(nd.add(nd.matmul(t, Tensor(W)), Tensor(BIAS)))),
    "mul": lambda t: nd.sum(nd.mul(t, t)),
    "relu": lambda t: nd.sum(nd.mul(nd.relu(t), t)),
    "exp": lambda t: nd.sum(nd.exp(t)),
    "log": lambda t: nd.sum(nd.log(nd.exp(t))),
    "softmax_rows": lambda t: nd.sum(nd.mul(nd.softmax_rows(t), Tensor(np.arange(6.0).reshape(2, 3)))),
    "dot": lambda t: nd.dot(nd.take_rows(t, 0), nd.take_rows(t, 1)),
    "l2_normalize_rows": lambda t: nd.sum(nd.mul(nd.l2_normalize_rows(t), Tensor(np.arange(6.0).reshape(2, 3)))),
    "mean": lambda t: nd.mean(nd.mul(t, t)),
    "sum_rows": lambda t: nd.sum(nd.exp(nd.sum_rows(t))),
    "transpose": lambda t: nd.sum(nd.matmul(t, nd.transpose(t))),
    "gather": lambda t: nd.sum(nd.exp(nd.gather(t, [[0, 1]], [[2, 0]]))),
    "stack": lambda t: nd.sum(nd.exp(nd.stack([nd.take_rows(t, 1), nd.take_rows(t, 0)]))),
    "neg_scale": lambda t: nd.sum(nd.exp(nd.neg(nd.scale(t, 0.5)))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(sorted(OP_CASES).index(name))
    for _ in range(5):
        x = rng.uniform(-2, 2, size=(2, 3))
        if name == "relu":
            # keep clear of the kink
            x = np.where(np.abs(x) < 0.1, 0.5, x)
        assert nd.grad_check(OP_CASES[name], x) < 1e-4
