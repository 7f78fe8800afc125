import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taco import autodiff as ad
from taco.autodiff import Tensor
from taco.exceptions import DegenerateNormError, DimensionError, GraphError
from taco.gradcheck import numerical_gradient, relative_error


def leaf(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def check_grad(build, *arrays, tol=1e-4):
    """Compare tape gradients of ``build(*tensors)`` with central differences."""
    tensors = [leaf(a) for a in arrays]
    out = build(*tensors)
    ad.backward(out)
    for t in tensors:
        num = numerical_gradient(lambda: build(*[Tensor(s.values) for s in tensors]).values, t.values)
        assert relative_error(t.grad, num) < tol


# --- forward examples ---------------------------------------------------------

def test_matmul_examples():
    a = Tensor(np.eye(2))
    b = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal((a @ b).values, [[1, 2], [3, 4]])
    c = ad.matmul([[1, 0], [0, 0]], [[5, 6], [7, 8]])
    np.testing.assert_array_equal(c.values, [[5, 6], [0, 0]])


def test_matmul_grad_example():
    a, b = leaf([[1.0, 2.0]]), Tensor([[3.0], [4.0]])
    ad.backward((a @ b).sum())
    np.testing.assert_allclose(a.grad, [[3.0, 4.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_cosine_distance_examples():
    assert ad.cosine_distance_matrix([[1, 0]], [[1, 0]]).values[0, 0] == 0.0
    assert ad.cosine_distance_matrix([[1, 0]], [[0, 1]]).values[0, 0] == 1.0
    np.testing.assert_allclose(ad.cosine_distance_matrix([[1, 1]], [[1, 0]]).values,
                               [[0.29289321881345254]], atol=1e-12)


def test_cosine_distance_zero_row_rejected():
    with pytest.raises(DegenerateNormError):
        ad.cosine_distance_matrix([[0.0, 0.0], [1.0, 0.0]], [[1.0, 0.0]])
    with pytest.raises(DegenerateNormError):
        ad.cosine_distance_pairs([[0.0, 0.0], [1.0, 0.0]], [0], [1])


def test_hinge_examples():
    x = leaf([-0.5, 0.0, 0.4])
    y = ad.hinge(x)
    np.testing.assert_array_equal(y.values, [0.0, 0.0, 0.4])
    ad.backward(y.sum())
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_mse_examples():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert ad.mse(x, x).item() == 0.0
    assert ad.mse(x + 0.5, x).item() == pytest.approx(0.25, abs=1e-12)
    assert ad.mse([1.0, 3.0], [0.0, 0.0]).item() == 5.0
    with pytest.raises(DimensionError):
        ad.mse(np.ones(3), np.ones(4))


def test_backward_examples():
    w = leaf([1.0, 2.0, 3.0])
    ad.backward(w.sum())
    np.testing.assert_array_equal(w.grad, [1, 1, 1])

    w = leaf([2.0])
    ad.backward(ad.mse(w, np.zeros(1)))
    np.testing.assert_allclose(w.grad, [4.0])


def test_backward_errors():
    w = leaf([1.0, 2.0])
    with pytest.raises(GraphError):
        ad.backward(w * 2.0)
    with pytest.raises(GraphError):
        ad.backward(Tensor(1.0))
    loss = (w * w).sum()
    ad.backward(loss)
    with pytest.raises(GraphError):
        ad.backward(loss)


def test_detach_examples():
    t = leaf([3.0])
    d = ad.detach(t)
    np.testing.assert_array_equal(d.values, t.values)
    assert not d.requires_grad
    ad.backward((t * ad.detach(t)).sum())
    np.testing.assert_allclose(t.grad, [3.0])


def test_detach_only_graph_leaves_no_grad():
    t = leaf([1.0, 2.0])
    with pytest.raises(GraphError):
        ad.backward(ad.detach(t).sum())
    assert t.grad is None


def test_grads_accumulate_across_backward_calls():
    w = leaf([1.0])
    ad.backward((w * 2.0).sum())
    ad.backward((w * 3.0).sum())
    np.testing.assert_allclose(w.grad, [5.0])
    w.zero_grad()
    assert w.grad is None


def test_shared_subexpression_visited_once():
    # y is used twice; the tape must add both contributions exactly once each
    x = leaf([2.0])
    y = x * x
    ad.backward((y + y).sum())
    np.testing.assert_allclose(x.grad, [8.0])


def test_tape_is_topological():
    x = leaf(np.ones((2, 2)))
    y = ad.relu(x @ x)
    z = (y * 2.0 + y).sum()
    tape = ad.build_tape(z)
    pos = {id(t): k for k, t in enumerate(tape)}
    for t in tape:
        for inp in t._node.inputs:
            if inp._node is not None:
                assert pos[id(inp)] < pos[id(t)]
    assert len(pos) == len(tape)


# --- finite-difference checks, one per op ---------------------------------------

@pytest.mark.parametrize("trial", range(100))
def test_elementwise_and_matmul_gradients(trial):
    rng = np.random.default_rng(trial)
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
    c = rng.uniform(-1, 1, (3, 4))
    check_grad(lambda x, y: (x @ y).sum(), a, b)
    check_grad(lambda x, y: ((x + y) * (x - y)).mean(), a, c)
    check_grad(lambda x: ad.square(x).sum(), a)
    check_grad(lambda x, y: (x * y[0]).sum(), a, rng.uniform(-1, 1, (1, 4)))


@pytest.mark.parametrize("trial", range(20))
def test_structural_op_gradients(trial):
    rng = np.random.default_rng(100 + trial)
    a, b = rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (2, 3))
    w = rng.uniform(-1, 1, (3,))
    check_grad(lambda x: (ad.reshape(x, (3, 4)) @ ad.reshape(x, (4, 3))).sum(), a)
    check_grad(lambda x: (ad.transpose(x) @ x).sum(), a)
    check_grad(lambda x: ad.broadcast_to(x, (5, 3)).sum() * 0.3 + (x * x).sum(), w)
    check_grad(lambda x, y: (ad.concat([x, y], axis=0) * np.arange(18).reshape(6, 3)).sum(), a, b)
    check_grad(lambda x: (ad.index(x, (np.array([0, 2, 2]), np.array([1, 0, 0]))) * [1, 2, 3]).sum(), a)
    check_grad(lambda x: (ad.take_rows(x, [3, 0, 3, 1]) * np.arange(12).reshape(4, 3)).sum(), a)
    check_grad(lambda x: (ad.tsum(x, axis=0) * w).sum() + ad.tmean(x, axis=1).sum(), a)
    check_grad(lambda x: (ad.normalize_rows(x) * b[0]).sum(), a)


@pytest.mark.parametrize("trial", range(20))
def test_relu_and_mse_gradients(trial):
    rng = np.random.default_rng(200 + trial)
    a = rng.uniform(-1, 1, (3, 5))
    # keep away from the kink so the finite difference is well defined
    a[np.abs(a) < 1e-3] = 0.5
    check_grad(lambda x: (ad.relu(x) * np.arange(15).reshape(3, 5)).sum(), a)
    check_grad(lambda x: ad.mse(x, np.ones((3, 5))), a)


@pytest.mark.parametrize("trial", range(20))
def test_cosine_gradients(trial):
    rng = np.random.default_rng(300 + trial)
    za, zb = rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (5, 3))
    weights = rng.uniform(-1, 1, (4, 5))
    check_grad(lambda x, y: (ad.cosine_distance_matrix(x, y) * weights).sum(), za, zb)
    rows_a, rows_b = rng.integers(0, 4, 6), rng.integers(0, 4, 6)
    check_grad(lambda x: (ad.cosine_distance_pairs(x, rows_a, rows_b) * np.arange(1, 7)).sum(), za)


# --- properties ------------------------------------------------------------------

matrices = st.integers(1, 6).flatmap(
    lambda k: st.integers(1, 5).map(lambda f: (k, f))
)


@settings(max_examples=100, deadline=None)
@given(shape=matrices, seed=st.integers(0, 2**32 - 1))
def test_cosine_distance_range_symmetry_diagonal(shape, seed):
    z = np.random.default_rng(seed).uniform(-1, 1, shape)
    z[np.linalg.norm(z, axis=1) < 1e-6] = 1.0
    d = ad.cosine_distance_matrix(z, z).values
    assert np.all((d >= 0) & (d <= 2))
    np.testing.assert_allclose(d, d.T, atol=1e-15)
    np.testing.assert_allclose(np.diag(d), 0.0, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_forward_finite_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.uniform(-1, 1, (6, 4)), rng.uniform(-1, 1, (4, 3))

    def run():
        wt = leaf(w)
        loss = ad.mse(ad.relu(Tensor(x) @ wt), np.zeros((6, 3)))
        ad.backward(loss)
        return loss.values.copy(), wt.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert np.isfinite(l1) and np.all(np.isfinite(g1))
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_grad_shape_matches_values():
    a = leaf(np.ones((2, 3)))
    b = leaf(np.ones((3,)))
    ad.backward((a * b).sum())
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
