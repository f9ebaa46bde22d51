import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbgmn import autodiff as ad
from mbgmn.autodiff import ShapeError, SparseMatrix, finite_diff_check, parameter, tensor

TRIALS = 100


def sequential_matmul(d, b):
    # densified product accumulated column by column, in index order
    out = np.zeros((d.shape[0], b.shape[1]))
    for i in range(d.shape[0]):
        for j in range(d.shape[1]):
            out[i] += d[i, j] * b[j]
    return out


def random_sparse(rng, m, n, density=0.3):
    return rng.standard_normal((m, n)) * (rng.random((m, n)) < density)


# ---------------------------------------------------------------- examples


def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(np.eye(2), m).value, m)
    assert np.array_equal(ad.matmul(m, np.array([[5.0], [6.0]])).value, [[17.0], [39.0]])


def test_matmul_zero_operand_gradient():
    a = parameter(np.arange(6.0).reshape(2, 3))
    z = parameter(np.zeros((3, 2)))
    out = ad.matmul(a, z)
    assert np.array_equal(out.value, np.zeros((2, 2)))
    ad.backward(ad.sum_axis(out))
    # d/da sees z = 0, d/dz sees a
    assert np.array_equal(a.grad, np.zeros((2, 3)))
    assert np.array_equal(z.grad, a.value.T @ np.ones((2, 2)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_spmm_examples():
    b = np.arange(12.0).reshape(4, 3)
    eye = SparseMatrix.from_dense(np.eye(4))
    assert np.array_equal(ad.spmm(eye, b).value, b)
    empty = SparseMatrix.from_coo(5, 4, [], [])
    assert np.array_equal(ad.spmm(empty, b).value, np.zeros((5, 3)))
    with pytest.raises(ShapeError):
        ad.spmm(eye, np.zeros((3, 2)))


def test_spmm_random_8x8_against_dense():
    rng = np.random.default_rng(0)
    d = random_sparse(rng, 8, 8)
    b = rng.standard_normal((8, 4))
    np.testing.assert_allclose(ad.spmm(SparseMatrix.from_dense(d), b).value, d @ b, rtol=0, atol=1e-12)


def test_spmm_gradient_flows_to_dense_only():
    rng = np.random.default_rng(1)
    s = SparseMatrix.from_dense(random_sparse(rng, 5, 6))
    b = parameter(rng.standard_normal((6, 3)))
    ad.backward(ad.sum_axis(ad.spmm(s, b)))
    np.testing.assert_allclose(b.grad, s.to_dense().T @ np.ones((5, 3)), atol=1e-14)


def test_sparse_matrix_validation():
    with pytest.raises(ValueError, match="duplicate"):
        SparseMatrix(2, 2, np.array([0, 2, 2]), np.array([1, 1]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError, match="out of range"):
        SparseMatrix(2, 2, np.array([0, 1, 1]), np.array([2]), np.array([1.0]))
    with pytest.raises(ValueError, match="non-decreasing"):
        SparseMatrix(2, 2, np.array([0, 1, 0]), np.array([0]), np.array([1.0]))
    with pytest.raises(ValueError):
        SparseMatrix(2, 2, np.array([0, 1]), np.array([0]), np.array([1.0]))


def test_sparse_transpose_roundtrip():
    rng = np.random.default_rng(2)
    d = random_sparse(rng, 7, 5)
    s = SparseMatrix.from_dense(d)
    assert np.array_equal(s.transpose().to_dense(), d.T)
    assert np.array_equal(s.transpose().transpose().to_dense(), d)
    assert s.nnz == np.count_nonzero(d)


def test_elementwise_examples():
    assert np.array_equal(ad.concat([[1.0, 2.0], [3.0]]).value, [1.0, 2.0, 3.0])
    assert np.allclose(ad.leaky_relu([-10.0, 0.0, 10.0], 0.1).value, [-1.0, 0.0, 10.0])
    v = np.arange(16.0)
    parts = ad.concat([ad.slice_last(v, 0, 8), ad.slice_last(v, 8, 16)])
    assert np.array_equal(parts.value, v)


def test_elementwise_errors():
    with pytest.raises(ShapeError):
        ad.add(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        ad.slice_last(np.zeros(4), 2, 6)
    with pytest.raises(ShapeError):
        ad.take(np.zeros((3, 2)), [3])


def test_leaky_relu_backward_slopes():
    x = parameter([-2.0, -0.5, 0.5, 3.0])
    ad.backward(ad.sum_axis(ad.leaky_relu(x, 0.1)))
    assert np.array_equal(x.grad, [0.1, 0.1, 1.0, 1.0])


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax_lastaxis([2.5, 2.5, 2.5]).value, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(ad.softmax_lastaxis([0.0, math.log(3.0)]).value, [0.25, 0.75], atol=1e-15)
    assert np.array_equal(ad.softmax_lastaxis([7.0]).value, [1.0])
    with pytest.raises(ShapeError):
        ad.softmax_lastaxis(np.zeros((2, 0)))


def test_softmax_large_logits_stable():
    y = ad.softmax_lastaxis([1000.0, 1000.0, -1000.0]).value
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [0.5, 0.5, 0.0])


def test_backward_examples():
    x = parameter([1.0, -2.0, 3.0])
    ad.backward(ad.sum_axis(x))
    assert np.array_equal(x.grad, np.ones(3))
    x = parameter([1.0, 2.0])
    ad.backward(ad.square_sum(x))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        ad.backward(ad.scale(parameter([1.0, 2.0]), 2.0))


def test_backward_accumulates_reused_node():
    x = parameter([3.0])
    y = ad.mul(x, x)
    ad.backward(ad.sum_axis(ad.add(y, x)))
    assert np.array_equal(x.grad, [7.0])


def test_take_repeated_indices_accumulate():
    x = parameter(np.arange(6.0).reshape(3, 2))
    ad.backward(ad.sum_axis(ad.take(x, [0, 2, 0, 0])))
    assert np.array_equal(x.grad, [[3.0, 3.0], [0.0, 0.0], [1.0, 1.0]])


def test_tape_is_topological_and_reversed():
    x = parameter([1.0, 2.0])
    y = ad.scale(x, 3.0)
    z = ad.mul(y, x)
    loss = ad.sum_axis(z)
    tape = ad.trace(loss)
    pos = {n.node_id: i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            assert pos[p.node_id] < pos[n.node_id]
    assert tape.nodes[-1] is loss


def test_constants_get_no_gradient_accumulated():
    c = ad.constant([1.0, 2.0])
    x = parameter([3.0, 4.0])
    ad.backward(ad.sum_axis(ad.mul(c, x)))
    assert np.array_equal(x.grad, [1.0, 2.0])
    assert not np.any(c.grad)


# --------------------------------------------------------- finite differences


def test_finite_diff_square():
    x = parameter([3.0])
    rep = finite_diff_check(lambda: ad.square_sum(x), x, step=1e-5, tol=1e-4)
    assert rep.passed
    assert rep.analytic == 6.0
    assert abs(rep.numeric - 6.0) < 1e-6


def test_finite_diff_constant():
    x = parameter([1.0, 2.0])
    rep = finite_diff_check(lambda: ad.constant(5.0), x)
    assert rep.passed and rep.analytic == 0.0 and rep.numeric == 0.0


def test_finite_diff_detects_wrong_adjoint():
    x = parameter([0.7, -1.3])

    def bad_square(t):
        return ad._node(t.value**2, (t,), lambda g: (3.0 * g * t.value,), "bad")

    rep = finite_diff_check(lambda: ad.sum_axis(bad_square(x)), x)
    assert not rep.passed
    assert rep.max_rel_error > 0.1


def test_finite_diff_rejects_non_finite():
    x = parameter([1.0])
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda: ad.scale(x, np.inf), x)


def test_finite_diff_skips_kink_crossings():
    # x sits within one step of the leaky-relu kink
    x = parameter([1e-6, 2.0])
    rep = finite_diff_check(lambda: ad.sum_axis(ad.leaky_relu(x, 0.1)), x, step=1e-5)
    assert rep.n_kinked == 1 and rep.n_checked == 1 and rep.passed
    loose = finite_diff_check(lambda: ad.sum_axis(ad.leaky_relu(x, 0.1)), x, step=1e-5, skip_kinks=False)
    assert not loose.passed


def _fd_trial(op_name, rng):
    """Build a random scalar function of fresh parameters exercising one op."""
    shape = tuple(int(s) for s in rng.integers(1, 5, size=2))
    a = parameter(rng.standard_normal(shape))
    b = parameter(rng.standard_normal(shape))
    w = rng.standard_normal(shape)  # projection so the scalar sees every entry
    params = [a, b]
    if op_name == "add":
        f = lambda: ad.add(a, b)
    elif op_name == "sub":
        f = lambda: ad.sub(a, b)
    elif op_name == "mul":
        f = lambda: ad.mul(a, b)
    elif op_name == "broadcast_mul":
        row = parameter(rng.standard_normal((1, shape[1])))
        params = [a, row]
        f = lambda: ad.mul(a, row)
    elif op_name == "scale":
        c = float(rng.standard_normal())
        f = lambda: ad.scale(a, c)
    elif op_name == "leaky_relu":
        # keep entries away from the kink so central differences are valid
        a.value[np.abs(a.value) < 1e-3] += 0.01
        f = lambda: ad.leaky_relu(a, 0.1)
    elif op_name == "matmul":
        c = parameter(rng.standard_normal((shape[1], 3)))
        params = [a, c]
        w = rng.standard_normal((shape[0], 3))
        f = lambda: ad.matmul(a, c)
    elif op_name == "spmm":
        s = SparseMatrix.from_dense(random_sparse(rng, 4, shape[0], 0.5))
        params = [a]
        w = rng.standard_normal((4, shape[1]))
        f = lambda: ad.spmm(s, a)
    elif op_name == "concat":
        w = rng.standard_normal((shape[0], 2 * shape[1]))
        f = lambda: ad.concat([a, b])
    elif op_name == "slice_last":
        lo = int(rng.integers(0, shape[1]))
        w = rng.standard_normal((shape[0], shape[1] - lo))
        params = [a]
        f = lambda: ad.slice_last(a, lo, shape[1])
    elif op_name == "sum_axis":
        w = rng.standard_normal(shape[0])
        params = [a]
        f = lambda: ad.sum_axis(a, axis=1)
    elif op_name == "reshape":
        w = rng.standard_normal(shape[0] * shape[1])
        params = [a]
        f = lambda: ad.reshape(a, (-1,))
    elif op_name == "stack":
        w = rng.standard_normal((2,) + shape)
        f = lambda: ad.stack([a, b])
    elif op_name == "take":
        idx = rng.integers(0, shape[0], size=5)
        w = rng.standard_normal((5, shape[1]))
        params = [a]
        f = lambda: ad.take(a, idx)
    elif op_name == "einsum":
        c = parameter(rng.standard_normal((shape[1], 3)))
        params = [a, b, c]
        w = rng.standard_normal((shape[0], 3))
        f = lambda: ad.einsum("ij,ij,jk->ik", a, b, c)
    elif op_name == "softmax":
        params = [a]
        f = lambda: ad.softmax_lastaxis(a)
    elif op_name == "square_sum":
        params = [a]
        w = np.array(1.0)
        f = lambda: ad.square_sum(a)
    else:
        raise KeyError(op_name)
    return (lambda: ad.sum_axis(ad.mul(f(), w))), params


OPS = [
    "add", "sub", "mul", "broadcast_mul", "scale", "leaky_relu", "matmul", "spmm", "concat",
    "slice_last", "sum_axis", "reshape", "stack", "take", "einsum", "softmax", "square_sum",
]


@pytest.mark.parametrize("op_name", OPS)
def test_op_gradients_100_seeded_trials(op_name):
    worst = 0.0
    for trial in range(TRIALS):
        rng = np.random.default_rng([OPS.index(op_name), trial])
        f, params = _fd_trial(op_name, rng)
        rep = finite_diff_check(f, params, step=1e-5, tol=1e-4)
        worst = max(worst, rep.max_rel_error)
        assert rep.passed, f"{op_name} trial {trial}: {rep}"
    assert worst < 1e-4


# ----------------------------------------------------------------- properties


@settings(max_examples=60, deadline=None)
@given(
    m=st.integers(1, 32),
    n=st.integers(1, 32),
    p=st.integers(1, 32),
    density=st.floats(0.0, 1.0),
    seed=st.integers(0, 2**31 - 1),
)
def test_spmm_matches_densified(m, n, p, density, seed):
    rng = np.random.default_rng(seed)
    d = random_sparse(rng, m, n, density)
    b = rng.standard_normal((n, p))
    out = ad.spmm(SparseMatrix.from_dense(d), b).value
    assert np.array_equal(out, sequential_matmul(d, b))
    np.testing.assert_allclose(out, d @ b, rtol=0, atol=1e-12)


@settings(max_examples=80, deadline=None)
@given(
    rows=st.integers(1, 6),
    cols=st.integers(1, 12),
    shift=st.floats(-1e3, 1e3),
    seed=st.integers(0, 2**31 - 1),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(rows, cols, shift, seed):
    x = np.random.default_rng(seed).normal(scale=5.0, size=(rows, cols))
    y = ad.softmax_lastaxis(x).value
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(ad.softmax_lastaxis(x + shift).value, y, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_tape_determinism(seed):
    def run():
        rng = np.random.default_rng(seed)
        a = parameter(rng.standard_normal((4, 3)))
        s = SparseMatrix.from_dense(random_sparse(rng, 5, 4))
        h = ad.leaky_relu(ad.spmm(s, a), 0.1)
        loss = ad.square_sum(ad.softmax_lastaxis(h))
        ad.backward(loss)
        return loss.value.copy(), a.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)
