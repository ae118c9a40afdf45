import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ovseg import tensor as T
from ovseg.tensor import NonFiniteError, Tensor, grad_check, no_grad

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(a)).data, a)


def test_matmul_hand_product():
    out = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])) @ Tensor(np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_backward_rules():
    rng = np.random.default_rng(0)
    A, B = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    G = rng.normal(size=(3, 2))
    T.tsum((A @ B) * Tensor(G)).backward()
    np.testing.assert_allclose(A.grad, G @ B.data.T)
    np.testing.assert_allclose(B.grad, A.data.T @ G)


# -- softmax -------------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3)


def test_softmax_closed_form():
    np.testing.assert_allclose(T.softmax(Tensor(np.array([0.0, np.log(2.0)]))).data, [1 / 3, 2 / 3], rtol=1e-12)


def test_softmax_large_inputs_do_not_overflow():
    np.testing.assert_array_equal(T.softmax(Tensor(np.array([1000.0, 1000.0]))).data, [0.5, 0.5])


def test_softmax_bad_axis():
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.zeros((2, 2))), axis=2)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_and_positive(x):
    out = T.softmax(Tensor(x), axis=-1).data
    assert np.all(out > 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


# -- smooth_l1 -------------------------------------------------------------------


@pytest.mark.parametrize("diff, expected", [(0.5, 0.125), (1.0, 0.5), (3.0, 2.5), (-3.0, 2.5)])
def test_smooth_l1_probe_points(diff, expected):
    assert T.smooth_l1(Tensor(np.array([diff])), np.array([0.0])).item() == expected


def test_smooth_l1_branches_meet_at_one():
    inside = 0.5 * 1.0**2
    outside = abs(1.0) - 0.5
    assert inside == outside == T.smooth_l1(Tensor(np.array([1.0])), np.zeros(1)).item()


def test_smooth_l1_is_a_mean():
    pred = Tensor(np.array([0.5, 3.0]))
    assert T.smooth_l1(pred, np.zeros(2)).item() == pytest.approx((0.125 + 2.5) / 2, abs=1e-15)


def test_smooth_l1_shape_mismatch():
    with pytest.raises(ValueError):
        T.smooth_l1(Tensor(np.zeros(3)), np.zeros(2))


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_smooth_l1_self_is_zero(x):
    assert T.smooth_l1(Tensor(x), x.copy()).item() == 0.0


def test_smooth_l1_gradcheck_away_from_kink():
    rng = np.random.default_rng(3)
    target = rng.normal(size=8)
    d = rng.uniform(0.1, 0.8, size=8) * rng.choice([-1, 1], size=8)
    d[:3] = [1.7, -2.2, 1.4]
    x = leaf(target + d)
    assert grad_check(lambda t: T.smooth_l1(t, target), x, eps=1e-5) < 1e-4


# -- avg_pool_grid ----------------------------------------------------------------


def test_avg_pool_global_mean():
    out = T.avg_pool_grid(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), 1)
    np.testing.assert_array_equal(out.data, [[[2.5]]])


def test_avg_pool_quadrants_of_ramp():
    ramp = np.arange(1.0, 17.0).reshape(1, 4, 4)
    np.testing.assert_array_equal(T.avg_pool_grid(Tensor(ramp), 2).data, [[[3.5, 5.5], [11.5, 13.5]]])


def test_avg_pool_identity_when_grid_matches():
    x = np.random.default_rng(0).normal(size=(2, 3, 3))
    np.testing.assert_array_equal(T.avg_pool_grid(Tensor(x), 3).data, x)


def test_avg_pool_grid_too_large():
    with pytest.raises(ValueError):
        T.avg_pool_grid(Tensor(np.zeros((1, 2, 2))), 4)


def test_avg_pool_uneven_tiling_cells_differ_by_at_most_one():
    P = T._grid_matrix(7, 3, np.float64)
    sizes = (P > 0).sum(axis=1)
    assert sizes.sum() == 7 and sizes.max() - sizes.min() <= 1
    assert np.all((P > 0).sum(axis=0) == 1)


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 7), st.integers(1, 7)), elements=finite))
def test_avg_pool_k1_is_plane_mean(x):
    out = T.avg_pool_grid(Tensor(x), 1).data[:, 0, 0]
    np.testing.assert_allclose(out, x.mean(axis=(1, 2)), atol=1e-12)


# -- layer_norm -------------------------------------------------------------------


def test_layer_norm_constant_row():
    out = T.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_two_values():
    out = T.layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    # variance 1, so the scale is 1/sqrt(1 + eps)
    expected = np.array([[1.0, -1.0]]) / np.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_layer_norm_zero_gain_gives_bias():
    b = np.array([0.3, -1.0, 2.0])
    out = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))), Tensor(np.zeros(3)), Tensor(b))
    np.testing.assert_array_equal(out.data, np.broadcast_to(b, (4, 3)))


# -- backward semantics --------------------------------------------------------------


def test_square_gradient():
    x = leaf(3.0)
    (x * x).backward()
    assert x.grad == 6.0


def test_frozen_leaf_gets_no_gradient():
    x = leaf([1.0, 2.0])
    w = Tensor(np.array([3.0, 4.0]))
    T.tsum(x * w + w * w).backward()
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_gradients_from_multiple_paths_are_summed():
    x = leaf(2.0)
    y = x * 3.0 + T.exp(x) + x * x
    y.backward()
    assert x.grad == pytest.approx(3.0 + np.exp(2.0) + 4.0, rel=1e-14)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([0.0])))


@st.composite
def graphs(draw):
    """Random small expression DAG with frozen and trainable leaves."""
    n_leaves = draw(st.integers(2, 4))
    frozen = draw(st.lists(st.booleans(), min_size=n_leaves, max_size=n_leaves))
    ops = draw(st.lists(st.tuples(st.sampled_from(["add", "mul", "exp"]), st.integers(0, 99), st.integers(0, 99)), min_size=1, max_size=6))
    return frozen, ops


@given(graphs())
def test_frozen_leaves_never_accumulate(graph):
    frozen, ops = graph
    rng = np.random.default_rng(len(ops))
    leaves = [Tensor(rng.normal(size=3) * 0.3, requires_grad=not f) for f in frozen]
    nodes = list(leaves)
    for op, i, j in ops:
        a, b = nodes[i % len(nodes)], nodes[j % len(nodes)]
        nodes.append({"add": T.add, "mul": T.mul}[op](a, b) if op != "exp" else T.exp(a))
    loss = T.tsum(nodes[-1])
    loss.backward()
    for lf, f in zip(leaves, frozen):
        if f:
            assert lf.grad is None


# -- grad_check -------------------------------------------------------------------


def test_grad_check_exact_for_linear():
    w = np.arange(1.0, 7.0)
    assert grad_check(lambda t: T.tsum(t * Tensor(w)), leaf(np.zeros(6))) < 1e-10


def test_grad_check_detects_wrong_rule():
    def bad_square(x):
        return T._make(x.data**2, (x,), lambda g: (g * x.data,))  # should be 2x

    assert grad_check(lambda t: T.tsum(bad_square(t)), leaf([1.0, 2.0])) > 0.1


UNARY = {
    "exp": T.exp,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
    "gelu": T.gelu,
    "log": lambda t: T.log(t * t + 1.0),
    "softmax": lambda t: T.softmax(t, axis=-1),
    "log_softmax": lambda t: T.log_softmax(t, axis=0),
    "layer_norm": lambda t: T.layer_norm(t),
    "l2_normalize": T.l2_normalize,
    "resize": lambda t: T.resize_bilinear(t, 5, 3),
    "pool2": lambda t: T.avg_pool_grid(t, 2),
}


@settings(max_examples=100)
@given(st.sampled_from(sorted(UNARY)), st.integers(0, 2**32 - 1))
def test_ops_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(3, 4)))
    w = rng.normal(size=UNARY[name](x).shape)
    assert grad_check(lambda t: T.tsum(UNARY[name](t) * Tensor(w)), x) < 1e-4


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 3, 3, 4))
    for n in range(2):
        for i in range(3):
            for j in range(3):
                patch = xp[n, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]
                ref[n, i, j] = np.tensordot(patch, w, axes=([0, 1, 2], [0, 1, 2])) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_resize_bilinear_preserves_constants():
    out = T.resize_bilinear(Tensor(np.full((2, 3, 4), 1.5)), 12, 16).data
    np.testing.assert_allclose(out, 1.5, rtol=1e-12)


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 8, 8, 3))
    w = rng.normal(size=(3, 3, 3, 5))
    a = T.gelu(T.conv2d(Tensor(x), Tensor(w), padding=1)).data
    b = T.gelu(T.conv2d(Tensor(x.copy()), Tensor(w.copy()), padding=1)).data
    assert a.tobytes() == b.tobytes()
