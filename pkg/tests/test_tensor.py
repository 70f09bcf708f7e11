"""Tensor substrate: op semantics, stability, and gradient correctness."""

import numpy as np
import pytest

from fovea import tensor as T


def rnd(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_case():
    # [[1,2],[3,4]] x [[0],[1]] evaluated by hand: rows dot column -> [[2],[4]]
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.Tensor([[0.0], [1.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[2.0], [4.0]])


def test_matmul_zero():
    rng = np.random.default_rng(0)
    a = rnd(rng, 4, 5)
    out = T.matmul(T.Tensor(a), T.Tensor(np.zeros((5, 3))))
    np.testing.assert_array_equal(out.data, np.zeros((4, 3)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


def test_matmul_identity_and_distributivity_random():
    rng = np.random.default_rng(7)
    for _ in range(25):
        m, k, n = rng.integers(1, 8, size=3)
        a = rnd(rng, m, k)
        b = rnd(rng, k, n)
        c = rnd(rng, k, n)
        np.testing.assert_allclose(
            T.matmul(T.Tensor(a), T.Tensor(np.eye(k))).data, a, atol=1e-12, rtol=0
        )
        left = T.matmul(T.Tensor(a), T.Tensor(b + c)).data
        right = T.matmul(T.Tensor(a), T.Tensor(b)).data + T.matmul(T.Tensor(a), T.Tensor(c)).data
        np.testing.assert_allclose(left, right, atol=1e-12, rtol=0)


# ---------------------------------------------------------------------------
# softmax_with_bias


def test_softmax_symmetry():
    out = T.softmax_with_bias(T.Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_softmax_bias_equals_duplicated_key():
    # softmax([0, 0] + [0, ln 3]) must equal softmax over [0,0,0,0] with the
    # last key appearing 3 times: [1/4, 3/4].
    out = T.softmax_with_bias(T.Tensor([0.0, 0.0]), np.array([0.0, np.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)


def test_softmax_large_logits_no_overflow():
    out = T.softmax_with_bias(T.Tensor([1000.0, 1000.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)
    assert np.isfinite(out.data).all()


def test_softmax_neg_inf_bias_excludes_column():
    logits = T.Tensor([1.0, 2.0, 3.0])
    bias = np.array([0.0, 0.0, -np.inf])
    out = T.softmax_with_bias(logits, bias)
    assert out.data[2] == 0.0
    ref = T.softmax_with_bias(T.Tensor([1.0, 2.0])).data
    np.testing.assert_allclose(out.data[:2], ref, atol=1e-15)
    assert np.isfinite(out.data).all()


def test_softmax_rows_sum_to_one_random():
    rng = np.random.default_rng(3)
    for _ in range(50):
        rows, cols = rng.integers(1, 9, size=2)
        logits = rng.uniform(-50.0, 50.0, size=(rows, cols))
        out = T.softmax_with_bias(T.Tensor(logits)).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(rows), atol=1e-12, rtol=0)
        assert np.isfinite(out).all()


# ---------------------------------------------------------------------------
# layer_norm


def test_layer_norm_constant_row():
    x = T.Tensor(np.full((4,), 3.7))
    out = T.layer_norm(x, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)), eps=1e-6)
    np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-12)


def test_layer_norm_two_point_row():
    # Row [-1, 1]: mean 0, population variance 1, so the normalized row is
    # itself as eps -> 0.
    x = T.Tensor([-1.0, 1.0])
    out = T.layer_norm(x, T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), eps=1e-14)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-7)


def test_layer_norm_zero_gain_yields_shift():
    rng = np.random.default_rng(1)
    x = T.Tensor(rnd(rng, 3, 5))
    shift = rnd(rng, 5)
    out = T.layer_norm(x, T.Tensor(np.zeros(5)), T.Tensor(shift), eps=1e-6)
    np.testing.assert_allclose(out.data, np.broadcast_to(shift, (3, 5)), atol=1e-15)


def test_layer_norm_requires_positive_eps():
    with pytest.raises(ValueError):
        T.layer_norm(T.Tensor([1.0, 2.0]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), eps=0.0)


# ---------------------------------------------------------------------------
# bilinear_sample


def test_bilinear_exact_at_grid_nodes():
    rng = np.random.default_rng(5)
    field = rnd(rng, 3, 4, 6)
    pts = []
    for i in range(4):
        for j in range(6):
            pts.append((j / 5.0, i / 3.0))
    out = T.bilinear_sample(field, np.array(pts))
    expected = field.reshape(3, -1).T
    np.testing.assert_allclose(out, expected, atol=1e-14, rtol=0)


def test_bilinear_midpoint_average():
    field = np.array([[[2.0, 4.0]]])  # 1 channel, 1x2
    out = T.bilinear_sample(field, np.array([[0.5, 0.0]]))
    np.testing.assert_allclose(out, [[3.0]], atol=1e-15)


def test_bilinear_quarter_point_closed_form():
    # Independent scalar bilinear formula at pixel coords (x, y) = (0.25, 0.25)
    # on field [[0,1],[2,3]]:
    #   f = f00*(1-x)(1-y) + f01*x(1-y) + f10*(1-x)y + f11*xy
    #     = 0*0.5625 + 1*0.1875 + 2*0.1875 + 3*0.0625 = 0.75
    field = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    x = y = 0.25
    f00, f01, f10, f11 = 0.0, 1.0, 2.0, 3.0
    expected = f00 * (1 - x) * (1 - y) + f01 * x * (1 - y) + f10 * (1 - x) * y + f11 * x * y
    out = T.bilinear_sample(field, np.array([[0.25, 0.25]]))
    np.testing.assert_allclose(out, [[expected]], atol=1e-15)
    assert expected == 0.75


def test_bilinear_empty_points():
    out = T.bilinear_sample(np.zeros((5, 2, 2)), np.zeros((0, 2)))
    assert out.shape == (0, 5)


def test_bilinear_clamps_out_of_range():
    field = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = T.bilinear_sample(field, np.array([[-0.5, 2.0]]))
    np.testing.assert_allclose(out, [[3.0]], atol=1e-15)


# ---------------------------------------------------------------------------
# grad_check


def test_grad_check_sum_of_squares_near_exact():
    rng = np.random.default_rng(11)
    p = T.ParamLeaf("w", rnd(rng, 7))

    def loss():
        return T.tsum(T.mul(p.tensor, p.tensor))

    assert T.grad_check(loss, [p], eps=1e-4) < 1e-8


def test_grad_check_empty_param_set():
    def loss():
        return T.Tensor(1.5)

    assert T.grad_check(loss, [], eps=1e-5) == 0.0


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.Tensor(0.0), [], eps=1.0)


def test_grad_check_reports_nonfinite_parameter():
    # Finite at the base point, but the minus-eps probe crosses into log(<0).
    p = T.ParamLeaf("bad", np.array([5e-5]))

    def loss():
        return T.log(p.tensor).reshape(())

    with pytest.raises(T.GradCheckError, match="bad"):
        T.grad_check(loss, [p], eps=1e-4)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_composite_ops(seed):
    # Composition touching every differentiable op at toy sizes.
    rng = np.random.default_rng(seed)
    w1 = T.ParamLeaf("w1", rnd(rng, 6, 5))
    w2 = T.ParamLeaf("w2", rnd(rng, 5, 4))
    gain = T.ParamLeaf("gain", 1.0 + 0.1 * rnd(rng, 5))
    shift = T.ParamLeaf("shift", 0.1 * rnd(rng, 5))
    vec = T.ParamLeaf("vec", rnd(rng, 4))
    x = T.Tensor(rnd(rng, 3, 6))
    labels = np.array([0, 2, 1])

    def loss():
        h = T.matmul(x, w1.tensor)
        h = T.layer_norm(h, gain.tensor, shift.tensor, eps=1e-6)
        h = T.gelu(h)
        h = T.matmul(h, w2.tensor)
        h = T.add(h, vec.tensor)
        h = T.mul(h, T.sigmoid(h))
        h = T.concat([h, T.take_rows(h, [2, 0, 1])], axis=1)
        h = T.l2_normalize(h)
        att = T.softmax_with_bias(h, np.zeros(8))
        first = T.select(T.transpose(att), 0)
        stacked = T.stack([first, first])
        reg = T.tmean(T.mul(stacked, stacked))
        ce = T.cross_entropy_mean(T.take_rows(att, [0, 1, 2]), labels)
        return T.add(T.mul(reg, 0.5), ce).reshape(())

    assert T.grad_check(loss, [w1, w2, gain, shift, vec], eps=1e-5) < 1e-6


def test_param_leaf_reset():
    p = T.ParamLeaf("p", np.ones((2, 2)))
    loss = T.tsum(T.mul(p.tensor, p.tensor))
    loss.backward()
    assert np.any(p.gradient != 0)
    p.zero_grad()
    np.testing.assert_array_equal(p.gradient, np.zeros((2, 2)))
    assert p.gradient.shape == p.value.shape


def test_no_grad_skips_graph():
    p = T.ParamLeaf("p", np.ones(3))
    with T.no_grad():
        out = T.mul(p.tensor, 2.0)
    assert not out.requires_grad


def test_repeat_rows_gradient_sums():
    p = T.ParamLeaf("m", np.array([1.0, 2.0]))
    out = T.tsum(T.repeat_rows(p.tensor, 4))
    out.backward()
    np.testing.assert_array_equal(p.gradient, [4.0, 4.0])
