import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wmfp import autodiff as ad
from wmfp.autodiff import NonFiniteError, ShapeError, Tensor, backward, forward_op, grad_check
from wmfp.autodiff.gradcheck import op_suite


def test_conv2d_window_sum():
    x = Tensor(np.ones((1, 1, 3, 3), np.float32))
    w = Tensor(np.ones((1, 1, 2, 2), np.float32))
    y = forward_op("conv2d", [x, w], stride=1, padding=0)
    assert y.shape == (1, 1, 2, 2)
    assert np.all(y.data == 4.0)


def test_sigmoid_zero():
    assert float(ad.sigmoid(Tensor(np.zeros(1))).data[0]) == 0.5


def test_matmul_triple_loop_oracle(rng):
    a = rng.standard_normal((3, 4)).astype(np.float32)
    b = rng.standard_normal((4, 2)).astype(np.float32)
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += float(a[i, k]) * float(b[k, j])
    got = ad.matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(got - expected)) < 1e-6


def test_conv2d_direct_oracle(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    y = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for b in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    ref[b, o, i, j] = np.sum(xp[b, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    np.testing.assert_allclose(y, ref, rtol=1e-10, atol=1e-10)


def test_conv2d_dirac_kernel_is_identity(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    y = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert np.array_equal(y, x)


def test_transpose_conv_is_adjoint(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    g = rng.standard_normal((2, 4, 3, 3))
    lhs = np.sum(ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data * g)
    rhs = np.sum(x * ad.transpose_conv2d(Tensor(g), Tensor(w), stride=2, padding=1).data)
    assert abs(lhs - rhs) < 1e-8


def test_per_sample_kernel_matches_loop(rng):
    x = rng.standard_normal((3, 2, 4, 4))
    w = rng.standard_normal((3, 5, 2, 3, 3))
    y = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
    for b in range(3):
        ref = ad.conv2d(Tensor(x[b:b + 1]), Tensor(w[b]), padding=1).data
        np.testing.assert_allclose(y[b:b + 1], ref, atol=1e-12)


def test_backward_sum_and_mean_square():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward(ad.sum(x))
    assert np.array_equal(x.grad, [1, 1, 1])
    backward(ad.mean(ad.square(x)))
    np.testing.assert_allclose(x.grad, [2 / 3, 4 / 3, 2.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ad.mul(x, 2.0))


def test_unreached_leaf_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    backward(ad.sum(x), leaves=[x, y])
    assert np.array_equal(y.grad, np.zeros(2))


def test_shape_errors_name_op():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="conv2d"):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_debug_mode_flags_non_finite():
    ad.set_debug(True)
    try:
        with pytest.raises(NonFiniteError, match="input"):
            ad.add(Tensor(np.array([np.inf])), Tensor(np.ones(1)))
        with pytest.raises(NonFiniteError, match="finite inputs"), np.errstate(over="ignore"):
            ad.mul(Tensor(np.array([1e30], np.float32)), Tensor(np.array([1e30], np.float32)))
    finally:
        ad.set_debug(False)


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


def test_tape_is_topological(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    h = ad.sigmoid(ad.matmul(x, Tensor(rng.standard_normal((3, 3)))))
    loss = ad.sum(ad.mul(h, h))
    tape = backward(loss)
    seen = set()
    for t in tape.order:
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad:
                    assert id(parent) in seen
        seen.add(id(t))


# ---- gradient checks

def test_grad_check_sum_exact():
    rep = grad_check(lambda x: ad.sum(x), {"x": np.arange(5.0)})
    assert rep.max_rel_error == 0.0
    rep = grad_check(lambda x: ad.sum(x), {"x": np.random.default_rng(0).standard_normal(7)})
    assert rep.max_rel_error < 1e-10


def test_grad_check_sigmoid_matmul(rng):
    def f(a, b):
        return ad.sum(ad.sigmoid(ad.matmul(a, b)))

    rep = grad_check(f, {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))})
    assert rep.passed and rep.max_rel_error < 1e-3


def test_grad_check_clamp_kink_reported_not_failed():
    rep = grad_check(lambda x: ad.sum(ad.clamp(x, 0.0, 1.0)), {"x": np.array([1.5, 0.5, -0.2])})
    assert rep.passed
    assert rep.leaves["x"].status == "nondifferentiable point"


def test_grad_check_two_layer_bce(rng):
    from wmfp.losses import bce_from_logits

    bits = (rng.random((4, 3)) < 0.5).astype(np.float64)

    def f(w1, w2, x):
        h = ad.leaky_relu(ad.dense(x, w1), 0.2)
        return bce_from_logits(ad.dense(h, w2), bits)

    rep = grad_check(f, {"w1": rng.standard_normal((5, 6)), "w2": rng.standard_normal((3, 5)),
                         "x": rng.standard_normal((4, 6))})
    assert rep.passed and rep.max_rel_error < 1e-3


def test_every_op_passes_on_three_shapes():
    rows = op_suite(seed=0)
    kinds = {r["kind"] for r in rows}
    assert kinds == set(ad.OP_KINDS)
    for kind in kinds:
        assert sum(r["kind"] == kind for r in rows) >= 3
    assert all(r["status"] == "ok" and r["max_rel_error"] < 1e-3 for r in rows)


def test_extra_ops_grad_check(rng):
    x = rng.uniform(0.2, 0.8, (2, 3, 4))
    for f in (lambda x: ad.sum(ad.mul(ad.softplus(x), 1.3)),
              lambda x: ad.sum(ad.mul(ad.permute(x, (2, 0, 1)), Tensor(np.arange(24.0).reshape(4, 2, 3))))):
        assert grad_check(f, {"x": x}).max_rel_error < 1e-3


def test_round_ste_passes_gradient_through():
    x = Tensor(np.array([0.2, 1.7]), requires_grad=True)
    backward(ad.sum(ad.round_ste(x)))
    assert np.array_equal(x.grad, [1.0, 1.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 6), st.integers(1, 2), st.integers(0, 1))
def test_conv_shapes_property(b, c, side, stride, padding):
    x = Tensor(np.ones((b, c, side, side), np.float32))
    w = Tensor(np.ones((2, c, 3, 3), np.float32))
    y = ad.conv2d(x, w, stride=stride, padding=padding)
    expect = (side + 2 * padding - 3) // stride + 1
    assert y.shape == (b, 2, expect, expect)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_sum_gradient_is_ones_property(values):
    x = Tensor(np.array(values), requires_grad=True)
    backward(ad.sum(x))
    assert np.array_equal(x.grad, np.ones(len(values)))
