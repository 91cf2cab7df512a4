import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from segkit import autodiff as ad
from segkit.errors import GraphError, ShapeError
from segkit.volume import Volume3D, resize_trilinear

from gradcases import op_cases
from oracles import adam_scalar, conv3d_naive, maxpool_naive, resize_naive

T = ad.Tensor


# gradient checks ------------------------------------------------------------------

@pytest.mark.parametrize("name,f,x0", op_cases(), ids=[c[0] for c in op_cases()])
def test_op_gradients(name, f, x0):
    assert ad.finite_diff_check(f, x0) < 1e-4


def test_quadratic_gradient_check():
    x0 = np.random.default_rng(0).normal(size=(3, 4))
    err = ad.finite_diff_check(lambda x: ad.tsum(ad.mul(x, x)), x0, h=1e-4)
    assert err < 1e-8


def _double(x):
    """sum(x^2) with a backward rule that is off by a factor of two."""
    def bw(g):
        return (g * 4 * x.data,)
    return ad._node(np.asarray((x.data ** 2).sum()), (x,), bw, "broken")


def test_checker_catches_corrupted_backward():
    x0 = np.random.default_rng(1).normal(size=5)
    assert ad.finite_diff_check(_double, x0) > 1e-2


def test_backward_basics():
    x = T(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, 1.0)
    x.zero_grad()
    ad.tsum(ad.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_and_is_deterministic():
    x = T(np.random.default_rng(2).normal(size=(1, 2, 4, 4, 4)), requires_grad=True)
    w = T(np.random.default_rng(3).normal(size=(3, 2, 3, 3, 3)), requires_grad=True)

    def run():
        return ad.tsum(ad.relu(ad.conv3d(x, w, None, 1, 1)))
    run().backward()
    first = w.grad.copy()
    run().backward()
    np.testing.assert_allclose(w.grad, 2 * first)
    w.zero_grad()
    run().backward()
    np.testing.assert_array_equal(w.grad, first)


def test_backward_rejects_non_scalar():
    x = T(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        ad.backward(ad.relu(x))


def test_shared_subgraph_gradient():
    x = T(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = ad.mul(x, x)
    ad.tsum(ad.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


# conv3d ------------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 1, 3, 4, 5)).astype(np.float32)
    out = ad.conv3d(T(x), T(np.ones((1, 1, 1, 1, 1), np.float32)), T(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_counting():
    out = ad.conv3d(T(np.ones((1, 1, 3, 3, 3))), T(np.ones((1, 1, 3, 3, 3))))
    assert out.shape == (1, 1, 1, 1, 1) and out.data.item() == 27


def random_conv_shapes(n=20, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        spatial = tuple(int(rng.integers(max(1, k - 2 * pad), 7)) for _ in range(3))
        out.append((int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                    spatial, k, stride, pad))
    return out


@pytest.mark.parametrize("n,cin,cout,spatial,k,stride,pad", random_conv_shapes())
def test_conv_matches_naive(n, cin, cout, spatial, k, stride, pad):
    rng = np.random.default_rng(hash((n, cin, cout, spatial, k, stride, pad)) % 2 ** 32)
    x = rng.normal(size=(n, cin) + spatial).astype(np.float32)
    w = rng.normal(size=(cout, cin, k, k, k)).astype(np.float32)
    b = rng.normal(size=cout).astype(np.float32)
    out = ad.conv3d(T(x), T(w), T(b), stride, pad).data
    np.testing.assert_allclose(out, conv3d_naive(x, w, b, stride, pad), atol=1e-5, rtol=1e-5)


def test_conv_output_size():
    assert ad.conv_output_size(7, 3, 2, 1) == 4
    assert ad.conv_output_size(8, 2, 2, 0) == 4


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        ad.conv3d(T(np.ones((1, 2, 4, 4, 4))), T(np.ones((1, 3, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ad.conv3d(T(np.ones((1, 1, 2, 2, 2))), T(np.ones((1, 1, 3, 3, 3))))


def test_conv_linearity():
    rng = np.random.default_rng(5)
    x1, x2 = rng.normal(size=(2, 1, 2, 5, 5, 5))
    w = T(rng.normal(size=(3, 2, 3, 3, 3)))
    lhs = ad.conv3d(T(2.0 * x1 - 0.5 * x2), w, None, 1, 1).data
    rhs = 2.0 * ad.conv3d(T(x1), w, None, 1, 1).data - 0.5 * ad.conv3d(T(x2), w, None, 1, 1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


# maxpool -----------------------------------------------------------------------

def test_maxpool_constant_ties_go_first():
    x = T(np.full((1, 1, 4, 4, 4), 2.0), requires_grad=True)
    out = ad.maxpool3d(x)
    np.testing.assert_array_equal(out.data, 2.0)
    ad.tsum(out).backward()
    expected = np.zeros((4, 4, 4))
    expected[::2, ::2, ::2] = 1
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_maxpool_single_peak():
    x = np.zeros((1, 1, 2, 2, 2))
    x[0, 0, 1, 0, 1] = 5.0
    assert ad.maxpool3d(T(x)).data.item() == 5.0


@pytest.mark.parametrize("seed", range(20))
def test_maxpool_matches_naive(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3))) + tuple(
        int(rng.integers(2, 7)) for _ in range(3))
    x = rng.integers(0, 4, size=shape).astype(np.float64)  # plenty of ties
    t = T(x, requires_grad=True)
    out = ad.maxpool3d(t)
    ad.tsum(out).backward()
    ref, ref_grad = maxpool_naive(x)
    np.testing.assert_allclose(out.data, ref, atol=1e-5)
    np.testing.assert_array_equal(t.grad, ref_grad)


# trilinear ---------------------------------------------------------------------

def test_upsample_constant_and_ramp():
    out = ad.upsample_trilinear(T(np.full((1, 2, 3, 3, 3), 1.5, np.float32)))
    assert out.shape == (1, 2, 6, 6, 6)
    np.testing.assert_allclose(out.data, 1.5, atol=1e-6)
    ramp = np.arange(4, dtype=np.float32)[None, None, None, None, :] * np.ones((1, 1, 2, 2, 4))
    up = ad.upsample_trilinear(T(ramp)).data
    np.testing.assert_allclose(up[0, 0, 0, 0], np.linspace(0, 3, 8), atol=1e-5)


@pytest.mark.parametrize("seed", range(20))
def test_upsample_matches_naive_and_resize(seed):
    rng = np.random.default_rng(seed)
    src = tuple(int(rng.integers(1, 5)) for _ in range(3))
    dst = tuple(int(rng.integers(1, 8)) for _ in range(3))
    x = rng.normal(size=src).astype(np.float32)
    out = ad.upsample_trilinear(T(x[None, None]), size=dst).data[0, 0]
    np.testing.assert_allclose(out, resize_naive(x, dst), atol=1e-5)
    np.testing.assert_allclose(out, resize_trilinear(Volume3D(x), dst).data, atol=1e-6)


def test_upsample_gradient_float32():
    x0 = np.random.default_rng(3).normal(size=(1, 1, 3, 3, 3)).astype(np.float32)
    w = np.random.default_rng(4).normal(size=(1, 1, 6, 6, 6)).astype(np.float32)
    x = T(x0, requires_grad=True)
    ad.tsum(ad.mul(ad.upsample_trilinear(x), T(w))).backward()
    assert x.grad.dtype == np.float32
    h = 1e-2
    num = np.zeros(27)
    flat = x0.reshape(-1)
    for i in range(27):
        vals = []
        for sgn in (1, -1):
            xp = flat.copy()
            xp[i] += sgn * h
            up = ad.upsample_trilinear(T(xp.reshape(x0.shape))).data  # forward stays 32-bit
            vals.append((up.astype(np.float64) * w).sum())
        hi, lo = flat[i] + np.float32(h), flat[i] - np.float32(h)
        num[i] = (vals[0] - vals[1]) / (float(hi) - float(lo))
    rel = np.abs(x.grad.ravel() - num) / np.maximum(np.abs(num), 1e-3)
    assert rel.max() < 1e-3


# elementwise -------------------------------------------------------------------

def test_elementwise_points():
    assert ad.sigmoid(T(np.array(0.0))).data == 0.5
    assert ad.relu(T(np.array(-1.0))).data == 0.0
    assert np.isfinite(ad.sigmoid(T(np.array([-1000.0, 1000.0]))).data).all()


def test_mul_broadcast_identity_and_zero():
    x = np.random.default_rng(0).normal(size=(2, 3, 2, 2, 2))
    np.testing.assert_array_equal(ad.mul_broadcast(T(x), T(np.ones((2, 1, 2, 2, 2)))).data, x)
    assert not ad.mul_broadcast(T(x), T(np.zeros((2, 1, 2, 2, 2)))).data.any()
    with pytest.raises(ShapeError):
        ad.mul_broadcast(T(x), T(np.ones((2, 2, 2, 2, 2))))
    with pytest.raises(ShapeError):
        ad.mul_broadcast(T(x), T(np.ones((2, 1, 2, 2, 3))))


def test_add_shape_error():
    with pytest.raises(ShapeError):
        ad.add(T(np.ones((2, 3))), T(np.ones((4, 3))))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (1, 4, 2, 2, 2), elements=st.floats(-30, 30)),
       hnp.arrays(np.float64, (1, 1, 2, 2, 2), elements=st.floats(-30, 30)))
def test_softmax_sums_and_shift_invariance(x, shift):
    s = ad.softmax_channels(T(x)).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ad.softmax_channels(T(x + shift)).data, s, atol=1e-5)


def test_concat_channels():
    a, b = np.ones((1, 2, 2, 2, 2)), np.zeros((1, 3, 2, 2, 2))
    out = ad.concat_channels(T(a), T(b)).data
    assert out.shape == (1, 5, 2, 2, 2) and out[:, :2].all() and not out[:, 2:].any()


# dice --------------------------------------------------------------------------

def test_dice_perfect_and_disjoint():
    t = np.zeros((1, 2, 4, 4, 4))
    t[0, 1, :2] = 1
    t[0, 0] = 1 - t[0, 1]
    assert ad.dice_loss(T(t), t).item() <= 1e-6
    assert ad.dice_loss(T(1 - t), t).item() >= 1 - 1e-5


def test_dice_scalar_case():
    loss = ad.dice_loss(T(np.array([[[0.5, 0.5]]])), np.array([[[1.0, 0.0]]]))
    assert abs(loss.item() - (1 - 1 / 1.5)) < 1e-5
    assert abs(loss.item() - 0.33333) < 1e-5


def test_dice_empty_class_counts_as_perfect():
    p = np.zeros((1, 2, 2, 2, 2))
    p[:, 0] = 1
    assert ad.dice_loss(T(p), p).item() <= 1e-6


def test_dice_shape_error():
    with pytest.raises(ShapeError):
        ad.dice_loss(T(np.ones((1, 2, 2))), np.ones((1, 2, 3)))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (2, 3, 2, 2, 2), elements=st.floats(0, 1)),
       hnp.arrays(np.int64, (2, 2, 2, 2), elements=st.integers(0, 2)))
def test_dice_bounds(p, labels):
    t = np.moveaxis(np.eye(3)[labels], -1, 1)
    loss = ad.dice_loss(T(p), t).item()
    assert -1e-9 <= loss <= 1 + 1e-5


def test_dice_independent_formula():
    rng = np.random.default_rng(7)
    p = rng.random((2, 3, 3, 3, 3))
    t = np.moveaxis(np.eye(3)[rng.integers(0, 3, size=(2, 3, 3, 3))], -1, 1)
    per = [(2 * (p[:, c] * t[:, c]).sum() + 1e-6) / ((p[:, c] ** 2).sum() + (t[:, c] ** 2).sum()
                                                    + 1e-6) for c in range(3)]
    assert ad.dice_loss(T(p), t).item() == pytest.approx(1 - (per[1] + per[2]) / 2, abs=1e-12)
    assert ad.dice_loss(T(p), t, foreground_only=False).item() == pytest.approx(
        1 - sum(per) / 3, abs=1e-12)


# adam --------------------------------------------------------------------------

def test_adam_zero_gradient():
    p = T(np.array([1.0, -2.0]), requires_grad=True)
    st_ = ad.AdamState.for_params([p])
    ad.adam_step([p], [np.zeros(2)], st_, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st_.t == 1


def test_adam_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-3])
    p = T(np.zeros(3), requires_grad=True)
    ad.adam_step([p], [g], ad.AdamState.for_params([p]), lr=1e-4)
    expected = -1e-4 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    np.testing.assert_allclose(np.abs(p.data), 1e-4, rtol=1e-4)


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(8)
    p0 = rng.normal(size=4)
    grads = rng.normal(size=(2, 4))
    p = T(p0.copy(), requires_grad=True)
    s = ad.AdamState.for_params([p])
    for g in grads:
        ad.adam_step([p], [g], s, lr=1e-3)
    ref = [adam_scalar(p0[i], grads[:, i], 1e-3) for i in range(4)]
    np.testing.assert_allclose(p.data, ref, atol=1e-7)
    assert s.t == 2
