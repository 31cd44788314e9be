import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcc import autodiff as ad
from dcc import kernels
from dcc.autodiff import Var

from oracles import conv2d_loops, fd_battery, fd_grad, rel_err


def test_relu_definition():
    assert ad.relu(Var([-1.0, 0.0, 2.0])).value.tolist() == [0.0, 0.0, 2.0]


def test_add_zero_is_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(ad.add(Var(x), 0.0).value, x)


def test_square_derivative():
    x = Var(np.array(3.0), requires_grad=True)
    (g,) = ad.grad(ad.square(x), [x])
    assert g == pytest.approx(6.0)


def test_matmul_small_cases():
    a = Var(np.eye(2))
    b = Var([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).value, b.value)
    assert ad.matmul(Var([[1.0, 2.0]]), Var([[3.0], [4.0]])).value.tolist() == [[11.0]]


def test_matmul_backward_formula():
    rng = np.random.default_rng(1)
    a = Var(rng.normal(size=(4, 5)), requires_grad=True)
    b = Var(rng.normal(size=(5, 3)), requires_grad=True)
    G = rng.normal(size=(4, 3))
    ga, gb = ad.grad(ad.sum(ad.mul(ad.matmul(a, b), Var(G))), [a, b])
    np.testing.assert_allclose(ga, G @ b.value.T)
    np.testing.assert_allclose(gb, a.value.T @ G)


def test_conv_scalar_kernel():
    out = ad.conv2d(Var(np.ones((1, 1, 3, 3))), Var(np.full((1, 1, 1, 1), 2.0)), padding=0)
    np.testing.assert_array_equal(out.value, np.full((1, 1, 3, 3), 2.0))


def test_conv_impulse_gives_flipped_kernel():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    out = ad.conv2d(Var(x), Var(k), padding=1).value
    np.testing.assert_array_equal(out, conv2d_loops(x, k, 1))
    np.testing.assert_array_equal(out[0, 0, 1:4, 1:4], k[0, 0, ::-1, ::-1])


@pytest.mark.parametrize("pad", [0, 1, 2])
def test_conv_matches_loops(pad):
    rng = np.random.default_rng(pad)
    x, w = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(ad.conv2d(Var(x), Var(w), pad).value, conv2d_loops(x, w, pad), atol=1e-12)


def test_avgpool_cases():
    assert ad.avgpool2d(Var([[[[1.0, 2.0], [3.0, 4.0]]]]), 2).value.item() == 2.5
    np.testing.assert_array_equal(ad.avgpool2d(Var(np.full((1, 2, 4, 4), 3.0)), 2).value, 3.0)


def test_instance_norm_standardises():
    x = Var(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    y = ad.instance_norm(x).value.ravel()
    assert abs(y.mean()) < 1e-12
    assert y.var() == pytest.approx(1.25 / (1.25 + 1e-5))
    z = ad.instance_norm(Var(np.full((2, 3, 4, 4), 7.0))).value
    np.testing.assert_array_equal(z, 0.0)


def test_loss_values():
    assert ad.cross_entropy(Var(np.zeros((3, 5))), [0, 1, 4]).item() == pytest.approx(math.log(5))
    assert ad.hinge(Var([2.0]), [1]).item() == 0.0
    assert ad.hinge(Var([0.3]), [1]).item() == pytest.approx(0.7)
    assert ad.hinge(Var([-2.0]), [-1]).item() == 0.0


def test_hinge_subgradient_zero_at_kink():
    s = Var(np.array([1.0]), requires_grad=True)
    (g,) = ad.grad(ad.hinge(s, [1]), [s])
    assert g.tolist() == [0.0]


def test_grad_examples():
    x = Var([1.0, 2.0], requires_grad=True)
    (g,) = ad.grad(ad.sum(ad.square(x)), [x])
    assert g.tolist() == [2.0, 4.0]

    x = Var([3.0], requires_grad=True)
    (g1,) = ad.grad(ad.scale(ad.sum(ad.square(x)), 0.5), [x], create_graph=True)
    outer = ad.scale(ad.sum(ad.square(g1)), 0.5)
    (g2,) = ad.grad(outer, [x])
    assert g2.tolist() == [3.0]


def test_unused_input_gets_zero_gradient():
    x = Var([1.0, 2.0], requires_grad=True)
    y = Var([5.0], requires_grad=True)
    gx, gy = ad.grad(ad.sum(x), [x, y])
    assert gy.tolist() == [0.0]


@pytest.mark.parametrize("call", [
    lambda: ad.add(Var(np.ones((2, 3))), Var(np.ones((3, 2)))),
    lambda: ad.log(Var([-1.0, 1.0])),
    lambda: ad.sqrt(Var([-0.1])),
    lambda: ad.matmul(Var(np.ones((2, 3))), Var(np.ones((2, 3)))),
    lambda: ad.conv2d(Var(np.ones((1, 1, 2, 2))), Var(np.ones((1, 1, 5, 5))), 0),
    lambda: ad.avgpool2d(Var(np.ones((1, 1, 3, 4))), 2),
    lambda: ad.cross_entropy(Var(np.zeros((2, 3))), [0, 3]),
    lambda: ad.hinge(Var([0.0]), [0]),
])
def test_op_errors(call):
    with pytest.raises(ValueError):
        call()


def test_grad_errors():
    x = Var([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="single-element"):
        ad.grad(ad.square(x), [x])
    with pytest.raises(ValueError, match="not tracked"):
        ad.grad(ad.sum(Var([1.0])), [x])


def test_finite_difference_battery():
    results = fd_battery(seeds_per_op=4)
    assert len(results) >= 100
    bad = [r for r in results if r[2] >= 1e-3]
    assert not bad, bad


def test_double_backward_hvp():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(2, 3, 6, 6))
    w0 = rng.normal(size=(4, 3, 3, 3))
    v = rng.normal(size=w0.shape)

    def h(xv):
        X = Var(xv, requires_grad=True)
        W = Var(w0, requires_grad=True)
        y = ad.avgpool2d(ad.relu(ad.instance_norm(ad.conv2d(X, W, 1))), 2)
        (gw,) = ad.grad(ad.sum(ad.square(y)), [W], create_graph=True)
        return ad.sum(ad.mul(gw, Var(v))), X

    H, X = h(x0)
    (g2,) = ad.grad(H, [X])
    assert rel_err(g2, fd_grad(lambda z: h(z)[0].item(), x0)) < 1e-2


def test_create_graph_results_are_tracked():
    x = Var([1.0, -2.0], requires_grad=True)
    (g,) = ad.grad(ad.sum(ad.exp(x)), [x], create_graph=True)
    assert isinstance(g, Var) and g.requires_grad


def test_detach_blocks_gradient():
    x = Var([1.0, 2.0], requires_grad=True)
    y = ad.add(ad.mul(x.detach(), x.detach()), ad.scale(x, 0.0))
    (g,) = ad.grad(ad.sum(y), [x])
    assert g.tolist() == [0.0, 0.0]
    d = x.detach()
    assert not d.requires_grad
    np.testing.assert_array_equal(d.value, x.value)


def test_no_grad_context():
    x = Var([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.square(x)
    assert not y.requires_grad


def test_determinism_bitwise():
    rng = np.random.default_rng(9)
    x, w = rng.normal(size=(3, 2, 8, 8)), rng.normal(size=(4, 2, 3, 3))

    def run():
        X, W = Var(x, requires_grad=True), Var(w, requires_grad=True)
        out = ad.sum(ad.square(ad.instance_norm(ad.conv2d(X, W, 1))))
        return ad.grad(out, [X, W])

    a, b = run(), run()
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_float32_stays_float32():
    x = Var(np.ones((1, 1, 4, 4), np.float32), requires_grad=True)
    w = Var(np.ones((2, 1, 3, 3), np.float32), requires_grad=True)
    out = ad.conv2d(x, w, 1)
    assert out.dtype == np.float32
    gx, gw = ad.grad(ad.sum(out), [x, w])
    assert gx.dtype == np.float32 and gw.dtype == np.float32


def test_kernel_backends_agree():
    from dcc.kernels import _numpy

    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 2, 7, 5))
    for pad in (0, 1, 2):
        cols = _numpy.im2col(x, 3, pad)
        np.testing.assert_array_equal(kernels.im2col(x, 3, pad), cols)
        np.testing.assert_allclose(kernels.col2im(cols, 7, 5, pad), _numpy.col2im(cols, 7, 5, pad), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_sum_of_broadcast_gradient_counts_copies(a):
    x = Var(a[:, :1], requires_grad=True)
    (g,) = ad.grad(ad.sum(ad.broadcast_to(x, a.shape)), [x])
    np.testing.assert_array_equal(g, np.full((a.shape[0], 1), float(a.shape[1])))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-5, 5, allow_nan=False)))
def test_relu_gradient_is_indicator(a):
    x = Var(a, requires_grad=True)
    (g,) = ad.grad(ad.sum(ad.relu(x)), [x])
    np.testing.assert_array_equal(g, (a > 0).astype(float))
