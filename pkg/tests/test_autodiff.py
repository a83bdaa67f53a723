import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases
from disentangle_lab import autodiff as ad
from disentangle_lab.autodiff import Tensor
from disentangle_lab.errors import ConfigError, GradientError, ShapeError


@pytest.mark.parametrize("op", sorted(gradcases.OPS))
def test_gradient_matches_finite_differences(op):
    worst = max(gradcases.run_case(op, seed) for seed in range(gradcases.CASES_PER_OP))
    assert worst < 1e-4, f"{op}: relative error {worst:.3e}"


# ---------------------------------------------------------------------------
# conv1d


def naive_conv1d(x, w, b, stride, pad, dilation):
    c_in, t = x.shape
    c_out, _, k = w.shape
    xp = np.zeros((c_in, t + 2 * pad))
    xp[:, pad : pad + t] = x
    t_out = (t + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    y = np.zeros((c_out, t_out))
    for o in range(c_out):
        for j in range(t_out):
            acc = b[o]
            for c in range(c_in):
                for kk in range(k):
                    acc += w[o, c, kk] * xp[c, j * stride + kk * dilation]
            y[o, j] = acc
    return y


# (C_in, C_out, K, stride, pad, dilation) rows of the ECAPA-lite layer table,
# channels reduced so the scalar oracle stays fast; geometry is unchanged
LAYER_GEOMETRY = [
    (1, 3, 1024, 512, 0, 1),  # input layer
    (4, 4, 1, 1, 0, 1),  # 1x1 convs inside SE-Res2 / Concat-Conv
    (4, 4, 3, 1, 2, 2),  # SE-Res2-1
    (4, 4, 3, 1, 3, 3),  # SE-Res2-2
    (4, 4, 3, 1, 4, 4),  # SE-Res2-3
]


@pytest.mark.parametrize("c_in,c_out,k,stride,pad,dilation", LAYER_GEOMETRY)
def test_conv1d_matches_nested_loop_oracle(c_in, c_out, k, stride, pad, dilation):
    rng = np.random.default_rng(k + dilation)
    t = 4096 if k == 1024 else 37
    x = rng.standard_normal((c_in, t))
    w = rng.standard_normal((c_out, c_in, k))
    b = rng.standard_normal(c_out)
    y = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad, dilation=dilation).data
    expected = naive_conv1d(x, w, b, stride, pad, dilation)
    assert y.shape == expected.shape == (c_out, ad.conv_output_length(t, k, stride, pad, dilation))
    np.testing.assert_allclose(y, expected, rtol=1e-10, atol=1e-9)


def test_conv1d_input_layer_shape_at_full_length():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 61440))
    w = rng.standard_normal((128, 1, 1024)) * 0.03
    y = ad.conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(128)), stride=512)
    assert y.shape == (128, 119)
    # spot-check a few outputs against direct dot products
    for o, j in [(0, 0), (17, 58), (127, 118)]:
        assert math.isclose(y.data[o, j], float(w[o, 0] @ x[0, j * 512 : j * 512 + 1024]), rel_tol=1e-9)


def test_conv1d_identity_kernel():
    x = np.random.default_rng(1).standard_normal((3, 20))
    w = np.eye(3)[:, :, None]
    y = ad.conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x)


def test_conv1d_batched_equals_per_example():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 2, 30))
    w, b = rng.standard_normal((4, 2, 3)), rng.standard_normal(4)
    yb = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1, dilation=2).data
    for i in range(3):
        np.testing.assert_allclose(yb[i], ad.conv1d(Tensor(x[i]), Tensor(w), Tensor(b), stride=2, pad=1, dilation=2).data)


@pytest.mark.parametrize(
    "x_shape,w_shape,kwargs,dim",
    [
        ((3, 20), (4, 2, 3), {}, "C_in"),
        ((2, 5), (4, 2, 9), {}, "T"),
        ((2, 20), (4, 2, 3), {"stride": 0}, "stride"),
        ((2, 20), (4, 2), {}, "K"),
    ],
)
def test_conv1d_shape_errors_name_the_dimension(x_shape, w_shape, kwargs, dim):
    with pytest.raises(ShapeError) as exc:
        ad.conv1d(Tensor(np.zeros(x_shape)), Tensor(np.zeros(w_shape)), **kwargs)
    assert exc.value.dim == dim


# ---------------------------------------------------------------------------
# SE-Res2 and pooling


@pytest.mark.parametrize("dilation", [2, 3, 4])
@pytest.mark.parametrize("t", [3, 7, 40])
def test_se_res2_preserves_length(dilation, t):
    rng = np.random.default_rng(dilation * 100 + t)
    c = 8
    x = Tensor(rng.standard_normal((c, t)))
    params = gradcases.se_res2_params(rng, c, 4, 3, bottleneck=1)
    assert ad.se_res2_block(x, params, kernel=3, dilation=dilation, scale=4).shape == (c, t)


def test_se_res2_is_pure_residual_with_zero_convs_and_bypassed_gate():
    rng = np.random.default_rng(3)
    c = 8
    x = rng.standard_normal((c, 12))
    params = {k: Tensor(np.zeros_like(v.data)) for k, v in gradcases.se_res2_params(rng, c, 4, 3, 1).items()}
    y = ad.se_res2_block(Tensor(x), params, kernel=3, dilation=2, scale=4, bypass_se=True)
    np.testing.assert_array_equal(y.data, x)


def test_se_res2_rejects_indivisible_channels():
    rng = np.random.default_rng(4)
    params = gradcases.se_res2_params(rng, 8, 4, 3, 1)
    with pytest.raises(ConfigError):
        ad.se_res2_block(Tensor(np.zeros((6, 10))), params, kernel=3, dilation=2, scale=4)


def _pool_params(rng, c, a):
    return {
        "attention.conv1.weight": Tensor(rng.standard_normal((a, c, 1))),
        "attention.conv1.bias": Tensor(rng.standard_normal(a)),
        "attention.conv2.weight": Tensor(rng.standard_normal((c, a, 1))),
        "attention.conv2.bias": Tensor(rng.standard_normal(c)),
    }


def test_attentive_pool_output_dim_and_weights():
    rng = np.random.default_rng(5)
    capture = {}
    out = ad.attentive_stats_pool(Tensor(rng.standard_normal((384, 9))), _pool_params(rng, 384, 128), capture=capture)
    assert out.shape == (768,)
    w = capture["attention"].data
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)

    capture = {}
    ad.attentive_stats_pool(Tensor(rng.standard_normal((6, 10))), _pool_params(rng, 6, 4), capture=capture)
    np.testing.assert_allclose(capture["attention"].data.sum(axis=-1), 1.0, atol=1e-6)


def test_attentive_pool_constant_input():
    rng = np.random.default_rng(6)
    levels = rng.standard_normal(5)
    x = np.repeat(levels[:, None], 11, axis=1)
    out = ad.attentive_stats_pool(Tensor(x), _pool_params(rng, 5, 3)).data
    np.testing.assert_allclose(out[:5], levels, atol=1e-12)
    np.testing.assert_allclose(out[5:], math.sqrt(ad.STD_EPS), rtol=1e-6)


# ---------------------------------------------------------------------------
# LSTM


def test_lstm_zero_params_give_zero_states():
    x = Tensor(np.random.default_rng(7).standard_normal((6, 4)))
    h = ad.lstm_sequence(x, np.zeros((12, 4)), np.zeros((12, 3)), np.zeros(12), np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(h.data, 0.0)


def test_lstm_single_step_equals_cell():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 4))
    w_ih, w_hh, b = rng.standard_normal((12, 4)), rng.standard_normal((12, 3)), rng.standard_normal(12)
    h0, c0 = rng.standard_normal(3), rng.standard_normal(3)
    seq = ad.lstm_sequence(Tensor(x), Tensor(w_ih), Tensor(w_hh), Tensor(b), Tensor(h0), Tensor(c0))
    h1, _ = ad.lstm_cell(Tensor(x[0]), Tensor(h0), Tensor(c0), Tensor(w_ih), Tensor(w_hh), Tensor(b))
    np.testing.assert_allclose(seq.data[0], h1.data, rtol=1e-12, atol=1e-14)


def test_fused_lstm_matches_unrolled_cells():
    rng = np.random.default_rng(9)
    t, d_in, d_h = 6, 3, 4
    x = rng.standard_normal((t, d_in))
    w_ih, w_hh, b = rng.standard_normal((4 * d_h, d_in)), rng.standard_normal((4 * d_h, d_h)), rng.standard_normal(4 * d_h)
    seq = ad.lstm_sequence(Tensor(x), Tensor(w_ih), Tensor(w_hh), Tensor(b)).data
    h, c = Tensor(np.zeros(d_h)), Tensor(np.zeros(d_h))
    for step in range(t):
        h, c = ad.lstm_cell(Tensor(x[step]), h, c, Tensor(w_ih), Tensor(w_hh), Tensor(b))
        np.testing.assert_allclose(seq[step], h.data, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# losses


def test_cross_entropy_uniform_logits():
    loss = ad.cross_entropy(Tensor(np.zeros(107)), 42)
    assert abs(float(loss.data) - math.log(107)) < 1e-6
    assert abs(math.log(107) - 4.67283) < 1e-5


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(10)
    z = Tensor(rng.standard_normal(7), requires_grad=True)
    ad.backward(ad.cross_entropy(z, 3))
    p = np.exp(z.data - z.data.max())
    p /= p.sum()
    p[3] -= 1.0
    np.testing.assert_allclose(z.grad, p, atol=1e-12)
    numeric = ad.numeric_grad(lambda: ad.cross_entropy(z, 3), z)
    assert np.max(np.abs(numeric - p)) < 1e-6


def test_cross_entropy_rejects_out_of_range_class():
    with pytest.raises(ConfigError):
        ad.cross_entropy(Tensor(np.zeros(5)), 5)


def test_bce_saturates():
    assert float(ad.bce_with_logit(Tensor(np.array([30.0])), 1).data) < 1e-12
    assert float(ad.bce_with_logit(Tensor(np.array([-30.0])), 0).data) < 1e-12
    # no overflow on extreme logits
    assert np.isfinite(float(ad.bce_with_logit(Tensor(np.array([-1e4])), 1).data))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.integers(0, 1))
def test_losses_non_negative(logits, label):
    z = np.array(logits)
    assert float(ad.bce_with_logit(Tensor(z), label).data) >= 0.0
    assert float(ad.cross_entropy(Tensor(z), 0).data) >= 0.0


# ---------------------------------------------------------------------------
# backward contract


def test_backward_linear_map():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 4)).astype(np.float32)
    w = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    ad.backward(ad.tsum(w * x))
    np.testing.assert_array_equal(w.grad, x)


def test_backward_linearity():
    rng = np.random.default_rng(12)
    w = Tensor(rng.standard_normal((4, 3)).astype(np.float32), requires_grad=True)
    x = Tensor(rng.standard_normal((5, 4)).astype(np.float32))

    def l1():
        return ad.tsum(ad.tanh(x @ w))

    def l2():
        return ad.mean(ad.square(ad.sigmoid(x @ w)))

    grads = []
    for fn in (l1, l2, lambda: 2.0 * l1() + (-3.0) * l2()):
        w.grad = None
        ad.backward(fn())
        grads.append(w.grad.copy())
    np.testing.assert_allclose(grads[2], 2.0 * grads[0] - 3.0 * grads[1], atol=1e-6)


def test_backward_twice_without_reset_raises():
    w = Tensor(np.ones(3), requires_grad=True)
    ad.backward(ad.tsum(w * 2.0))
    with pytest.raises(GradientError):
        ad.backward(ad.tsum(w * 2.0))
    ad.zero_grad([w])
    ad.backward(ad.tsum(w * 2.0))


def test_backward_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradientError):
        ad.backward(w * 2.0)


def test_every_reachable_tensor_gets_a_grad():
    rng = np.random.default_rng(13)
    a = Tensor(rng.standard_normal(3), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    c = Tensor(rng.standard_normal(3))
    mid = a * b
    loss = ad.tsum(ad.exp(mid) + c)
    ad.backward(loss)
    for t in (a, b, mid):
        assert t.grad is not None and t.grad.shape == t.shape
    assert c.grad is None


def test_topological_order_places_inputs_first():
    a = Tensor(np.ones(2), requires_grad=True)
    b = ad.exp(a)
    c = b * a
    d = ad.tsum(c + b)
    order = ad.topological_order(d)
    pos = {id(t): i for i, t in enumerate(order)}
    for node in order:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.tsum(w * 3.0)
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((2, 4, 50)).astype(np.float32)
    w = rng.standard_normal((5, 4, 3)).astype(np.float32)
    y1 = ad.conv1d(Tensor(x), Tensor(w), pad=1, dilation=2).data
    y2 = ad.conv1d(Tensor(x), Tensor(w), pad=1, dilation=2).data
    assert y1.tobytes() == y2.tobytes()


def test_float32_default_and_float64_preserved():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
    assert (Tensor(np.zeros(2, np.float32)) * 2.0).dtype == np.float32


def test_rounding_bound_only_absorbs_noise():
    # a genuine gradient error far above the rounding bound is still reported
    assert ad.relative_error(np.array([1.0]), np.array([1.001]), atol=ad.fd_rounding_bound(1.0, 1e-5)) > 9e-4
