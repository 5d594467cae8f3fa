"""Tensor engine: forward semantics against naive oracles, gradients
against central finite differences."""

import numpy as np
import pytest

from deskface.errors import ContractError, DimensionError, NumericError
from deskface.tensor import (
    BatchNormState,
    Parameter,
    Tape,
    Tensor,
    backward,
    batch_norm,
    concat,
    conv2d,
    deconv2d,
    eltwise_add,
    grad_check,
    maxpool2d,
    permute,
    pick,
    relu,
    reshape,
    scale,
    softmax2,
    sum_all,
    take_item,
    weighted_sum,
)

# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def naive_conv2d(x, w, b, stride, pad):
    """Quadruple-loop reference convolution."""
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, oc, oh, ow))
    for ni in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[ni, ci, i * stride + a, j * stride + bb] \
                                    * w[o, ci, a, bb]
                    y[ni, o, i, j] = acc + b[o]
    return y


def margin_standard_normal(rng, shape, margin=2e-3):
    """Standard normal values pushed away from 0 by ``margin``."""
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, margin * np.sign(x) + (x == 0) * margin, x)
    return x


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv2d_identity_kernel():
    y = conv2d(Tensor([[[[5.0]]]]), Tensor([[[[1.0]]]]), Tensor([0.0]), 1, 0)
    assert y.data.reshape(()) == 5.0


def test_conv2d_frozen_small_case():
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
    y = conv2d(x, w, Tensor([0.0]), 1, 0)
    assert y.data.shape == (1, 1, 1, 1)
    assert y.data.reshape(()) == 5.0  # 1*1 + 4*1


def test_conv2d_same_padding_preserves_shape():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 9, 7)))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    y = conv2d(x, w, Tensor(np.zeros(4)), 1, 1)
    assert y.data.shape == (2, 4, 9, 7)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 0), (2, 2)])
def test_conv2d_matches_naive_oracle(stride, pad):
    rng = np.random.default_rng(42 + stride * 10 + pad)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
    want = naive_conv2d(x, w, b, stride, pad)
    np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)


def test_conv2d_channel_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))),
               Tensor(np.zeros(3)), 1, 0)


def test_conv2d_nonfinite_output_is_numeric_error():
    big = Tensor(np.full((1, 1, 2, 2), 1e308))
    w = Tensor(np.full((1, 1, 2, 2), 1e308))
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        conv2d(big, w, Tensor([0.0]), 1, 0)


# ---------------------------------------------------------------------------
# deconv2d
# ---------------------------------------------------------------------------


def test_deconv2d_shape_formula():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 4, 4)))
    w = Tensor(np.random.default_rng(1).standard_normal((2, 3, 2, 2)))
    y = deconv2d(x, w, 2, 0)
    assert y.data.shape == (1, 3, 8, 8)  # (4-1)*2 + 2


def test_deconv2d_scalar_product():
    y = deconv2d(Tensor([[[[3.0]]]]), Tensor([[[[2.0]]]]), 1, 0)
    assert y.data.reshape(()) == 6.0


def test_deconv2d_one_hot_identity():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 1, 5, 5))
    y = deconv2d(Tensor(x), Tensor([[[[1.0]]]]), 1, 0)
    np.testing.assert_array_equal(y.data, x)


def test_conv_deconv_shapes_mutually_inverse():
    rng = np.random.default_rng(9)
    for _ in range(20):
        k = int(rng.integers(1, 5))
        s = int(rng.integers(1, 4))
        n_out = int(rng.integers(1, 6))
        size = k + s * (n_out - 1)  # guarantees (size - k) % s == 0
        x = Tensor(rng.standard_normal((1, 1, size, size)))
        w = Tensor(rng.standard_normal((1, 1, k, k)))
        down = conv2d(x, w, Tensor([0.0]), s, 0)
        wt = Tensor(rng.standard_normal((1, 1, k, k)))
        up = deconv2d(down, wt, s, 0)
        assert up.data.shape == x.data.shape


# ---------------------------------------------------------------------------
# maxpool2d
# ---------------------------------------------------------------------------


def test_maxpool_basic():
    y = maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    assert y.data.reshape(()) == 4.0


def test_maxpool_constant_input():
    y = maxpool2d(Tensor(np.full((1, 2, 4, 4), 3.25)), 2, 2)
    np.testing.assert_array_equal(y.data, np.full((1, 2, 2, 2), 3.25))


def test_maxpool_gradient_routes_to_argmax():
    with Tape() as tape:
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]], requires_grad=True)
        y = maxpool2d(x, 2, 2)
        backward(sum_all(y), tape)
    np.testing.assert_array_equal(x.grad.reshape(-1), [0.0, 0.0, 0.0, 1.0])


def test_maxpool_tie_break_first_position():
    with Tape() as tape:
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        backward(sum_all(maxpool2d(x, 2, 2)), tape)
    np.testing.assert_array_equal(x.grad.reshape(-1), [1.0, 0.0, 0.0, 0.0])


def test_maxpool_window_too_large():
    with pytest.raises(DimensionError):
        maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 3, 1)


# ---------------------------------------------------------------------------
# batch_norm
# ---------------------------------------------------------------------------


def test_batch_norm_normalizes_per_channel():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((4, 3, 6, 6)) * 3.0 + 2.0)
    state = BatchNormState(3)
    y = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), "train", state)
    mean = y.data.mean(axis=(0, 2, 3))
    var = y.data.var(axis=(0, 2, 3))
    assert np.abs(mean).max() < 1e-10
    assert np.abs(var - 1.0).max() < 1e-5


def test_batch_norm_affine_identity():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((4, 2, 5, 5)))
    state = BatchNormState(2)
    y = batch_norm(x, Tensor(np.full(2, 2.0)), Tensor(np.full(2, 3.0)), "train", state)
    mean = y.data.mean(axis=(0, 2, 3))
    std = y.data.std(axis=(0, 2, 3))
    np.testing.assert_allclose(mean, 3.0, atol=1e-9)
    np.testing.assert_allclose(std, 2.0, atol=1e-4)


def test_batch_norm_running_stats_and_infer():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((8, 2, 4, 4)) * 2.0 + 1.0
    state = BatchNormState(2)
    gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
    batch_norm(Tensor(x), gamma, beta, "train", state)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(state.running_mean, 0.1 * mu, rtol=1e-12)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * var, rtol=1e-12)
    # infer mode must use the running stats, not the batch stats
    y = batch_norm(Tensor(x), gamma, beta, "infer", state)
    expect = (x - state.running_mean[None, :, None, None]) / np.sqrt(
        np.maximum(state.running_var, 1e-5)
    )[None, :, None, None]
    np.testing.assert_allclose(y.data, expect, rtol=1e-12)


def test_batch_norm_small_variance_still_exactly_unit():
    # the max(var, eps) guard keeps output variance exact for any channel
    # with variance at or above eps
    rng = np.random.default_rng(55)
    x = Tensor(rng.standard_normal((4, 1, 8, 8)) * 1e-2 + 0.7)  # var ~= 1e-4
    y = batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), "train",
                   BatchNormState(1))
    assert abs(y.data.var() - 1.0) < 1e-12
    assert abs(y.data.mean()) < 1e-12


def test_batch_norm_zero_variance_channel_is_finite():
    x = Tensor(np.full((2, 1, 3, 3), 7.0))
    y = batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), "train",
                   BatchNormState(1))
    assert np.isfinite(y.data).all()
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)


def test_batch_norm_train_needs_two_samples():
    with pytest.raises(ContractError):
        batch_norm(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)),
                   Tensor(np.zeros(2)), "train", BatchNormState(2))


# ---------------------------------------------------------------------------
# relu / eltwise / softmax2
# ---------------------------------------------------------------------------


def test_relu_values_and_idempotence():
    x = Tensor([-1.0, 0.0, 2.0])
    y = relu(x)
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu(y).data, y.data)


def test_relu_gradient_is_indicator():
    rng = np.random.default_rng(8)
    x = Tensor(margin_standard_normal(rng, (40,)), requires_grad=True)
    with Tape() as tape:
        backward(sum_all(relu(x)), tape)
    np.testing.assert_array_equal(x.grad, (x.data > 0).astype(float))


def test_eltwise_add_identity_and_commutativity():
    rng = np.random.default_rng(9)
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(eltwise_add(a, Tensor(np.zeros((3, 4)))).data, a.data)
    np.testing.assert_array_equal(eltwise_add(a, b).data, eltwise_add(b, a).data)
    with pytest.raises(DimensionError):
        eltwise_add(a, Tensor(np.zeros((4, 3))))


def test_eltwise_add_passes_adjoint_to_both():
    rng = np.random.default_rng(10)
    probe = rng.standard_normal((3, 3))
    a = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    with Tape() as tape:
        backward(weighted_sum(eltwise_add(a, b), probe), tape)
    np.testing.assert_array_equal(a.grad, probe)
    np.testing.assert_array_equal(b.grad, probe)


def test_softmax2_symmetry_stability_and_value():
    np.testing.assert_allclose(
        softmax2(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]], rtol=0, atol=0
    )
    big = softmax2(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all()
    np.testing.assert_allclose(big, [[1.0, 0.0]], atol=1e-300)
    p = softmax2(Tensor([[np.log(3.0), 0.0]])).data
    np.testing.assert_allclose(p, [[0.75, 0.25]], rtol=1e-12)


def test_softmax2_rows_sum_to_one():
    rng = np.random.default_rng(11)
    p = softmax2(Tensor(rng.standard_normal((100, 2)) * 10)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax2_rejects_wrong_last_dim():
    with pytest.raises(DimensionError):
        softmax2(Tensor(np.zeros((4, 3))))


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------


def test_backward_identity():
    with Tape() as tape:
        x = Tensor(3.0, requires_grad=True)
        y = reshape(x, ())
        backward(y, tape)
    assert x.grad.reshape(()) == 1.0


def test_backward_fanout_accumulates():
    with Tape() as tape:
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        backward(sum_all(eltwise_add(x, x)), tape)
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))


def test_backward_requires_scalar_from_this_tape():
    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        y = relu(x)
        with pytest.raises(ContractError):
            backward(y, tape)  # not scalar
    other = Tensor(1.0, requires_grad=True)
    with pytest.raises(ContractError):
        backward(other, tape)  # never produced on the tape


def test_backward_visits_reverse_topological_once():
    calls = []

    def make_pull(tag):
        def pull(g):
            calls.append(tag)
            return g

        return pull

    with Tape() as tape:
        x = Tensor(1.0, requires_grad=True)
        b = Tensor(np.asarray(2.0), requires_grad=True, _lazy_grad=True)
        tape.record(b, [(x, make_pull("b"))])
        c = Tensor(np.asarray(3.0), requires_grad=True, _lazy_grad=True)
        tape.record(c, [(x, make_pull("c"))])
        d = eltwise_add(b, c)
        backward(sum_all(d), tape)
    assert calls == ["c", "b"]  # reverse creation order, each exactly once
    assert x.grad.reshape(()) == 2.0


def test_composite_conv_relu_pool_gradcheck():
    rng = np.random.default_rng(12)
    x = Tensor(margin_standard_normal(rng, (1, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = Tensor(rng.standard_normal(3))

    def f(t):
        return sum_all(maxpool2d(relu(conv2d(t, w, b, 1, 1)), 2, 2))

    assert grad_check(f, x) < 1e-4


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------


def test_grad_check_exact_for_linear():
    rng = np.random.default_rng(13)
    probe = rng.standard_normal((5,))
    x = Tensor(rng.standard_normal((5,)), requires_grad=True)
    assert grad_check(lambda t: weighted_sum(t, probe), x) < 1e-10


def test_grad_check_flags_corrupted_backward():
    x = Tensor(np.asarray([1.5, -0.5, 2.0]), requires_grad=True)

    def broken(t):
        out = Tensor(np.asarray(t.data.sum()), requires_grad=True, _lazy_grad=True)
        tape = Tape.active()
        if tape is not None:
            # deliberately wrong adjoint: twice the true one
            tape.record(out, [(t, lambda g: 2.0 * np.broadcast_to(g, t.data.shape))])
        return out

    assert grad_check(broken, x) > 1e-2


def test_grad_check_rejects_bad_h():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        grad_check(lambda t: sum_all(t), x, h=0.0)


# ---------------------------------------------------------------------------
# per-op gradient property (10 seeds each, kink margins enforced)
# ---------------------------------------------------------------------------


def _op_cases(seed):
    rng = np.random.default_rng(seed)
    uni = lambda shape: Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=True)
    probe = rng.standard_normal
    x = uni((2, 3, 6, 6))
    w = uni((4, 3, 3, 3))
    b = uni((4,))
    p_conv = probe((2, 4, 6, 6))
    yield lambda: grad_check(lambda t: weighted_sum(conv2d(t, w, b, 1, 1), p_conv), x)
    yield lambda: grad_check(lambda t: weighted_sum(conv2d(x, t, b, 1, 1), p_conv), w)
    yield lambda: grad_check(lambda t: weighted_sum(conv2d(x, w, t, 1, 1), p_conv), b)

    xd = uni((2, 3, 4, 4))
    wd = uni((3, 2, 2, 2))
    p_dec = probe((2, 2, 8, 8))
    yield lambda: grad_check(lambda t: weighted_sum(deconv2d(t, wd, 2, 0), p_dec), xd)
    yield lambda: grad_check(lambda t: weighted_sum(deconv2d(xd, t, 2, 0), p_dec), wd)

    # pooling: distinct window values keep finite differences off the kinks
    vals = rng.permutation(2 * 2 * 36).reshape(2, 2, 6, 6) * 0.05
    xp = Tensor(vals, requires_grad=True)
    p_pool = probe((2, 2, 3, 3))
    yield lambda: grad_check(lambda t: weighted_sum(maxpool2d(t, 2, 2), p_pool), xp)

    xb = uni((3, 2, 4, 4))
    gb = Tensor(rng.uniform(0.5, 2.0, 2), requires_grad=True)
    bb = uni((2,))
    st = BatchNormState(2)
    p_bn = probe((3, 2, 4, 4))
    yield lambda: grad_check(
        lambda t: weighted_sum(batch_norm(t, gb, bb, "train", st), p_bn), xb)
    yield lambda: grad_check(
        lambda t: weighted_sum(batch_norm(xb, t, bb, "train", st), p_bn), gb)
    yield lambda: grad_check(
        lambda t: weighted_sum(batch_norm(xb, gb, t, "train", st), p_bn), bb)

    xr = Tensor(margin_standard_normal(rng, (4, 5)), requires_grad=True)
    p_r = probe((4, 5))
    yield lambda: grad_check(lambda t: weighted_sum(relu(t), p_r), xr)

    xa = uni((3, 4))
    ya = uni((3, 4))
    p_a = probe((3, 4))
    yield lambda: grad_check(lambda t: weighted_sum(eltwise_add(t, ya), p_a), xa)

    xs = uni((6, 2))
    p_s = probe((6, 2))
    yield lambda: grad_check(lambda t: weighted_sum(softmax2(t), p_s), xs)

    xm = uni((2, 3, 4))
    p_m = probe((3, 2, 4))
    yield lambda: grad_check(
        lambda t: weighted_sum(permute(t, (1, 0, 2)), p_m), xm)
    p_f = probe((24,))
    yield lambda: grad_check(lambda t: weighted_sum(reshape(t, (24,)), p_f), xm)


@pytest.mark.parametrize("seed", range(10))
def test_every_op_gradchecks_at_seed(seed):
    for case in _op_cases(seed):
        assert case() < 1e-4


def test_forward_is_deterministic():
    rng = np.random.default_rng(14)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    b = Tensor(rng.standard_normal(4))
    y1 = conv2d(x, w, b, 1, 1).data
    y2 = conv2d(x, w, b, 1, 1).data
    assert np.array_equal(y1, y2)


# ---------------------------------------------------------------------------
# plumbing ops
# ---------------------------------------------------------------------------


def test_concat_take_item_pick_scale_roundtrip_gradients():
    rng = np.random.default_rng(15)
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 3)), requires_grad=True)
    with Tape() as tape:
        cat = concat([a, b], axis=0)
        row = take_item(cat, 2)
        val = pick(row, (1,))
        backward(scale(val, 4.0), tape)
    assert b.grad[0, 1] == 4.0
    assert np.all(a.grad == 0.0)


def test_parameter_carries_momentum_buffer():
    p = Parameter("w", np.ones((2, 2)))
    assert p.value.requires_grad
    assert p.momentum_buffer.data.shape == (2, 2)
    assert np.all(p.momentum_buffer.data == 0.0)
