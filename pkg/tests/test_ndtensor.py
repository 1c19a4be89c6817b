"""Engine-level checks: forward values, gradients vs finite differences,
tape semantics, broadcasting rules, and tensor serialization."""

import io

import numpy as np
import pytest

import stflow.ndtensor as nd
from stflow.ndtensor import NumericsError, Tensor


def leaf(data):
    return nd.param(np.asarray(data, dtype=np.float64))


# --- elementwise forward values ---------------------------------------------

def test_sigmoid_at_zero():
    assert nd.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_tanh_at_zero():
    assert nd.tanh(Tensor([0.0])).data[0] == 0.0


def test_exp_log_inverse_pair():
    out = nd.exp(nd.log(Tensor([2.5]))).data[0]
    assert abs(out - 2.5) < 1e-12


def test_relu_clamps_negatives():
    out = nd.relu(Tensor([-3.0, 0.0, 2.0])).data
    assert np.array_equal(out, [0.0, 0.0, 2.0])


def test_arithmetic_values():
    a, b = Tensor([6.0]), Tensor([4.0])
    assert nd.add(a, b).data[0] == 10.0
    assert nd.sub(a, b).data[0] == 2.0
    assert nd.mul(a, b).data[0] == 24.0
    assert nd.div(a, b).data[0] == 1.5
    assert nd.neg(a).data[0] == -6.0


def test_log_of_nonpositive_raises():
    with pytest.raises(NumericsError):
        with np.errstate(all="ignore"):
            nd.log(Tensor([0.0]))


def test_division_to_nonfinite_raises():
    with pytest.raises(NumericsError):
        with np.errstate(all="ignore"):
            nd.div(Tensor([1.0]), Tensor([0.0]))


# --- broadcasting ------------------------------------------------------------

def test_broadcast_trailing_singleton():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.array([[1.0], [2.0]]))
    out = nd.mul(a, b).data
    assert np.array_equal(out, [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])


def test_broadcast_lower_rank_operand():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.array([1.0, 2.0, 3.0]))
    out = nd.add(a, b).data
    assert np.array_equal(out, [[2.0, 3.0, 4.0], [2.0, 3.0, 4.0]])


def test_broadcast_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        nd.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_broadcast_higher_rank_operand_rejected():
    with pytest.raises(ValueError):
        nd.add(Tensor(np.ones(3)), Tensor(np.ones((2, 3))))


def test_broadcast_gradient_sums_over_expanded_dims():
    a = leaf(np.ones((2, 3)))
    b = leaf(np.array([1.0, 2.0, 3.0]))
    nd.backward(nd.tsum(nd.mul(a, b)))
    assert np.array_equal(b.grad, [2.0, 2.0, 2.0])
    assert np.array_equal(a.grad, [[1.0, 2.0, 3.0]] * 2)


# --- conv2d forward examples --------------------------------------------------

def test_conv2d_zero_input_yields_bias():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    w = Tensor(np.random.default_rng(0).normal(size=(3, 2, 3, 3)))
    b = Tensor(np.array([1.0, -2.0, 0.5]))
    out = nd.conv2d(x, w, b, padding=1).data
    for c, bv in enumerate([1.0, -2.0, 0.5]):
        assert np.all(out[0, c] == bv)


def test_conv2d_pointwise_scaling():
    x = Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]]))
    w = Tensor(np.array([[[[2.0]]]]))
    out = nd.conv2d(x, w, padding=0).data
    assert np.array_equal(out[0, 0], [[2.0, 6.0], [10.0, 14.0]])


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(1, 1, 5, 5)))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = nd.conv2d(x, Tensor(w), padding=1).data
    assert np.allclose(out, x.data)


def test_conv2d_stride_two_output_dims():
    x = Tensor(np.zeros((1, 1, 7, 7)))
    w = Tensor(np.zeros((2, 1, 3, 3)))
    out = nd.conv2d(x, w, padding=1, stride=2)
    assert out.shape == (1, 2, 4, 4)


def test_conv2d_nonintegral_output_rejected():
    x = Tensor(np.zeros((1, 1, 6, 6)))
    w = Tensor(np.zeros((1, 1, 3, 3)))
    with pytest.raises(ValueError):
        nd.conv2d(x, w, padding=0, stride=2)


# --- backward examples ---------------------------------------------------------

def test_backward_linear():
    x = leaf([1.0, 1.0, 1.0])
    nd.backward(nd.tsum(nd.mul(x, 2.0)))
    assert np.array_equal(x.grad, [2.0, 2.0, 2.0])


def test_backward_quadratic():
    x = leaf([1.0, -2.0, 3.0])
    nd.backward(nd.tsum(nd.mul(x, x)))
    assert np.array_equal(x.grad, [2.0, -4.0, 6.0])


def test_backward_sigmoid_at_zero():
    x = leaf([0.0])
    nd.backward(nd.tsum(nd.sigmoid(x)))
    assert abs(x.grad[0] - 0.25) < 1e-15


def test_backward_accumulates_for_reused_tensor():
    x = leaf([3.0])
    y = nd.add(nd.mul(x, x), nd.mul(x, 2.0))  # x^2 + 2x -> 2x + 2 = 8
    nd.backward(nd.tsum(y))
    assert abs(x.grad[0] - 8.0) < 1e-12


def test_backward_twice_rejected():
    x = leaf([1.0])
    loss = nd.tsum(nd.mul(x, x))
    nd.backward(loss)
    with pytest.raises(ValueError):
        nd.backward(loss)


def test_backward_nonscalar_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        nd.backward(nd.mul(x, x))


def test_nonleaf_grads_discarded():
    x = leaf([2.0])
    mid = nd.mul(x, x)
    nd.backward(nd.tsum(mid))
    assert mid.grad is None
    assert x.grad is not None


def test_no_grad_suppresses_recording():
    x = leaf([1.0])
    with nd.no_grad():
        y = nd.mul(x, x)
    assert not y.requires_grad
    assert y._rec is None


# --- finite-difference oracle ---------------------------------------------------

def test_finite_diff_square():
    g = nd.finite_diff_grad(lambda t: nd.tsum(nd.mul(t, t)), Tensor([3.0])).data
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_diff_exp():
    g = nd.finite_diff_grad(lambda t: nd.tsum(nd.exp(t)), Tensor([0.0])).data
    assert abs(g[0] - 1.0) < 1e-6


def test_small_net_backward_matches_finite_diff():
    rng = np.random.default_rng(7)
    w1 = leaf(rng.normal(size=(4, 3)) * 0.5)
    w2 = leaf(rng.normal(size=(1, 4)) * 0.5)
    x = Tensor(rng.normal(size=(3, 2)))

    def loss_from(wa, wb):
        h = nd.tanh(nd.matmul(wa, x))
        return nd.tsum(nd.sigmoid(nd.matmul(wb, h)))

    nd.backward(loss_from(w1, w2))
    for p in (w1, w2):
        num = nd.finite_diff_grad(lambda _t: loss_from(w1, w2), p).data
        rel = np.abs(p.grad - num) / np.maximum(np.abs(num), 1e-8)
        assert rel.max() < 1e-4


# --- per-op gradient checks vs central differences -------------------------------

def _gradcheck(build, shapes, seeds=range(20), rel_tol=1e-4):
    """build(tensors) -> scalar Tensor; checks every input's gradient."""
    for seed in seeds:
        rng = np.random.default_rng(seed)
        inputs = [leaf(rng.normal(size=s) * 0.8 + 0.1) for s in shapes]
        nd.backward(build(inputs))
        for i, t in enumerate(inputs):
            def f(_t, i=i):
                return build(inputs)
            num = nd.finite_diff_grad(f, t, eps=1e-5).data
            got = t.grad if t.grad is not None else np.zeros_like(num)
            denom = np.maximum(np.maximum(np.abs(num), np.abs(got)), 1e-3)
            rel = np.abs(got - num) / denom
            assert rel.max() < rel_tol, f"seed {seed} input {i}: {rel.max()}"


def test_gradcheck_add():
    _gradcheck(lambda ts: nd.tsum(nd.add(ts[0], ts[1])), [(3, 4), (3, 4)])


def test_gradcheck_sub():
    _gradcheck(lambda ts: nd.tsum(nd.mul(nd.sub(ts[0], ts[1]), ts[0])),
               [(3, 4), (3, 4)])


def test_gradcheck_mul():
    _gradcheck(lambda ts: nd.tsum(nd.mul(ts[0], ts[1])), [(3, 4), (3, 4)])


def test_gradcheck_div():
    def build(ts):
        denom = nd.add(nd.mul(ts[1], ts[1]), 1.0)  # bounded away from zero
        return nd.tsum(nd.div(ts[0], denom))
    _gradcheck(build, [(3, 4), (3, 4)])


def test_gradcheck_unary_chain():
    def build(ts):
        return nd.tsum(nd.sigmoid(nd.tanh(nd.mul(ts[0], 1.5))))
    _gradcheck(build, [(4, 4)])


def test_gradcheck_exp_log():
    def build(ts):
        pos = nd.add(nd.mul(ts[0], ts[0]), 0.5)
        return nd.tsum(nd.mul(nd.log(pos), nd.exp(nd.mul(ts[0], 0.3))))
    _gradcheck(build, [(3, 3)])


def test_gradcheck_relu():
    # keep inputs away from the kink, where central differences lie
    def build(ts):
        return nd.tsum(nd.relu(nd.add(ts[0], 5.0)))
    _gradcheck(build, [(3, 4)])


def test_gradcheck_mean_reduction():
    _gradcheck(lambda ts: nd.tmean(nd.mul(ts[0], ts[0])), [(2, 3, 4)])


def test_gradcheck_sum_with_axes():
    def build(ts):
        partial = nd.tsum(nd.mul(ts[0], ts[0]), axes=(1, 2))
        return nd.tsum(nd.mul(partial, partial))
    _gradcheck(build, [(2, 3, 4)])


def test_gradcheck_reshape_concat_split():
    def build(ts):
        j = nd.concat([ts[0], ts[1]], axis=0)
        a, b = nd.split(j, 2, axis=0)
        flat = nd.reshape(nd.mul(a, b), (8,))
        return nd.tsum(nd.mul(flat, flat))
    _gradcheck(build, [(2, 4), (2, 4)])


def test_gradcheck_squeeze_unsqueeze():
    def build(ts):
        s = nd.squeeze2(ts[0])
        return nd.tsum(nd.mul(nd.unsqueeze2(s), ts[0]))
    _gradcheck(build, [(1, 4, 4)])


def test_gradcheck_avg_pool():
    _gradcheck(lambda ts: nd.tsum(nd.mul(nd.avg_pool(ts[0], 2, 2), 3.0)),
               [(2, 4, 4)])


def test_gradcheck_matmul():
    _gradcheck(lambda ts: nd.tsum(nd.matmul(ts[0], ts[1])), [(3, 4), (4, 2)])


def test_gradcheck_channel_mix():
    # regression guard: the input gradient once applied W instead of W^T
    def build(ts):
        y = nd.channel_mix(ts[0], ts[1])
        return nd.tsum(nd.mul(y, y))
    _gradcheck(build, [(2, 3, 2, 2), (3, 3)], seeds=range(10))


def test_gradcheck_conv2d():
    def build(ts):
        y = nd.conv2d(ts[0], ts[1], ts[2], padding=1)
        return nd.tsum(nd.mul(y, y))
    _gradcheck(build, [(1, 2, 4, 4), (3, 2, 3, 3), (3,)], seeds=range(10))


def test_gradcheck_conv2d_strided():
    def build(ts):
        y = nd.conv2d(ts[0], ts[1], ts[2], padding=1, stride=2)
        return nd.tsum(nd.mul(y, y))
    _gradcheck(build, [(1, 2, 5, 5), (2, 2, 3, 3), (2,)], seeds=range(10))


# --- shape ops ----------------------------------------------------------------

def test_split_channels_example():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
    a, b = nd.split(x, 2, axis=0)
    assert np.array_equal(a.data.ravel(), [1.0, 2.0])
    assert np.array_equal(b.data.ravel(), [3.0, 4.0])


def test_split_uneven_channels():
    x = Tensor(np.zeros((3, 2, 2)))
    a, b = nd.split(x, 2, axis=0)
    assert a.shape[0] == 2 and b.shape[0] == 1


def test_split_out_of_range_rejected():
    x = Tensor(np.zeros((4, 2, 2)))
    with pytest.raises(ValueError):
        nd.split(x, 4, axis=0)


def test_concat_split_round_trip():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(6, 3, 3)))
    a, b = nd.split(x, 2, axis=0)
    assert np.array_equal(nd.concat([a, b], axis=0).data, x.data)


def test_split_concat_round_trip():
    rng = np.random.default_rng(4)
    a = Tensor(rng.normal(size=(2, 3)))
    b = Tensor(rng.normal(size=(5, 3)))
    x = nd.concat([a, b], axis=0)
    a2, b2 = nd.split(x, 2, axis=0)
    assert np.array_equal(a2.data, a.data)
    assert np.array_equal(b2.data, b.data)


def test_squeeze_block_order():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))  # [[a,b],[c,d]]
    out = nd.squeeze2(x)
    assert out.shape == (4, 1, 1)
    assert np.array_equal(out.data.ravel(), [1.0, 2.0, 3.0, 4.0])


def test_squeeze_counts_preserved():
    x = Tensor(np.arange(16.0).reshape(1, 4, 4))
    out = nd.squeeze2(x)
    assert out.shape == (4, 2, 2)
    assert out.data.size == 16


def test_unsqueeze_inverts_squeeze():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 6, 4)))
    assert np.array_equal(nd.unsqueeze2(nd.squeeze2(x)).data, x.data)


def test_squeeze_odd_dims_rejected():
    with pytest.raises(ValueError):
        nd.squeeze2(Tensor(np.zeros((1, 3, 4))))


def test_squeeze_asymmetric_factors():
    x = Tensor(np.array([[[1.0, 2.0]]]))  # 1x1x2
    out = nd.squeeze2(x, fh=1, fw=2)
    assert out.shape == (2, 1, 1)
    assert np.array_equal(nd.unsqueeze2(out, fh=1, fw=2).data, x.data)


def test_avg_pool_mean_example():
    x = Tensor(np.array([[[1.0, 3.0], [5.0, 7.0]]]))
    assert nd.avg_pool(x, 2, 2).data.ravel()[0] == 4.0


# --- determinism -----------------------------------------------------------------

def test_forward_determinism():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 2, 8, 8))
    w = rng.normal(size=(4, 2, 3, 3))

    def run():
        return nd.conv2d(Tensor(x), Tensor(w), padding=1).data

    a, b = run(), run()
    assert np.array_equal(a, b)


# --- serialization ----------------------------------------------------------------

def test_write_read_round_trip_f64():
    rng = np.random.default_rng(21)
    arr = rng.normal(size=(3, 4, 5))
    buf = io.BytesIO()
    nd.write_array(buf, arr)
    buf.seek(0)
    out = nd.read_array(buf)
    assert out.shape == arr.shape
    assert np.array_equal(out, arr)


def test_write_read_f32_precision():
    arr = np.array([1.0, 1.0 / 3.0])
    buf = io.BytesIO()
    nd.write_array(buf, arr, dtype=np.float32)
    buf.seek(0)
    out = nd.read_array(buf)
    assert np.array_equal(out, arr.astype(np.float32).astype(np.float64))


def test_header_layout():
    buf = io.BytesIO()
    nd.write_array(buf, np.zeros((2, 3)), dtype=np.float32)
    raw = buf.getvalue()
    assert raw[0] == 0  # f32 tag
    assert int.from_bytes(raw[1:5], "little") == 2  # rank
    assert int.from_bytes(raw[5:9], "little") == 2
    assert int.from_bytes(raw[9:13], "little") == 3
    assert len(raw) == 13 + 6 * 4


def test_unknown_dtype_tag_rejected():
    buf = io.BytesIO(bytes([7]) + (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + b"\x00" * 8)
    with pytest.raises(ValueError):
        nd.read_array(buf)


def test_truncated_payload_rejected():
    buf = io.BytesIO()
    nd.write_array(buf, np.ones(4))
    raw = buf.getvalue()[:-8]
    with pytest.raises(ValueError):
        nd.read_array(io.BytesIO(raw))


def test_scalar_rank_zero_round_trip():
    buf = io.BytesIO()
    nd.write_array(buf, np.array(2.5))
    buf.seek(0)
    out = nd.read_array(buf)
    assert out.shape == ()
    assert out == 2.5
