"""Autodiff core: op semantics, tape backward, gradients vs finite differences."""

import numpy as np
import pytest

import tdsa.tensor as T
from tdsa.oracle import fd_gradient, max_rel_error
from tdsa.tensor import (
    ContractError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor4,
    load_tensor4,
    save_tensor4,
)


def _fd_check(build, x0, tol=1e-6):
    """Max relative error between tape gradient and central differences.

    ``build`` maps a leaf tensor to a scalar node; it is re-run on a fresh
    tape for every probe point.
    """
    x0 = np.asarray(x0, dtype=np.float64)

    def scalar(a):
        return build(Tape().leaf(a)).item()

    tape = Tape()
    x = tape.leaf(x0)
    node = build(x)
    tape.backward(node)
    err = max_rel_error(fd_gradient(scalar, x0), tape.grad(x))
    assert err < tol, f"gradient mismatch: max rel err {err:.3e} >= {tol}"


def _weighted_sum(t, seed=7):
    """Scalar with distinct per-coordinate sensitivities."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return T.sum_all(T.elementwise_mul(t, Tensor4.const(w)))


# -- construction contracts ----------------------------------------------------

def test_tensor_requires_four_dims():
    with pytest.raises(ShapeError):
        Tensor4(np.zeros((2, 3)))


def test_tensor_rejects_non_finite():
    bad = np.ones((1, 1, 1, 2))
    bad[0, 0, 0, 1] = np.nan
    with pytest.raises(NonFiniteError):
        Tensor4(bad)


def test_item_requires_scalar_shape():
    with pytest.raises(ContractError):
        Tensor4(np.zeros((1, 1, 1, 2))).item()


# -- elementwise multiply ------------------------------------------------------

def test_mul_small_values():
    a = Tensor4.const(np.array([2.0, 3.0]).reshape(1, 1, 1, 2))
    b = Tensor4.const(np.array([4.0, 5.0]).reshape(1, 1, 1, 2))
    np.testing.assert_array_equal(T.elementwise_mul(a, b).data.ravel(), [8.0, 15.0])


def test_mul_by_ones_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    out = T.elementwise_mul(Tensor4.const(x), Tensor4.const(np.ones_like(x)))
    np.testing.assert_array_equal(out.data, x)


def test_mul_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        T.elementwise_mul(Tensor4.const(np.zeros((1, 1, 2, 2))),
                          Tensor4.const(np.zeros((1, 1, 2, 3))))


def test_mul_gradient_vs_finite_differences():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(2, 4, 3, 3))
    other = Tensor4.const(rng.normal(size=(2, 4, 3, 3)))
    _fd_check(lambda x: T.sum_all(T.elementwise_mul(x, other)), x0)
    # and through both operands at once
    _fd_check(lambda x: T.sum_all(T.elementwise_mul(x, x)), x0)


# -- sigmoid -------------------------------------------------------------------

def test_sigmoid_at_zero():
    out = T.sigmoid(Tensor4.const(np.zeros((1, 1, 1, 1))))
    assert out.item() == 0.5


def test_sigmoid_symmetry():
    x = np.random.default_rng(2).normal(scale=3.0, size=(1, 2, 3, 3))
    s = T.sigmoid(Tensor4.const(x)).data + T.sigmoid(Tensor4.const(-x)).data
    np.testing.assert_allclose(s, 1.0, rtol=0, atol=1e-15)


def test_sigmoid_output_in_open_interval():
    x = np.random.default_rng(3).normal(scale=10.0, size=(2, 2, 4, 4))
    s = T.sigmoid(Tensor4.const(x)).data
    assert np.all(s > 0.0) and np.all(s < 1.0)


def test_sigmoid_gradient_vs_finite_differences():
    x0 = np.random.default_rng(4).normal(size=(1, 2, 3, 3))
    _fd_check(lambda x: _weighted_sum(T.sigmoid(x)), x0)


def test_sigmoid_gradient_closed_form():
    x0 = np.random.default_rng(5).normal(size=(1, 1, 2, 2))
    tape = Tape()
    x = tape.leaf(x0)
    s = T.sigmoid(x)
    tape.backward(T.sum_all(s))
    np.testing.assert_allclose(tape.grad(x), s.data * (1 - s.data), rtol=1e-12)


# -- spatial softmax -----------------------------------------------------------

def test_spatial_softmax_uniform_on_constant():
    out = T.spatial_softmax(Tensor4.const(np.full((1, 1, 1, 2), 3.7)))
    np.testing.assert_allclose(out.data.ravel(), [0.5, 0.5], atol=1e-15)


def test_spatial_softmax_log3_case():
    x = np.array([np.log(3.0), 0.0]).reshape(1, 1, 1, 2)
    out = T.spatial_softmax(Tensor4.const(x))
    np.testing.assert_allclose(out.data.ravel(), [0.75, 0.25], atol=1e-12)


def test_spatial_softmax_sums_to_one():
    x = np.random.default_rng(6).normal(scale=5.0, size=(3, 4, 5, 6))
    out = T.spatial_softmax(Tensor4.const(x)).data
    np.testing.assert_allclose(out.sum(axis=(2, 3)), 1.0, rtol=0, atol=1e-12)


def test_spatial_softmax_shift_invariance():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 4, 4))
    shifted = x + rng.normal(size=(2, 3, 1, 1))  # per-channel constants
    a = T.spatial_softmax(Tensor4.const(x)).data
    b = T.spatial_softmax(Tensor4.const(shifted)).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_spatial_softmax_gradient_vs_finite_differences():
    x0 = np.random.default_rng(8).normal(size=(1, 2, 3, 3))
    _fd_check(lambda x: _weighted_sum(T.spatial_softmax(x)), x0)


# -- backward / tape -----------------------------------------------------------

def test_backward_of_sum_is_ones():
    x0 = np.random.default_rng(9).normal(size=(2, 3, 2, 2))
    tape = Tape()
    x = tape.leaf(x0)
    tape.backward(T.sum_all(x))
    np.testing.assert_array_equal(tape.grad(x), np.ones_like(x0))


def test_backward_of_sum_of_squares_is_2x():
    x0 = np.random.default_rng(10).normal(size=(1, 2, 3, 3))
    tape = Tape()
    x = tape.leaf(x0)
    tape.backward(T.sum_all(T.elementwise_mul(x, x)))
    np.testing.assert_allclose(tape.grad(x), 2 * x0, rtol=1e-12)


def test_backward_requires_scalar_root():
    tape = Tape()
    x = tape.leaf(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ContractError):
        tape.backward(x)


def test_backward_accumulates_over_fanout():
    # y = x + x must behave exactly like 2x
    x0 = np.random.default_rng(11).normal(size=(1, 1, 2, 2))
    tape = Tape()
    x = tape.leaf(x0)
    tape.backward(T.sum_all(T.add(x, x)))
    np.testing.assert_array_equal(tape.grad(x), np.full_like(x0, 2.0))


def test_shared_subexpression_matches_expanded_form():
    x0 = np.random.default_rng(12).normal(size=(1, 2, 2, 2))

    tape = Tape()
    x = tape.leaf(x0)
    s = T.sigmoid(x)
    tape.backward(T.sum_all(T.add(T.elementwise_mul(s, s), s)))
    shared = tape.grad(x)

    tape2 = Tape()
    x2 = tape2.leaf(x0)
    expanded = T.add(T.elementwise_mul(T.sigmoid(x2), T.sigmoid(x2)), T.sigmoid(x2))
    tape2.backward(T.sum_all(expanded))
    np.testing.assert_allclose(shared, tape2.grad(x2), rtol=1e-14)


def test_nodes_appear_in_topological_order():
    tape = Tape()
    x = tape.leaf(np.ones((1, 1, 1, 1)))
    y = T.sigmoid(x)
    z = T.add(y, x)
    assert x.node_id < y.node_id < z.node_id
    for nid, node in enumerate(tape.nodes):
        assert all(p < nid for p in node.parents)


def test_grad_of_unreached_leaf_is_zeros():
    tape = Tape()
    x = tape.leaf(np.ones((1, 1, 1, 2)))
    y = tape.leaf(np.ones((1, 1, 1, 2)))
    tape.backward(T.sum_all(x))
    np.testing.assert_array_equal(tape.grad(y), np.zeros((1, 1, 1, 2)))


def test_constant_folding_off_tape():
    out = T.add(Tensor4.const(np.ones((1, 1, 1, 1))), Tensor4.const(np.ones((1, 1, 1, 1))))
    assert out.tape is None and out.item() == 2.0


# -- reductions and shape ops --------------------------------------------------

def test_gap_averages_positions():
    x = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
    out = T.gap(Tensor4.const(x))
    np.testing.assert_allclose(out.data.ravel(), [1.5, 5.5])
    assert out.shape == (1, 2, 1, 1)


def test_mean_all_matches_numpy():
    x = np.random.default_rng(13).normal(size=(3, 2, 4, 5))
    assert T.mean_all(Tensor4.const(x)).item() == pytest.approx(x.mean(), rel=1e-14)


def test_reduction_gradients_vs_finite_differences():
    x0 = np.random.default_rng(14).normal(size=(2, 3, 3, 2))
    _fd_check(lambda x: _weighted_sum(T.gap(x)), x0)
    _fd_check(lambda x: _weighted_sum(T.spatial_sum(x)), x0)
    _fd_check(T.mean_all, x0)


def test_exp_log_affine_gradients():
    x0 = np.abs(np.random.default_rng(15).normal(size=(1, 2, 2, 3))) + 0.5
    _fd_check(lambda x: _weighted_sum(T.exp(x)), x0)
    _fd_check(lambda x: _weighted_sum(T.log(x)), x0)
    _fd_check(lambda x: _weighted_sum(T.affine(x, -2.5, 1.25)), x0)


def test_relu_forward_and_gradient():
    x = np.array([-1.0, 0.5, 2.0, -3.0]).reshape(1, 1, 1, 4)
    np.testing.assert_array_equal(T.relu(Tensor4.const(x)).data.ravel(),
                                  [0.0, 0.5, 2.0, 0.0])
    x0 = np.random.default_rng(16).normal(size=(2, 2, 3, 3))
    _fd_check(lambda t: _weighted_sum(T.relu(t)), x0)


def test_stop_gradient_blocks_flow():
    x0 = np.random.default_rng(17).normal(size=(1, 1, 2, 2))
    tape = Tape()
    x = tape.leaf(x0)
    tape.backward(T.sum_all(T.elementwise_mul(T.stop_gradient(x), x)))
    np.testing.assert_allclose(tape.grad(x), x0)  # only the live factor


def test_channel_slice_and_concat_roundtrip():
    x0 = np.random.default_rng(18).normal(size=(2, 6, 2, 2))
    x = Tensor4.const(x0)
    parts = [T.channel_slice(x, i, i + 2) for i in (0, 2, 4)]
    np.testing.assert_array_equal(T.concat_channels(parts).data, x0)
    _fd_check(lambda t: _weighted_sum(T.channel_slice(t, 1, 4), seed=3), x0)
    _fd_check(lambda t: _weighted_sum(
        T.concat_channels([T.channel_slice(t, 0, 3), T.channel_slice(t, 3, 6)]), seed=4), x0)


def test_channel_broadcasts():
    x0 = np.random.default_rng(19).normal(size=(2, 3, 2, 2))
    v = np.array([1.0, 0.0, 2.0]).reshape(1, 3, 1, 1)
    out = T.mul_channel(Tensor4.const(x0), Tensor4.const(v))
    np.testing.assert_array_equal(out.data, x0 * v)
    _fd_check(lambda t: _weighted_sum(T.mul_channel(t, Tensor4.const(v))), x0)
    _fd_check(lambda t: _weighted_sum(T.add_channel(t, Tensor4.const(v))), x0)


# -- channel-group max ---------------------------------------------------------

def test_channel_group_max_small_case():
    x = np.array([[1.0, 2.0], [3.0, 0.0]]).reshape(1, 2, 1, 2)
    out = T.channel_group_max(Tensor4.const(x), 2)
    np.testing.assert_array_equal(out.data.ravel(), [3.0, 2.0])


def test_channel_group_max_identity_for_group_of_one():
    x0 = np.random.default_rng(20).normal(size=(1, 3, 2, 2))
    np.testing.assert_array_equal(
        T.channel_group_max(Tensor4.const(x0), 1).data, x0)


def test_channel_group_max_dominates_members():
    x0 = np.random.default_rng(21).normal(size=(2, 6, 3, 3))
    out = T.channel_group_max(Tensor4.const(x0), 3).data
    grouped = x0.reshape(2, 2, 3, 3, 3)
    assert np.all(out[:, :, None] >= grouped)


def test_channel_group_max_requires_divisible_channels():
    with pytest.raises(ShapeError):
        T.channel_group_max(Tensor4.const(np.zeros((1, 5, 1, 1))), 2)


def test_channel_group_max_tie_routes_to_first_channel():
    x0 = np.zeros((1, 2, 1, 1))  # exact tie between the two channels
    tape = Tape()
    x = tape.leaf(x0)
    tape.backward(T.sum_all(T.channel_group_max(x, 2)))
    np.testing.assert_array_equal(tape.grad(x).ravel(), [1.0, 0.0])


def test_channel_group_max_gradient_vs_finite_differences():
    x0 = np.random.default_rng(22).normal(size=(2, 6, 3, 3))
    _fd_check(lambda t: _weighted_sum(T.channel_group_max(t, 3)), x0)


# -- cross entropy -------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    logits = Tensor4.const(np.zeros((2, 4, 1, 1)))
    out = T.softmax_cross_entropy(logits, np.array([0, 3]))
    assert out.item() == pytest.approx(np.log(4.0), rel=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ContractError):
        T.softmax_cross_entropy(Tensor4.const(np.zeros((1, 3, 1, 1))), np.array([3]))


def test_cross_entropy_requires_1x1_logits():
    with pytest.raises(ShapeError):
        T.softmax_cross_entropy(Tensor4.const(np.zeros((1, 3, 2, 1))), np.array([0]))


def test_cross_entropy_gradient_vs_finite_differences():
    x0 = np.random.default_rng(23).normal(size=(3, 5, 1, 1))
    y = np.array([0, 4, 2])
    _fd_check(lambda t: T.softmax_cross_entropy(t, y), x0)


# -- convolution ---------------------------------------------------------------

def _naive_conv(x, w, pad):
    n, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = h + 2 * pad - kh + 1, ww + 2 * pad - kw + 1
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    out[b, co, i, j] = np.sum(
                        xp[b, :, i:i + kh, j:j + kw] * w[co])
    return out


@pytest.mark.parametrize("pad", [0, 1])
def test_conv2d_matches_naive_loop(pad):
    rng = np.random.default_rng(24)
    x = rng.normal(size=(2, 3, 5, 4))
    w = rng.normal(size=(4, 3, 3, 3))
    out = T.conv2d(Tensor4.const(x), Tensor4.const(w), pad=pad)
    np.testing.assert_allclose(out.data, _naive_conv(x, w, pad), rtol=1e-12)


def test_conv2d_gradients_vs_finite_differences():
    rng = np.random.default_rng(25)
    x0 = rng.normal(size=(2, 2, 4, 4))
    w0 = rng.normal(size=(3, 2, 3, 3))
    _fd_check(lambda t: _weighted_sum(T.conv2d(t, Tensor4.const(w0), pad=1)), x0)
    _fd_check(lambda t: _weighted_sum(T.conv2d(Tensor4.const(x0), t, pad=1)), w0)


def test_conv2d_channel_mismatch_rejected():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor4.const(np.zeros((1, 3, 4, 4))),
                 Tensor4.const(np.zeros((2, 4, 3, 3))))


# -- max pooling ---------------------------------------------------------------

def test_maxpool2_forward():
    x = np.array([[1, 2, 5, 0],
                  [3, 4, 1, 1],
                  [0, 0, 2, 2],
                  [9, 0, 2, 2]], dtype=np.float64).reshape(1, 1, 4, 4)
    out = T.maxpool2(Tensor4.const(x))
    np.testing.assert_array_equal(out.data.reshape(2, 2), [[4, 5], [9, 2]])


def test_maxpool2_tie_routes_to_first_in_scan_order():
    x0 = np.full((1, 1, 2, 2), 3.0)  # four-way tie in a single window
    tape = Tape()
    x = tape.leaf(x0)
    tape.backward(T.sum_all(T.maxpool2(x)))
    np.testing.assert_array_equal(tape.grad(x).reshape(2, 2), [[1, 0], [0, 0]])


def test_maxpool2_requires_even_dims():
    with pytest.raises(ShapeError):
        T.maxpool2(Tensor4.const(np.zeros((1, 1, 3, 4))))


def test_maxpool2_gradient_vs_finite_differences():
    x0 = np.random.default_rng(26).normal(size=(2, 3, 4, 6))
    _fd_check(lambda t: _weighted_sum(T.maxpool2(t)), x0)


# -- batch norm ----------------------------------------------------------------

def test_batchnorm_train_normalizes_batch():
    rng = np.random.default_rng(27)
    x = rng.normal(loc=3.0, scale=2.0, size=(8, 3, 4, 4))
    gamma = Tensor4.const(np.ones((1, 3, 1, 1)))
    beta = Tensor4.const(np.zeros((1, 3, 1, 1)))
    out, mean, var = T.batchnorm(Tensor4.const(x), gamma, beta, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    np.testing.assert_allclose(mean, x.mean(axis=(0, 2, 3)), rtol=1e-12)


def test_batchnorm_eval_uses_running_stats():
    x = np.ones((2, 1, 2, 2))
    gamma = Tensor4.const(np.full((1, 1, 1, 1), 2.0))
    beta = Tensor4.const(np.full((1, 1, 1, 1), 1.0))
    out, _, _ = T.batchnorm(Tensor4.const(x), gamma, beta, training=False,
                            running_mean=np.array([0.5]),
                            running_var=np.array([4.0]))
    # 2*(1-0.5)/sqrt(4+eps)+1
    np.testing.assert_allclose(out.data, 2 * 0.5 / np.sqrt(4 + 1e-5) + 1, rtol=1e-12)


def test_batchnorm_gradients_vs_finite_differences():
    rng = np.random.default_rng(28)
    x0 = rng.normal(size=(4, 2, 3, 3))
    g0 = rng.normal(size=(1, 2, 1, 1))
    b0 = rng.normal(size=(1, 2, 1, 1))

    def wrt_x(t):
        out, _, _ = T.batchnorm(t, Tensor4.const(g0), Tensor4.const(b0), training=True)
        return _weighted_sum(out)

    def wrt_gamma(t):
        out, _, _ = T.batchnorm(Tensor4.const(x0), t, Tensor4.const(b0), training=True)
        return _weighted_sum(out)

    def wrt_beta(t):
        out, _, _ = T.batchnorm(Tensor4.const(x0), Tensor4.const(g0), t, training=True)
        return _weighted_sum(out)

    _fd_check(wrt_x, x0, tol=1e-5)
    _fd_check(wrt_gamma, g0)
    _fd_check(wrt_beta, b0)


# -- serialization -------------------------------------------------------------

def test_tensor_file_roundtrip(tmp_path):
    x = np.random.default_rng(29).normal(size=(2, 3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.t4"
    save_tensor4(path, Tensor4.const(x))
    back = load_tensor4(path)
    np.testing.assert_array_equal(back.data, x)
    assert back.dtype == np.float32


def test_tensor_file_layout(tmp_path):
    path = tmp_path / "t.t4"
    save_tensor4(path, Tensor4.const(np.zeros((1, 2, 3, 4), dtype=np.float32)))
    raw = path.read_bytes()
    assert raw[:4] == b"T4\x00\x00"
    assert np.frombuffer(raw[4:20], dtype="<u4").tolist() == [1, 2, 3, 4]
    assert len(raw) == 20 + 24 * 4


def test_tensor_file_header_validation(tmp_path):
    path = tmp_path / "bad.t4"
    path.write_bytes(b"XX\x00\x00" + b"\x00" * 16)
    with pytest.raises(ContractError):
        load_tensor4(path)
    path.write_bytes(b"T4\x00\x00" + np.array([1, 1, 1, 2], "<u4").tobytes()
                     + b"\x00" * 4)  # payload short one float
    with pytest.raises(ContractError):
        load_tensor4(path)
