import numpy as np
import pytest

from regionsep import autodiff as ad
from regionsep.autodiff import (
    ConfigError,
    ShapeError,
    Tensor,
    chunk,
    chunk_count,
    conv1d,
    conv1d_transpose,
    gradient_check,
    layer_norm,
    linear,
    matmul,
    multi_head_attention,
    overlap_add,
    prelu,
    relu,
    softmax,
    stack,
)


def rand_t(rng, *shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 3)))
    out = matmul(Tensor(np.eye(3)), a)
    np.testing.assert_allclose(out.data, a.data)


def test_matmul_hand_value():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_allclose(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = rand_t(rng, 3, 4)
    b = rand_t(rng, 4, 2)
    err = gradient_check(lambda: matmul(a, b).sum(), [a, b])
    assert err < 1e-6


def test_matmul_batched_gradient():
    rng = np.random.default_rng(2)
    a = rand_t(rng, 2, 3, 4)
    b = rand_t(rng, 2, 4, 3)
    err = gradient_check(lambda: matmul(a, b).sum(), [a, b])
    assert err < 1e-6


def test_matmul_broadcast_batch_gradient():
    rng = np.random.default_rng(3)
    a = rand_t(rng, 5, 2, 3)
    b = rand_t(rng, 3, 4)  # broadcast over the batch of a
    err = gradient_check(lambda: matmul(a, b).sum(), [a, b])
    assert err < 1e-6


# ---------------------------------------------------------------- conv1d


def test_conv1d_frame_count():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((1, 64000)))
    k = Tensor(rng.standard_normal((4, 1, 16)))
    assert conv1d(x, k, stride=8).shape == (4, 7999)


def test_conv1d_delta_kernel_is_identity():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((1, 50)))
    k = np.zeros((1, 1, 4))
    k[0, 0, 0] = 1.0
    out = conv1d(x, Tensor(k), stride=1)
    np.testing.assert_allclose(out.data[0], x.data[0, : out.shape[1]])


def test_conv1d_too_short_input():
    with pytest.raises(ShapeError, match="too short"):
        conv1d(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 1, 8))), stride=1)


def test_conv1d_gradient():
    rng = np.random.default_rng(6)
    x = rand_t(rng, 2, 20)
    k = rand_t(rng, 3, 2, 5)
    err = gradient_check(lambda: conv1d(x, k, stride=2).sum(), [x, k])
    assert err < 1e-6


# ---------------------------------------------------------------- conv1d_transpose


def test_conv_transpose_length_inverts_encoder_arithmetic():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((4, 7999)))
    k = Tensor(rng.standard_normal((4, 1, 16)))
    assert conv1d_transpose(x, k, stride=8).shape == (1, 64000)


def test_conv_transpose_zero_input():
    out = conv1d_transpose(Tensor(np.zeros((3, 5))), Tensor(np.ones((3, 1, 4))), stride=2)
    assert not out.data.any()


def test_conv_pair_adjoint_identity():
    # <conv1d(x,k), y> == <x, conv1d_transpose(y,k)> for random small tensors
    rng = np.random.default_rng(8)
    for _ in range(10):
        C, T, F, W, s = 2, 30, 3, 5, 2
        x = rng.standard_normal((C, T))
        k = Tensor(rng.standard_normal((F, C, W)))
        n = (T - W) // s + 1
        y = rng.standard_normal((F, n))
        lhs = float((conv1d(Tensor(x), k, stride=s).data * y).sum())
        # transpose covers only the (n-1)*s+W samples conv actually reads;
        # samples past that have zero adjoint image
        xt = np.zeros_like(x)
        back = conv1d_transpose(Tensor(y), k, stride=s).data
        xt[:, : back.shape[1]] = back
        rhs = float((x * xt).sum())
        assert abs(lhs - rhs) < 1e-10


def test_conv_transpose_gradient():
    rng = np.random.default_rng(9)
    x = rand_t(rng, 3, 7)
    k = rand_t(rng, 3, 2, 4)
    err = gradient_check(lambda: conv1d_transpose(x, k, stride=3).sum(), [x, k])
    assert err < 1e-6


# ---------------------------------------------------------------- attention


def mha_params(rng, feat):
    ps = {}
    for name in ("wq", "wk", "wv", "wo"):
        ps[name] = rand_t(rng, feat, feat)
        ps["b" + name[1]] = rand_t(rng, feat)
    return ps


def run_mha(x, ps, heads):
    return multi_head_attention(
        x, x, x, ps["wq"], ps["bq"], ps["wk"], ps["bk"],
        ps["wv"], ps["bv"], ps["wo"], ps["bo"], heads)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(10)
    x = rand_t(rng, 6, 8, requires_grad=False)
    _, attn = run_mha(x, mha_params(rng, 8), heads=4)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_single_position_weight_is_one():
    rng = np.random.default_rng(11)
    x = rand_t(rng, 1, 8, requires_grad=False)
    _, attn = run_mha(x, mha_params(rng, 8), heads=2)
    np.testing.assert_allclose(attn.data, np.ones((2, 1, 1)))


def test_attention_head_divisibility_error():
    rng = np.random.default_rng(12)
    x = rand_t(rng, 3, 6, requires_grad=False)
    with pytest.raises(ConfigError):
        run_mha(x, mha_params(rng, 6), heads=4)


def test_attention_gradient():
    rng = np.random.default_rng(13)
    x = rand_t(rng, 3, 4)
    ps = mha_params(rng, 4)
    err = gradient_check(
        lambda: run_mha(x, ps, heads=2)[0].sum(), [x] + list(ps.values()))
    assert err < 1e-5


def test_attention_batched_shapes():
    rng = np.random.default_rng(14)
    x = rand_t(rng, 5, 7, 3, 8, requires_grad=False)
    out, attn = run_mha(x, mha_params(rng, 8), heads=4)
    assert out.shape == (5, 7, 3, 8)
    assert attn.shape == (5, 7, 4, 3, 3)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- pointwise kernels


def test_layer_norm_constant_vector_is_zero_before_affine():
    x = Tensor(np.full((4, 6), 3.7))
    out = layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-9)


def test_relu_values():
    out = relu(Tensor([-1.0, 2.0]))
    np.testing.assert_allclose(out.data, [0.0, 2.0])


def test_prelu_slope_gradient_matches_finite_differences():
    rng = np.random.default_rng(15)
    x = rand_t(rng, 10)
    slope = Tensor(np.array(0.3), requires_grad=True)
    err = gradient_check(lambda: prelu(x, slope).sum(), [x, slope])
    assert err < 1e-7


def test_pointwise_gradients():
    rng = np.random.default_rng(16)
    for fn in (ad.sigmoid, ad.tanh, relu, ad.texp):
        x = Tensor(rng.standard_normal(12) + 0.05, requires_grad=True)
        assert gradient_check(lambda f=fn, t=x: f(t).sum(), [x]) < 1e-5
    x = Tensor(rng.uniform(0.5, 2.0, 12), requires_grad=True)
    assert gradient_check(lambda: ad.tlog(x).sum(), [x]) < 1e-6
    assert gradient_check(lambda: ad.tsqrt(x).sum(), [x]) < 1e-6


def test_softmax_rows_normalized_and_gradient():
    rng = np.random.default_rng(17)
    x = rand_t(rng, 3, 5)
    out = softmax(x, axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    w = rng.standard_normal((3, 5))  # non-uniform weights exercise the jacobian
    err = gradient_check(lambda: (softmax(x, axis=-1) * w).sum(), [x])
    assert err < 1e-6


def test_layer_norm_gradient():
    rng = np.random.default_rng(18)
    x = rand_t(rng, 4, 6)
    g = rand_t(rng, 6)
    b = rand_t(rng, 6)
    w = rng.standard_normal((4, 6))
    err = gradient_check(lambda: (layer_norm(x, g, b) * w).sum(), [x, g, b])
    assert err < 1e-5


# ---------------------------------------------------------------- chunk / overlap-add


@pytest.mark.parametrize("n,k,q", [(250, 250, 1), (500, 250, 3), (7999, 250, 63)])
def test_chunk_count_formula(n, k, q):
    assert chunk_count(n, k) == q


def test_chunk_shapes_and_padding():
    rng = np.random.default_rng(19)
    x = Tensor(rng.standard_normal((11, 3)))
    out = chunk(x, 4)
    assert out.shape == (chunk_count(11, 4), 4, 3)
    # last chunk is zero-padded beyond frame 11
    assert not out.data[-1, 3:, :].any() or 11 % 2 == 1


def test_chunk_config_errors():
    with pytest.raises(ConfigError):
        chunk(Tensor(np.zeros((5, 2))), 0)
    with pytest.raises(ConfigError):
        chunk(Tensor(np.zeros((5, 2))), 3)


def test_overlap_add_rectangular_window_identity():
    # direct-summation oracle: interior frames doubled, first/last K/2 single
    rng = np.random.default_rng(20)
    n, k = 20, 8
    x = rng.standard_normal((n, 2))
    out = overlap_add(chunk(Tensor(x), k), n).data
    weights = np.zeros(n)
    hop = k // 2
    for q in range(chunk_count(n, k)):
        lo = q * hop
        weights[lo:min(lo + k, n)] += 1.0
    np.testing.assert_allclose(out, x * weights[:, None], atol=1e-12)
    np.testing.assert_allclose(weights[:hop], 1.0)
    np.testing.assert_allclose(weights[-hop:], 1.0)
    np.testing.assert_allclose(weights[hop:-hop], 2.0)


def test_overlap_add_single_chunk_identity_trim():
    rng = np.random.default_rng(21)
    x = rng.standard_normal((6, 2))
    out = overlap_add(chunk(Tensor(x), 6), 6).data
    np.testing.assert_allclose(out, x)


def test_overlap_add_geometry_mismatch():
    with pytest.raises(ShapeError):
        overlap_add(Tensor(np.zeros((5, 4, 2))), 6)


def test_chunk_overlap_add_gradients():
    rng = np.random.default_rng(22)
    x = rand_t(rng, 9, 2)
    w = rng.standard_normal((chunk_count(9, 4), 4, 2))
    assert gradient_check(lambda: (chunk(x, 4) * w).sum(), [x]) < 1e-8
    c = rand_t(rng, 4, 4, 2)
    w2 = rng.standard_normal((9, 2))
    assert gradient_check(lambda: (overlap_add(c, 9) * w2).sum(), [c]) < 1e-8


def test_chunk_batched_matches_per_channel():
    rng = np.random.default_rng(23)
    x = rng.standard_normal((3, 10, 4))
    batched = chunk(Tensor(x), 4).data
    for m in range(3):
        np.testing.assert_allclose(batched[m], chunk(Tensor(x[m]), 4).data)


# ---------------------------------------------------------------- graph behavior


def test_shared_subexpression_accumulates():
    # duplicated-expression oracle: y = s + s must match y = s1 + s2
    x = Tensor(np.array([1.5, -2.0, 0.5]), requires_grad=True)
    s = (x * x).sum()
    (s + s).backward()
    shared = x.grad.copy()

    x2 = Tensor(x.data.copy(), requires_grad=True)
    ((x2 * x2).sum() + (x2 * x2).sum()).backward()
    np.testing.assert_allclose(shared, x2.grad)


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        out = relu(matmul(x, w)).sum()
        out.backward()
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    o1, gx1, gw1 = run()
    o2, gx2, gw2 = run()
    assert np.array_equal(o1, o2)
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_no_grad_disables_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad and y._parents == ()


def test_composed_two_layer_network_gradients_many_seeds():
    # composed toy network exercised across >= 20 seeds
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rand_t(rng, 3, 6, requires_grad=False)
        w1, b1 = rand_t(rng, 6, 5), rand_t(rng, 5)
        w2, b2 = rand_t(rng, 5, 2), rand_t(rng, 2)

        def net():
            h = relu(linear(x, w1, b1))
            return (ad.tanh(linear(h, w2, b2)) ** 2).sum()

        assert gradient_check(net, [w1, b1, w2, b2]) < 1e-4


def test_getitem_and_stack_gradients():
    rng = np.random.default_rng(24)
    x = rand_t(rng, 4, 3)
    assert gradient_check(lambda: (x[1:3] * 2.0).sum(), [x]) < 1e-8
    a, b = rand_t(rng, 3), rand_t(rng, 3)
    w = rng.standard_normal((2, 3))
    assert gradient_check(lambda: (stack([a, b]) * w).sum(), [a, b]) < 1e-8


def test_float32_storage_supported():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    out = (x * x).sum()
    out.backward()
    assert x.data.dtype == np.float32
    assert x.grad.dtype == np.float32
