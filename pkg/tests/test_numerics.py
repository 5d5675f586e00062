import zlib
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustseg.numerics import FormatError, Graph, ShapeError, apply_op, finite_diff_check, svd
from robustseg.numerics import autodiff as ad
from robustseg.numerics.bundle import decode_bundle, encode_bundle
from robustseg.numerics.tensor import decode_tensor, encode_tensor


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oi in range(o):
            for y in range(ho):
                for x_ in range(wo):
                    acc = b[oi] if b is not None else 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += w[oi, ci, ky, kx] * xp[bi, ci, y * stride + ky, x_ * stride + kx]
                    out[bi, oi, y, x_] = acc
    return out


def test_mse_relu_trivial():
    assert apply_op("mse", np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0
    np.testing.assert_array_equal(apply_op("relu", np.array([-1.0, 0.0, 2.0])), [0, 0, 2])


def test_conv_all_ones_is_nine():
    out = apply_op("conv2d", np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), stride=1, pad=0)
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
def test_conv_matches_direct_summation(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad + k)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(ad.conv2d(x, w, b, stride, pad), naive_conv(x, w, b, stride, pad), atol=1e-12)


def test_shape_mismatch_names_operator_and_shapes():
    with pytest.raises(ShapeError, match=r"add: shape mismatch \(2,\) vs \(3,\)"):
        ad.add(np.zeros(2), np.zeros(3))
    with pytest.raises(ShapeError, match="conv2d"):
        ad.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_backward_trivial_examples():
    g = Graph()
    x = g.leaf([3.0])
    assert g.backward(ad.mse(x, np.zeros(1)))[x][0] == pytest.approx(6.0)
    g = Graph()
    x = g.leaf([0.0])
    assert g.backward(ad.mse(ad.sigmoid(x), np.ones(1)))[x][0] == pytest.approx(2 * (0.5 - 1) * 0.5 * 0.5)


def test_backward_rejects_non_scalar_root():
    g = Graph()
    x = g.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        g.backward(ad.relu(x))


def test_unreached_leaf_gets_zero_gradient_and_intermediates_are_not_exported():
    g = Graph()
    x, y = g.leaf(np.ones(2)), g.leaf(np.ones(3))
    h = ad.scale(x, 2.0)
    grads = g.backward(ad.mse(h, np.zeros(2)))
    assert set(grads) == {x, y}
    np.testing.assert_array_equal(grads[y], 0.0)


def test_graph_is_topologically_ordered():
    g = Graph()
    x = g.leaf(np.ones((1, 2, 4, 4)))
    out = ad.mse(ad.avgpool2(ad.relu(x)), np.zeros((1, 2, 2, 2)))
    assert out.kind == "mse"
    for node in g.nodes:
        assert all(inp.index < node.index for inp in node.inputs if isinstance(inp, ad.Node))


RNG = np.random.default_rng(1234)
C = {name: RNG.standard_normal(shape) for name, shape in {
    "b42": (4, 2), "a34": (3, 4), "w3233": (3, 2, 3, 3), "x2255": (2, 2, 5, 5),
    "x2244": (2, 2, 4, 4), "w3211": (3, 2, 1, 1), "b45": (4, 5)}.items()}
OPERATOR_CASES = {
    "matmul": (lambda a: ad.mse(ad.matmul(a, C["b42"]), np.ones((3, 2))), (3, 4)),
    "matmul_right": (lambda b: ad.mse(ad.matmul(C["a34"], b), np.ones((3, 2))), (4, 2)),
    "conv2d_input": (lambda x: ad.mse(ad.conv2d(x, C["w3233"], None, 2, 1), np.zeros((1, 3, 3, 3))), (1, 2, 5, 5)),
    "conv2d_weight": (lambda w: ad.mse(ad.conv2d(C["x2255"], w, None, 1, 1), np.zeros((2, 3, 5, 5))), (3, 2, 3, 3)),
    "conv2d_bias": (lambda b: ad.mse(ad.conv2d(C["x2244"], C["w3211"], b), np.ones((2, 3, 4, 4))), (3,)),
    "relu": (lambda x: ad.mse(ad.relu(x), np.full((5, 4), 0.3)), (5, 4)),
    "sigmoid": (lambda x: ad.mse(ad.sigmoid(x), np.full((6,), 0.2)), (6,)),
    "add": (lambda x: ad.mse(ad.add(x, np.linspace(0, 1, 6)), np.zeros(6)), (6,)),
    "scale": (lambda x: ad.mse(ad.scale(x, -2.5), np.ones((2, 3))), (2, 3)),
    "concat_channels": (lambda x: ad.mse(ad.concat_channels([x, np.ones((1, 2, 3, 3))]), np.zeros((1, 4, 3, 3))), (1, 2, 3, 3)),
    "upsample2": (lambda x: ad.mse(ad.upsample2(x), np.linspace(-1, 1, 64).reshape(1, 1, 8, 8)), (1, 1, 4, 4)),
    "avgpool2": (lambda x: ad.mse(ad.avgpool2(x), np.ones((1, 2, 2, 2))), (1, 2, 4, 4)),
    "channel_zero": (lambda x: ad.mse(ad.channel_zero(x, 1), np.ones((3, 2, 2))), (3, 2, 2)),
    "channel_gather": (lambda x: ad.mse(ad.channel_gather(x, [2, 0, 2]), np.ones((3, 2, 2))), (4, 2, 2)),
    "scale_columns": (lambda p: ad.mse(ad.matmul(ad.scale_columns(C["a34"], p), C["b45"]), np.ones((3, 5))), (4,)),
    "reshape": (lambda x: ad.mse(ad.reshape(x, (6,)), np.arange(6.0)), (2, 3)),
    "depth_to_space": (lambda x: ad.mse(ad.depth_to_space(x, 2), np.linspace(0, 1, 32).reshape(1, 2, 4, 4)), (1, 8, 2, 2)),
    "wsse": (lambda x: ad.wsse(x, np.ones((2, 3)), np.array([[0.5], [2.0]])), (2, 3)),
    "bce_logits": (lambda z: ad.bce_logits(z, (np.arange(8) % 2).reshape(2, 4).astype(float)), (2, 4)),
}


@pytest.mark.parametrize("name", sorted(OPERATOR_CASES))
def test_operator_gradient_matches_finite_differences(name):
    fn, shape = OPERATOR_CASES[name]
    x = np.random.default_rng(zlib.crc32(name.encode())).standard_normal(shape)
    assert finite_diff_check(fn, x, probes=50, step=1e-6) <= 1e-5


@pytest.mark.parametrize("name", ["add", "scale", "matmul", "concat_channels", "reshape", "wsse"])
def test_quadratic_losses_match_to_rounding(name):
    fn, shape = OPERATOR_CASES[name]
    x = np.random.default_rng(7).standard_normal(shape)
    assert finite_diff_check(fn, x, probes=50, step=1e-6) <= 1e-8


def test_finite_diff_sum_of_squares():
    def f(x):
        return ad.scale(ad.mse(x, np.zeros(10)), 10.0)
    assert finite_diff_check(f, np.random.default_rng(0).standard_normal(10)) <= 1e-8


def test_finite_diff_rejects_non_finite():
    def f(x):
        return ad.mse(ad.scale(x, 1e300), np.zeros(3))
    with pytest.raises(ValueError):
        finite_diff_check(f, np.ones(3) * 1e10, probes=3)


def test_backward_matches_direct_vjp_chain():
    # relu(conv) -> upsample -> mse spelled out by hand
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 1, 3, 3))
    w = rng.standard_normal((1, 1, 1, 1))
    g = Graph()
    xl = g.leaf(x)
    target = np.zeros((1, 1, 6, 6))
    out = ad.mse(ad.upsample2(ad.relu(ad.conv2d(xl, w))), target)
    pre = x * w[0, 0, 0, 0]
    up = np.repeat(np.repeat(np.maximum(pre, 0), 2, -2), 2, -1)
    dup = 2 * up / up.size
    dpre = dup.reshape(1, 1, 3, 2, 3, 2).sum(axis=(3, 5)) * (pre > 0)
    np.testing.assert_allclose(g.backward(out)[xl], dpre * w[0, 0, 0, 0], atol=1e-15)


# ---------------------------------------------------------------- SVD

def check_factors(w, f, tol=1e-8):
    r = min(w.shape)
    assert f.U.shape == (w.shape[0], r) and f.V.shape == (w.shape[1], r) and f.p.shape == (r,)
    assert np.abs(f.reconstruct() - w).max() <= tol
    assert np.abs(f.U.T @ f.U - np.eye(r)).max() <= tol
    assert np.abs(f.V.T @ f.V - np.eye(r)).max() <= tol
    assert np.all(f.p >= 0) and np.all(np.diff(f.p) <= 0)
    pivots = np.argmax(np.abs(f.U), axis=0)
    assert np.all(f.U[pivots, np.arange(r)] >= 0)


def test_svd_identity_and_diagonal():
    f = svd(np.eye(3))
    np.testing.assert_array_equal(f.p, [1, 1, 1])
    np.testing.assert_array_equal(f.reconstruct(), np.eye(3))
    np.testing.assert_allclose(svd(np.diag([3.0, 1.0])).p, [3, 1])
    np.testing.assert_allclose(svd(np.diag([1.0, 3.0])).p, [3, 1])


def test_svd_random_8x5():
    rng = np.random.default_rng(0)
    for _ in range(100):
        w = rng.standard_normal((8, 5))
        f = svd(w)
        check_factors(w, f)
        np.testing.assert_allclose(f.p, np.linalg.svd(w, compute_uv=False), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_svd_round_trip_up_to_64(d, k, seed):
    w = np.random.default_rng(seed).standard_normal((d, k))
    check_factors(w, svd(w))


def test_svd_rank_deficient_and_zero():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 9))
    f = svd(w)
    check_factors(w, f)
    assert np.all(f.p[2:] == 0)
    check_factors(np.zeros((3, 4)), svd(np.zeros((3, 4))))


def test_svd_orthogonal_matrix_has_unit_singular_values():
    q, _ = np.linalg.qr(np.random.default_rng(2).standard_normal((12, 12)))
    np.testing.assert_allclose(svd(q).p, 1.0, atol=1e-8)


def test_svd_is_bitwise_deterministic_and_pure():
    w = np.random.default_rng(9).standard_normal((16, 144))
    before = w.copy()
    a, b = svd(w), svd(w)
    np.testing.assert_array_equal(w, before)
    for x, y in ((a.U, b.U), (a.p, b.p), (a.V, b.V)):
        assert x.tobytes() == y.tobytes()


# ---------------------------------------------------------------- serialization

def test_tensor_round_trip_bitwise():
    x = np.random.default_rng(0).standard_normal((2, 3, 4))
    y, end = decode_tensor(encode_tensor(x))
    assert y.tobytes() == x.tobytes() and y.shape == x.shape and end == len(encode_tensor(x))


def test_tensor_record_is_little_endian_row_major():
    raw = encode_tensor(np.array([[1.0, 2.0]]))
    assert raw[:4] == b"TNSR"
    assert raw[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_truncated_and_corrupted_records_are_rejected():
    raw = encode_tensor(np.ones((2, 2)))
    with pytest.raises(FormatError, match="truncated"):
        decode_tensor(raw[:-3])
    bad = bytearray(raw)
    bad[8:16] = (3).to_bytes(8, "little")  # first extent 2 -> 3
    with pytest.raises(FormatError, match="shape"):
        decode_tensor(bytes(bad))


def test_bundle_round_trip():
    meta = {"b": 1, "a": [1, 2]}
    tensors = {"x": np.arange(3.0), "y": np.eye(2)}
    m2, t2 = decode_bundle(encode_bundle(meta, tensors))
    assert m2 == meta and list(t2) == ["x", "y"]
    assert all(t2[k].tobytes() == tensors[k].tobytes() for k in tensors)
    with pytest.raises(FormatError):
        decode_bundle(encode_bundle(meta, tensors)[:-1])
