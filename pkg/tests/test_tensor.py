import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oodmon import tensor as T


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_conv(x, w, stride, pad, bias=None):
    c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((f, oh, ow))
    for o in range(f):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0 if bias is None else bias[o]
                for ch in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[ch, i * stride + u, j * stride + v] * w[o, ch, u, v]
                out[o, i, j] = acc
    return out


def naive_pool(x, k, s):
    c, h, w = x.shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((c, oh, ow))
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                out[ch, i, j] = x[ch, i * s:i * s + k, j * s:j * s + k].max()
    return out


def test_matmul_examples():
    np.testing.assert_array_equal(T.matmul(np.eye(2), np.array([[1, 2], [3, 4]])), [[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(np.array([[1, 2]]), np.array([[3], [4]])), [[11]])
    with pytest.raises(T.ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_random_shapes_match_loop_oracles():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.standard_normal((rng.integers(1, 6), rng.integers(1, 8)))
        b = rng.standard_normal((a.shape[1], rng.integers(1, 6)))
        assert np.max(np.abs(T.matmul(a, b) - naive_matmul(a, b))) < 1e-5

        c, f = rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(3, 9), rng.integers(3, 9)
        k, s, p = rng.integers(1, 4), rng.integers(1, 3), rng.integers(0, 2)
        x = rng.standard_normal((c, h, w)).astype(np.float32)
        ker = rng.standard_normal((f, c, k, k)).astype(np.float32)
        bias = rng.standard_normal(f).astype(np.float32)
        got = T.conv2d(x, ker, s, p, bias)
        assert np.max(np.abs(got - naive_conv(x.astype(np.float64), ker.astype(np.float64), s, p, bias))) < 1e-5

        pk = rng.integers(1, 4)
        ps = rng.integers(1, 3)
        assert np.max(np.abs(T.maxpool2d(x, pk, ps) - naive_pool(x, pk, ps))) < 1e-5


def test_conv_examples():
    x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    np.testing.assert_array_equal(T.conv2d(x, np.ones((1, 1, 1, 1), np.float32)), x)
    assert T.conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 2, 2))).tolist() == [[[4.0]]]
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    got = T.conv2d(x, w, 2, 1)
    assert got.shape == (4, 4, 4)
    assert np.max(np.abs(got - naive_conv(x, w, 2, 1))) < 1e-5
    with pytest.raises(ValueError):
        T.conv2d(x, w, 0)


def test_conv_batch_equals_single():
    rng = np.random.default_rng(5)
    xs = rng.standard_normal((3, 2, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    batch = T.conv2d(xs, w, 1, 1)
    for i in range(3):
        np.testing.assert_allclose(batch[i], T.conv2d(xs[i], w, 1, 1), atol=1e-12)


def test_maxpool_examples():
    assert T.maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2).tolist() == [[[4.0]]]
    np.testing.assert_array_equal(T.maxpool2d(np.full((2, 4, 4), 0.3), 2, 2), np.full((2, 2, 2), 0.3))
    x = np.random.default_rng(2).standard_normal((2, 6, 6))
    np.testing.assert_allclose(T.maxpool2d(x, 2, 2), naive_pool(x, 2, 2))
    with pytest.raises(T.ShapeError):
        T.maxpool2d(x, 7)


def test_logsumexp_examples():
    assert abs(T.logsumexp(np.zeros(10)) - np.log(10)) < 1e-12
    assert abs(T.logsumexp(np.array([1000.0, 1000.0])) - (1000 + np.log(2))) < 1e-9
    v = np.random.default_rng(1).standard_normal(20)
    assert abs(T.logsumexp(v, 2.0) - 2.0 * np.log(np.sum(np.exp(v / 2.0)))) < 1e-5
    with pytest.raises(ValueError):
        T.logsumexp(np.zeros(0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(0.1, 100))
def test_logsumexp_bounds(values, scale):
    v = np.array(values)
    out = T.logsumexp(v, scale)
    assert v.max() - 1e-9 <= out <= v.max() + scale * np.log(len(v)) + 1e-9


def test_covariance():
    assert np.all(T.covariance(np.array([[1.0, 2.0], [1.0, 2.0]])) == 0)
    assert T.covariance(np.array([[0.0], [2.0]])).tolist() == [[1.0]]
    x = np.random.default_rng(4).standard_normal((100, 5))
    mu = x.mean(axis=0)
    oracle = sum(np.outer(r - mu, r - mu) for r in x) / 100
    assert np.max(np.abs(T.covariance(x) - oracle)) <= 1e-10 * np.max(np.abs(oracle))
    with pytest.raises(ValueError):
        T.covariance(np.ones((1, 3)))


def test_cholesky():
    f = T.cholesky_spd(np.eye(3))
    np.testing.assert_array_equal(f.lower, np.eye(3))
    m = np.array([[4.0, 2.0], [2.0, 3.0]])
    assert np.max(np.abs(T.cholesky_spd(m).reconstruct() - m)) < 1e-10
    v = np.array([[1.0, 2.0, 3.0]])
    singular = v.T @ v
    f = T.cholesky_spd(singular)
    assert f.ridge > 0
    b = np.array([1.0, -1.0, 0.5])
    x = T.solve_spd(f, b)
    assert np.max(np.abs((singular + f.ridge * np.eye(3)) @ x - b)) < 1e-6
    with pytest.raises(ValueError):
        T.cholesky_spd(np.zeros((0, 0)))
    with pytest.raises(ValueError):
        T.cholesky_spd(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_solve_spd():
    b = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(T.solve_spd(T.cholesky_spd(np.eye(3)), b), b)
    rng = np.random.default_rng(7)
    a = rng.standard_normal((6, 6))
    m = a @ a.T + 6 * np.eye(6)
    b = rng.standard_normal(6)
    assert np.linalg.norm(m @ T.solve_spd(T.cholesky_spd(m), b) - b) < 1e-8
    assert np.all(T.solve_spd(T.cholesky_spd(m), np.zeros(6)) == 0)


def test_whitened_sq_norm_matches_inverse():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((4, 4))
    m = a @ a.T + np.eye(4)
    v = rng.standard_normal((5, 4))
    expect = np.einsum("ij,jk,ik->i", v, np.linalg.inv(m), v)
    np.testing.assert_allclose(T.whitened_sq_norm(T.cholesky_spd(m), v), expect, rtol=1e-10)


def test_top_eigenvectors():
    np.testing.assert_allclose(T.top_eigenvectors(np.diag([3.0, 2.0, 1.0]), 2), [[1, 0, 0], [0, 1, 0]])
    v = T.top_eigenvectors(np.eye(4), 1)[0]
    assert np.linalg.norm(np.eye(4) @ v - v) < 1e-8 and abs(np.linalg.norm(v) - 1) < 1e-12
    rng = np.random.default_rng(9)
    a = rng.standard_normal((8, 8))
    m = a @ a.T
    vecs = T.top_eigenvectors(m, 8)
    np.testing.assert_allclose(vecs @ vecs.T, np.eye(8), atol=1e-8)
    lams = np.einsum("ij,jk,ik->i", vecs, m, vecs)
    assert np.all(np.diff(lams) <= 1e-9)
    for lam, v in zip(lams, vecs):
        assert np.linalg.norm(m @ v - lam * v) < 1e-7
        assert v[np.flatnonzero(np.abs(v) > 1e-12)[0]] > 0
    with pytest.raises(ValueError):
        T.top_eigenvectors(m, 0)


def test_maxpool_backward_routes_to_first_max():
    x = np.array([[[[1.0, 1.0], [0.0, 1.0]]]])
    g = T.maxpool2d_backward(x, np.ones((1, 1, 1, 1)), 2, 2)
    assert g.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]
