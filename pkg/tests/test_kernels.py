import numpy as np
import pytest

from mixsup import _accel, kernels

needs_numba = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")

CONV_CASES = [((2, 3, 8, 8), 3, 2, 1), ((1, 4, 7, 5), 3, 1, 1), ((2, 2, 6, 6), 1, 1, 0),
              ((1, 1, 9, 9), 3, 2, 1)]


@needs_numba
@pytest.mark.parametrize("shape,k,stride,pad", CONV_CASES)
def test_im2col_paths_agree(shape, k, stride, pad):
    x = np.random.default_rng(0).normal(size=shape)
    a = kernels._im2col_numpy(x, k, stride, pad)
    b = kernels._im2col_numba(x, k, stride, pad)
    assert np.array_equal(a, b)


@needs_numba
@pytest.mark.parametrize("shape,k,stride,pad", CONV_CASES)
def test_col2im_paths_agree(shape, k, stride, pad):
    cols = kernels._im2col_numpy(np.zeros(shape), k, stride, pad)
    g = np.random.default_rng(1).normal(size=cols.shape)
    assert np.allclose(kernels._col2im_numpy(g, shape, k, stride, pad),
                       kernels._col2im_numba(g, shape, k, stride, pad), atol=1e-12)


@pytest.mark.parametrize("shape,k,stride,pad", CONV_CASES)
def test_col2im_is_adjoint(shape, k, stride, pad):
    rng = np.random.default_rng(2)
    x = rng.normal(size=shape)
    cols = kernels.im2col(x, k, stride, pad)
    c = rng.normal(size=cols.shape)
    lhs = float((cols * c).sum())
    rhs = float((x * kernels.col2im(c, shape, k, stride, pad)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_im2col_matches_direct_convolution():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    cols = kernels.im2col(x, 3, 2, 1)
    out = (w.reshape(3, -1) @ cols[0]).reshape(3, 3, 3)
    xp = np.pad(x[0], ((0, 0), (1, 1), (1, 1)))
    direct = np.zeros((3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                direct[o, i, j] = (w[o] * xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3]).sum()
    assert np.allclose(out, direct)


RESIZE_CASES = [((2, 4, 4), 8, 8), ((1, 16, 16), 4, 4), ((3, 5, 7), 9, 3), ((2, 8, 8), 8, 8)]


@needs_numba
@pytest.mark.parametrize("shape,oh,ow", RESIZE_CASES)
def test_resize_paths_agree(shape, oh, ow):
    rng = np.random.default_rng(4)
    x = rng.normal(size=shape)
    assert np.allclose(kernels._resize_numpy(x, oh, ow), kernels._resize_numba(x, oh, ow), atol=1e-12)
    g = rng.normal(size=shape[:-2] + (oh, ow))
    assert np.allclose(kernels._resize_backward_numpy(g, *shape[-2:]),
                       kernels._resize_backward_numba(g, *shape[-2:]), atol=1e-12)


@pytest.mark.parametrize("shape,oh,ow", RESIZE_CASES)
def test_resize_backward_is_adjoint(shape, oh, ow):
    rng = np.random.default_rng(5)
    x = rng.normal(size=shape)
    g = rng.normal(size=shape[:-2] + (oh, ow))
    lhs = float((kernels.resize_bilinear(x, oh, ow) * g).sum())
    rhs = float((x * kernels.resize_bilinear_backward(g, *shape[-2:])).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_resize_preserves_constants_and_matches_half_pixel_convention():
    x = np.full((1, 5, 6), 0.3)
    assert np.allclose(kernels.resize_bilinear(x, 11, 4), 0.3)
    # 2x upsampling of [0, 1] with half-pixel centres and edge clamping
    row = kernels.resize_bilinear(np.array([[[0.0, 1.0]]]), 1, 4)[0, 0]
    assert np.allclose(row, [0.0, 0.25, 0.75, 1.0])


def test_interp_matrix_rows_sum_to_one():
    for n_in, n_out in [(4, 16), (16, 4), (7, 3), (3, 7)]:
        assert np.allclose(kernels.interp_matrix(n_in, n_out).sum(axis=1), 1.0)


@needs_numba
def test_m2b_paths_agree():
    rng = np.random.default_rng(6)
    for _ in range(50):
        p = rng.random(tuple(rng.integers(1, 12, 2)))
        fa = kernels._m2b_forward_numpy(p)
        fb = kernels._m2b_forward_numba(p)
        for a, b in zip(fa, fb):
            assert np.array_equal(a, b)
        g = rng.normal(size=p.shape)
        assert np.allclose(kernels._m2b_backward_numpy(g, *fa[1:]),
                           kernels._m2b_backward_numba(g, *fb[1:]), atol=1e-12)


def test_backend_reports_flag():
    assert _accel.backend() in ("numba", "numpy")
    assert _accel.USE_NUMBA == (_accel.HAVE_NUMBA and not _accel.DISABLED_BY_ENV)
