"""Cross-backend agreement: the compiled kernels and the numpy fallback must
agree bitwise on matmul (shared summation order) and to float64 noise on the
transcendental kernels."""

import numpy as np
import pytest

from dyrex import _pykernels, backend


def _ext_or_skip():
    try:
        from dyrex import _ckernels
    except ImportError:
        pytest.skip("compiled kernels not available")
    return _ckernels


def _cases(rng, n=10):
    for _ in range(n):
        m, kk, nn = (int(v) for v in rng.integers(1, 12, size=3))
        yield (
            np.ascontiguousarray(rng.normal(size=(m, kk)) * 10),
            np.ascontiguousarray(rng.normal(size=(kk, nn))),
        )


def test_matmul_family_bitwise_identical(rng):
    ext = _ext_or_skip()
    for a, b in _cases(rng):
        assert np.array_equal(ext.matmul(a, b), _pykernels.matmul(a, b))
        at = np.ascontiguousarray(a.T)
        assert np.array_equal(ext.matmul_tn(at, b), _pykernels.matmul_tn(at, b))
        bt = np.ascontiguousarray(b.T)
        assert np.array_equal(ext.matmul_nt(a, bt), _pykernels.matmul_nt(a, bt))


def test_pointwise_kernels_agree(rng):
    ext = _ext_or_skip()
    x = np.ascontiguousarray(rng.normal(size=(9, 14)) * 4)
    mask = np.ascontiguousarray((rng.random((9, 14)) < 0.6).astype(float))
    mask[:, 3] = 1.0
    g = np.ascontiguousarray(rng.normal(size=(9, 14)))
    gamma = rng.normal(size=14) + 1.0
    beta = rng.normal(size=14)

    for msk in (None, mask):
        pe = ext.softmax_rows(x, msk)
        pp = _pykernels.softmax_rows(x, msk)
        assert np.max(np.abs(pe - pp)) < 1e-13
        assert np.max(np.abs(ext.softmax_rows_grad(pe, g, msk)
                             - _pykernels.softmax_rows_grad(pp, g, msk))) < 1e-13

    ye, xhe, ise = ext.layer_norm_rows(x, gamma, beta, 1e-5)
    yp, xhp, isp = _pykernels.layer_norm_rows(x, gamma, beta, 1e-5)
    assert np.max(np.abs(ye - yp)) < 1e-12
    ge = ext.layer_norm_rows_grad(g, xhe, ise, gamma)
    gp = _pykernels.layer_norm_rows_grad(g, xhp, isp, gamma)
    for ae, ap in zip(ge, gp):
        assert np.max(np.abs(ae - ap)) < 1e-12

    assert np.max(np.abs(ext.gelu(x) - _pykernels.gelu(x))) < 1e-13
    assert np.max(np.abs(ext.gelu_grad(x, g) - _pykernels.gelu_grad(x, g))) < 1e-13

    bias = rng.normal(size=14)
    assert np.array_equal(ext.add_row_bias(x, bias), _pykernels.add_row_bias(x, bias))
    assert np.max(np.abs(ext.col_sums(x) - _pykernels.col_sums(x))) < 1e-12


def test_env_selection_roundtrip():
    previous = backend.name()
    try:
        assert backend.use("py") == previous
        assert backend.name() == "py"
        backend.use("auto")
        assert backend.name() in ("ext", "py")
    finally:
        backend.use(previous)
