"""Pure-Python (numpy) kernel backend.

Same call surface as the compiled ``_ckernels`` extension. All arrays are
C-contiguous float64; validation happens in ``numkit``, not here.

``matmul`` accumulates over the inner index in ascending order (one rank-1
update per k), which makes it bit-identical to a naive triple loop -- the
reproducibility contract the compiled backend also honors. The remaining
reductions use numpy's (deterministic) pairwise summation.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k]
    return out


def matmul_tn(a, b):
    """a.T @ b with ascending-k accumulation (k runs over rows of a and b)."""
    out = np.zeros((a.shape[1], b.shape[1]))
    for k in range(a.shape[0]):
        out += a[k][:, None] * b[k]
    return out


def matmul_nt(a, b):
    """a @ b.T with ascending-k accumulation (k runs over columns)."""
    out = np.zeros((a.shape[0], b.shape[0]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[:, k]
    return out


def add_row_bias(x, bias):
    return x + bias


def col_sums(x):
    return x.sum(axis=0)


def softmax_rows(x, mask):
    """Row-wise exp-normalize; masked entries get exactly 0 probability.

    Caller guarantees every row has at least one allowed entry.
    """
    if mask is None:
        shifted = x - x.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        return p / p.sum(axis=1, keepdims=True)
    allowed = mask > 0.0
    neg = np.where(allowed, x, -np.inf)
    shifted = x - neg.max(axis=1, keepdims=True)
    p = np.where(allowed, np.exp(shifted), 0.0)
    return p / p.sum(axis=1, keepdims=True)


def softmax_rows_grad(p, grad_out, mask):
    dot = (p * grad_out).sum(axis=1, keepdims=True)
    gx = p * (grad_out - dot)
    if mask is not None:
        gx = np.where(mask > 0.0, gx, 0.0)
    return gx


def layer_norm_rows(x, gamma, beta, eps):
    """Returns (y, xhat, inv_std); xhat and inv_std are the backward cache."""
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[:, None]
    return xhat * gamma + beta, xhat, inv_std


def layer_norm_rows_grad(grad_out, xhat, inv_std, gamma):
    d = xhat.shape[1]
    dxhat = grad_out * gamma
    s1 = dxhat.sum(axis=1, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=1, keepdims=True)
    grad_x = inv_std[:, None] * (dxhat - s1 / d - xhat * (s2 / d))
    grad_gamma = (grad_out * xhat).sum(axis=0)
    grad_beta = grad_out.sum(axis=0)
    return grad_x, grad_gamma, grad_beta


def gelu(x):
    """Exact (erf-based) x * Phi(x)."""
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x, grad_out):
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    phi_pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return grad_out * (phi_cdf + x * phi_pdf)
