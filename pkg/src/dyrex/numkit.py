"""Dense float64 matrices, the elementary differentiable ops, and parameter
storage.

A Matrix is a C-contiguous 2-D float64 ndarray. All computation is 64-bit;
reductions use a fixed summation order per backend, so every run is
bit-reproducible. Forward ops route through the active kernel backend
(``dyrex.backend``); the backward transforms here return exact analytic
gradients and leave accumulation into parameter buffers to the callers.

Matrices are treated as immutable after construction except where an op is
documented as in-place (optimizer updates, gradient buffers).
"""

import os
import struct

import numpy as np

from . import backend
from .errors import FormatError, MaskError, NumericsError, ShapeError

LAYER_NORM_EPS = 1e-5

_MAGIC = b"DYRXMAT1"

_debug_checks = os.environ.get("DYREX_DEBUG_CHECKS") == "1"


def set_debug_checks(enabled):
    """Toggle finite-ness assertions after every op. Returns previous value."""
    global _debug_checks
    previous = _debug_checks
    _debug_checks = bool(enabled)
    return previous


def _checked(out):
    if _debug_checks and not np.all(np.isfinite(out)):
        raise NumericsError("non-finite entries in op output")
    return out


def as_matrix(data):
    """Validate/convert to a 2-D C-contiguous float64 matrix with finite entries."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericsError("matrix entries must be finite")
    return m


def as_vector(data):
    """Validate/convert to a 1-D C-contiguous float64 vector with finite entries."""
    v = np.ascontiguousarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"vector must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericsError("vector entries must be finite")
    return v


def zeros(rows, cols):
    return np.zeros((rows, cols))


class Rng:
    """Deterministic random source: numpy PCG64 seeded with a 64-bit integer.

    The same seed yields the same bit stream on every run and platform (the
    PCG64 stream is part of numpy's stability guarantee).
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal_matrix(self, rows, cols, std=1.0):
        return self._gen.normal(0.0, std, size=(rows, cols))

    def normal_vector(self, n, std=1.0):
        return self._gen.normal(0.0, std, size=n)

    def integers(self, low, high):
        """One integer in [low, high)."""
        return int(self._gen.integers(low, high))

    def permutation(self, n):
        return self._gen.permutation(n)

    def shuffle(self, items):
        self._gen.shuffle(items)


class Param:
    """A named trainable matrix paired with its gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)


class ParamStore:
    """Insertion-ordered collection of named parameters.

    Iteration order is the registration order; the optimizer and the
    checkpoint writer both rely on it for reproducibility.
    """

    def __init__(self):
        self._entries = {}

    def add(self, name, value):
        if name in self._entries:
            raise ShapeError(f"duplicate parameter name {name!r}")
        p = Param(name, as_matrix(value))
        self._entries[name] = p
        return p

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def params(self):
        return list(self._entries.values())

    def zero_grads(self):
        for p in self._entries.values():
            p.grad.fill(0.0)

    def num_values(self):
        return sum(p.value.size for p in self._entries.values())


# --- elementary ops ---------------------------------------------------------


def matmul(a, b):
    """Standard matrix product with plain left-to-right accumulation."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    return _checked(backend.kernels.matmul(a, b))


def matmul_backward(grad_out, a, b):
    """Gradients of c = a @ b given dL/dc. Returns (grad_a, grad_b)."""
    k = backend.kernels
    return k.matmul_nt(grad_out, b), k.matmul_tn(a, grad_out)


def softmax_rows(x, mask=None):
    """Row-wise softmax with max-subtraction; masked entries get exactly 0.

    mask, when given, is a {0,1} matrix of x's shape; every row must keep at
    least one allowed entry.
    """
    if mask is not None:
        if mask.shape != x.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != input {x.shape}")
        dead = np.where(~(mask > 0.0).any(axis=1))[0]
        if dead.size:
            raise MaskError(f"softmax row {int(dead[0])} is fully masked")
    return _checked(backend.kernels.softmax_rows(x, mask))


def softmax_backward(grad_out, probs, mask=None):
    """dL/dx for p = softmax_rows(x, mask), given dL/dp."""
    return backend.kernels.softmax_rows_grad(probs, grad_out, mask)


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    """Per-row standardization (biased variance) then affine.

    Returns (y, cache) where cache = (xhat, inv_std) feeds the backward.
    """
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({x.shape[1]},)"
        )
    y, xhat, inv_std = backend.kernels.layer_norm_rows(x, gamma, beta, eps)
    return _checked(y), (xhat, inv_std)


def layer_norm_backward(grad_out, cache, gamma):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std = cache
    return backend.kernels.layer_norm_rows_grad(grad_out, xhat, inv_std, gamma)


def gelu(x):
    """Elementwise x * Phi(x), exact erf form."""
    return _checked(backend.kernels.gelu(x))


def gelu_backward(grad_out, x):
    """dL/dx for y = gelu(x): grad_out * (Phi(x) + x * phi(x))."""
    return backend.kernels.gelu_grad(x, grad_out)


def linear_forward(x, w, b):
    """x @ w + b with b broadcast over rows."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} must be ({w.shape[1]},)")
    k = backend.kernels
    return _checked(k.add_row_bias(k.matmul(x, w), b))


def linear_backward(grad_out, x, w):
    """Gradients of y = x @ w + b. Returns (grad_x, grad_w, grad_b)."""
    k = backend.kernels
    return k.matmul_nt(grad_out, w), k.matmul_tn(x, grad_out), k.col_sums(grad_out)


# --- serialization ----------------------------------------------------------


def save_matrix(path, m):
    """Write `m` in the binary format: magic, u32 LE rows, u32 LE cols,
    rows*cols float64 LE values row-major."""
    m = as_matrix(m)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", m.shape[0], m.shape[1]))
        f.write(m.astype("<f8", copy=False).tobytes(order="C"))


def load_matrix(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(_MAGIC) + 8 or blob[: len(_MAGIC)] != _MAGIC:
        raise FormatError(f"{path}: not a DYRXMAT1 file")
    rows, cols = struct.unpack_from("<II", blob, len(_MAGIC))
    start = len(_MAGIC) + 8
    expected = start + rows * cols * 8
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {rows}x{cols}, got {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f8", offset=start, count=rows * cols)
    # astype: writable native-order copy (frombuffer views are read-only)
    return as_matrix(data.reshape(rows, cols).astype(np.float64))
