"""Multi-head scaled dot-product attention with arbitrary boolean masks,
plus the three query-interaction masks (bidirectional / causal / independent).
"""

import enum
from dataclasses import dataclass

import numpy as np

from . import backend, numkit
from .errors import ConfigError, ShapeError
from .numkit import Param


class MaskStrategy(enum.Enum):
    """How the two boundary queries may attend each other."""

    BIDIRECTIONAL = "bidirectional"
    CAUSAL = "causal"
    INDEPENDENT = "independent"

    @classmethod
    def parse(cls, text):
        try:
            return cls(str(text).lower())
        except ValueError:
            raise ConfigError(
                f"unknown mask strategy {text!r}; expected one of "
                f"{[s.value for s in cls]}"
            ) from None


def build_query_mask(strategy):
    """2x2 allow-mask over the (start, end) query pair, row/col order fixed
    as [start, end].

    bidirectional: full interaction. causal: the start query cannot see the
    end query, the end query sees both. independent: self-attention only.
    """
    if strategy is MaskStrategy.BIDIRECTIONAL:
        return np.ones((2, 2))
    if strategy is MaskStrategy.CAUSAL:
        return np.array([[1.0, 0.0], [1.0, 1.0]])
    if strategy is MaskStrategy.INDEPENDENT:
        return np.eye(2)
    raise ConfigError(f"unknown mask strategy {strategy!r}")


@dataclass
class MhaParams:
    """Projection parameters for one attention block.

    All weights are (d x d); biases are stored as (1 x d) matrices. d must be
    divisible by num_heads. The key projection carries no bias: a key bias
    shifts every score in a row equally, so the softmax ignores it and its
    gradient is identically zero.
    """

    num_heads: int
    w_q: Param
    b_q: Param
    w_k: Param
    w_v: Param
    b_v: Param
    w_o: Param
    b_o: Param

    @property
    def dim(self):
        return self.w_q.value.shape[0]

    @property
    def head_dim(self):
        return self.dim // self.num_heads


def init_mha_params(store, prefix, d, num_heads, rng, init_std=0.02):
    if num_heads < 1 or d % num_heads != 0:
        raise ConfigError(f"embedding dim {d} not divisible by {num_heads} heads")
    def weight(tag):
        return store.add(f"{prefix}.{tag}", rng.normal_matrix(d, d, std=init_std))
    def bias(tag):
        return store.add(f"{prefix}.{tag}", np.zeros((1, d)))
    return MhaParams(
        num_heads=num_heads,
        w_q=weight("w_q"), b_q=bias("b_q"),
        w_k=weight("w_k"),
        w_v=weight("w_v"), b_v=bias("b_v"),
        w_o=weight("w_o"), b_o=bias("b_o"),
    )


def combine_masks(mask, key_padding, num_queries):
    """Merge an allow-mask (m x n) with a key padding vector (n,) into one
    {0,1} matrix, or None when nothing is masked."""
    if mask is None and key_padding is None:
        return None
    if key_padding is None:
        return mask
    kp = np.broadcast_to(np.asarray(key_padding, dtype=np.float64), (num_queries, len(key_padding)))
    if mask is None:
        return np.ascontiguousarray(kp)
    return np.ascontiguousarray(mask * kp)


class MhaCache:
    """Forward intermediates kept for the backward pass; `attn_weights` (one
    (m x n) matrix per head) doubles as the inspection surface."""

    __slots__ = ("queries", "keys_values", "q", "k", "v", "ctx", "attn_weights", "allow")

    def __init__(self, queries, keys_values, q, k, v, ctx, attn_weights, allow):
        self.queries = queries
        self.keys_values = keys_values
        self.q = q
        self.k = k
        self.v = v
        self.ctx = ctx
        self.attn_weights = attn_weights
        self.allow = allow


def _head_slices(d, num_heads):
    hd = d // num_heads
    return [(h * hd, (h + 1) * hd) for h in range(num_heads)]


def mha_forward(params, queries, keys_values, mask=None, key_padding=None):
    """Multi-head attention of `queries` (m x d) over `keys_values` (n x d).

    Per head: scores = Q K^T / sqrt(head_dim); entries disallowed by `mask`
    or by `key_padding` get probability exactly 0. Returns (output, cache).
    """
    d = params.dim
    m, n = queries.shape[0], keys_values.shape[0]
    if queries.shape[1] != d or keys_values.shape[1] != d:
        raise ShapeError(
            f"attention inputs {queries.shape} / {keys_values.shape} do not match dim {d}"
        )
    if mask is not None and mask.shape != (m, n):
        raise ShapeError(f"attention mask {mask.shape} must be ({m}, {n})")
    allow = combine_masks(mask, key_padding, m)

    q = numkit.linear_forward(queries, params.w_q.value, params.b_q.value[0])
    k = numkit.matmul(keys_values, params.w_k.value)
    v = numkit.linear_forward(keys_values, params.w_v.value, params.b_v.value[0])

    scale = 1.0 / np.sqrt(params.head_dim)
    ctx = np.empty((m, d))
    attn_weights = []
    for lo, hi in _head_slices(d, params.num_heads):
        qh = np.ascontiguousarray(q[:, lo:hi])
        kh = np.ascontiguousarray(k[:, lo:hi])
        vh = np.ascontiguousarray(v[:, lo:hi])
        scores = backend.kernels.matmul_nt(qh, kh)
        scores *= scale
        probs = numkit.softmax_rows(scores, allow)
        ctx[:, lo:hi] = numkit.matmul(probs, vh)
        attn_weights.append(probs)

    out = numkit.linear_forward(ctx, params.w_o.value, params.b_o.value[0])
    cache = MhaCache(queries, keys_values, q, k, v, np.ascontiguousarray(ctx),
                     attn_weights, allow)
    return out, cache


@dataclass
class FfnParams:
    """Two-layer position-wise feedforward (gelu activation), used by both
    the encoder and the query-decoder blocks."""

    w1: Param
    b1: Param
    w2: Param
    b2: Param


def init_ffn_params(store, prefix, d_in, d_hidden, rng, init_std=0.02):
    return FfnParams(
        w1=store.add(f"{prefix}.w1", rng.normal_matrix(d_in, d_hidden, std=init_std)),
        b1=store.add(f"{prefix}.b1", np.zeros((1, d_hidden))),
        w2=store.add(f"{prefix}.w2", rng.normal_matrix(d_hidden, d_in, std=init_std)),
        b2=store.add(f"{prefix}.b2", np.zeros((1, d_in))),
    )


def ffn_forward(params, x):
    """w2 . gelu(w1 . x + b1) + b2, rows independent. Returns (y, cache)."""
    hidden = numkit.linear_forward(x, params.w1.value, params.b1.value[0])
    act = numkit.gelu(hidden)
    return numkit.linear_forward(act, params.w2.value, params.b2.value[0]), (hidden, act)


def ffn_backward(params, cache, x, grad_out):
    """Backward of ffn_forward; accumulates parameter grads, returns grad_x."""
    hidden, act = cache
    d_act, d_w2, d_b2 = numkit.linear_backward(grad_out, act, params.w2.value)
    params.w2.grad += d_w2
    params.b2.grad[0] += d_b2
    d_hidden = numkit.gelu_backward(d_act, hidden)
    d_x, d_w1, d_b1 = numkit.linear_backward(d_hidden, x, params.w1.value)
    params.w1.grad += d_w1
    params.b1.grad[0] += d_b1
    return d_x


def mha_backward(params, cache, grad_out):
    """Backward of mha_forward. Accumulates parameter gradients in place and
    returns (grad_queries, grad_keys_values)."""
    d = params.dim
    scale = 1.0 / np.sqrt(params.head_dim)

    d_ctx, d_wo, d_bo = numkit.linear_backward(grad_out, cache.ctx, params.w_o.value)
    params.w_o.grad += d_wo
    params.b_o.grad[0] += d_bo

    dq = np.empty_like(cache.q)
    dk = np.empty_like(cache.k)
    dv = np.empty_like(cache.v)
    kern = backend.kernels
    for (lo, hi), probs in zip(_head_slices(d, params.num_heads), cache.attn_weights):
        qh = np.ascontiguousarray(cache.q[:, lo:hi])
        kh = np.ascontiguousarray(cache.k[:, lo:hi])
        vh = np.ascontiguousarray(cache.v[:, lo:hi])
        d_ctx_h = np.ascontiguousarray(d_ctx[:, lo:hi])
        d_probs = kern.matmul_nt(d_ctx_h, vh)
        dv[:, lo:hi] = kern.matmul_tn(probs, d_ctx_h)
        d_scores = numkit.softmax_backward(d_probs, probs, cache.allow)
        d_scores *= scale
        dq[:, lo:hi] = numkit.matmul(d_scores, kh)
        dk[:, lo:hi] = kern.matmul_tn(d_scores, qh)

    grad_queries, d_wq, d_bq = numkit.linear_backward(dq, cache.queries, params.w_q.value)
    params.w_q.grad += d_wq
    params.b_q.grad[0] += d_bq

    gk, d_wk = numkit.matmul_backward(dk, cache.keys_values, params.w_k.value)
    params.w_k.grad += d_wk

    gv, d_wv, d_bv = numkit.linear_backward(dv, cache.keys_values, params.w_v.value)
    params.w_v.grad += d_wv
    params.b_v.grad[0] += d_bv

    return grad_queries, gk + gv
