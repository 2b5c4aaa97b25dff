"""Span prediction head with dynamically refined boundary queries.

Two learned query vectors (start, end) score every token representation by
dot product; softmax over the allowed positions gives the start/end
distributions. Before scoring, the queries can be refined by a stack of
transformer decoder layers attending over the token representations:
self-attention between the two queries (under a configurable interaction
mask), cross-attention into the sequence, and a feedforward block, each
followed by residual + layer norm (post-norm order). With zero decoder
layers the head reduces exactly to the static-query baseline.
"""

from dataclasses import dataclass, field

import numpy as np

from . import attention, backend, numkit
from .attention import MaskStrategy
from .errors import ConfigError, DataError
from .numkit import Param

LOG_CLAMP = 1e-12


@dataclass
class HeadConfig:
    num_layers: int = 3
    num_heads: int = 8
    strategy: MaskStrategy = MaskStrategy.BIDIRECTIONAL
    restrict_to_passage: bool = True
    max_answer_len: int = 30

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = MaskStrategy.parse(self.strategy)
        if self.num_layers < 0:
            raise ConfigError(f"decoder layer count must be >= 0, got {self.num_layers}")
        if self.max_answer_len < 1:
            raise ConfigError("max_answer_len must be >= 1")


@dataclass
class QueryBank:
    """The two learnable initial queries, each a (1 x d) parameter."""

    start_query: Param
    end_query: Param

    @property
    def dim(self):
        return self.start_query.value.shape[1]

    def stacked(self):
        """Initial query pair as a (2 x d) matrix, row order [start, end]."""
        return np.ascontiguousarray(
            np.vstack([self.start_query.value[0], self.end_query.value[0]])
        )


@dataclass
class DecoderLayerParams:
    self_att: attention.MhaParams
    cross_att: attention.MhaParams
    ffn: attention.FfnParams
    ln1_gamma: Param
    ln1_beta: Param
    ln2_gamma: Param
    ln2_beta: Param
    ln3_gamma: Param
    ln3_beta: Param


def init_query_bank(store, prefix, d, rng, init_std=0.02):
    return QueryBank(
        start_query=store.add(f"{prefix}.start_query", rng.normal_matrix(1, d, std=init_std)),
        end_query=store.add(f"{prefix}.end_query", rng.normal_matrix(1, d, std=init_std)),
    )


def init_decoder_layers(store, prefix, d, config, rng, init_std=0.02):
    layers = []
    for i in range(config.num_layers):
        lp = f"{prefix}.layer{i}"
        layers.append(
            DecoderLayerParams(
                self_att=attention.init_mha_params(
                    store, f"{lp}.self_att", d, config.num_heads, rng, init_std
                ),
                cross_att=attention.init_mha_params(
                    store, f"{lp}.cross_att", d, config.num_heads, rng, init_std
                ),
                ffn=attention.init_ffn_params(store, f"{lp}.ffn", d, 4 * d, rng, init_std),
                ln1_gamma=store.add(f"{lp}.ln1.gamma", np.ones((1, d))),
                ln1_beta=store.add(f"{lp}.ln1.beta", np.zeros((1, d))),
                ln2_gamma=store.add(f"{lp}.ln2.gamma", np.ones((1, d))),
                ln2_beta=store.add(f"{lp}.ln2.beta", np.zeros((1, d))),
                ln3_gamma=store.add(f"{lp}.ln3.gamma", np.ones((1, d))),
                ln3_beta=store.add(f"{lp}.ln3.beta", np.zeros((1, d))),
            )
        )
    return layers


class DecoderLayerCache:
    __slots__ = (
        "q_in", "sa_cache", "ln1_cache", "q_mid",
        "ca_cache", "ln2_cache", "q_hat", "ffn_cache", "ln3_cache",
    )


def decoder_layer_forward(lp, q_in, h, mask, key_padding=None):
    """One refinement step of the (2 x d) query pair over h (N x d).

    self-attention (masked by `mask`) -> add&norm -> cross-attention into h
    (padded keys masked) -> add&norm -> feedforward -> add&norm.
    Returns (q_out, cache).
    """
    c = DecoderLayerCache()
    c.q_in = q_in
    sa_out, c.sa_cache = attention.mha_forward(lp.self_att, q_in, q_in, mask=mask)
    c.q_mid, c.ln1_cache = numkit.layer_norm(
        q_in + sa_out, lp.ln1_gamma.value[0], lp.ln1_beta.value[0]
    )
    ca_out, c.ca_cache = attention.mha_forward(
        lp.cross_att, c.q_mid, h, mask=None, key_padding=key_padding
    )
    c.q_hat, c.ln2_cache = numkit.layer_norm(
        c.q_mid + ca_out, lp.ln2_gamma.value[0], lp.ln2_beta.value[0]
    )
    ffn_out, c.ffn_cache = attention.ffn_forward(lp.ffn, c.q_hat)
    q_out, c.ln3_cache = numkit.layer_norm(
        c.q_hat + ffn_out, lp.ln3_gamma.value[0], lp.ln3_beta.value[0]
    )
    return q_out, c


def decoder_layer_backward(lp, cache, grad_q_out):
    """Backward of one decoder layer. Accumulates parameter grads; returns
    (grad_q_in, grad_h)."""
    g_pre3, d_g3, d_b3 = numkit.layer_norm_backward(
        grad_q_out, cache.ln3_cache, lp.ln3_gamma.value[0]
    )
    lp.ln3_gamma.grad[0] += d_g3
    lp.ln3_beta.grad[0] += d_b3
    d_qhat = g_pre3 + attention.ffn_backward(lp.ffn, cache.ffn_cache, cache.q_hat, g_pre3)

    g_pre2, d_g2, d_b2 = numkit.layer_norm_backward(d_qhat, cache.ln2_cache, lp.ln2_gamma.value[0])
    lp.ln2_gamma.grad[0] += d_g2
    lp.ln2_beta.grad[0] += d_b2
    d_q_ca, grad_h = attention.mha_backward(lp.cross_att, cache.ca_cache, g_pre2)
    d_qmid = g_pre2 + d_q_ca

    g_pre1, d_g1, d_b1 = numkit.layer_norm_backward(d_qmid, cache.ln1_cache, lp.ln1_gamma.value[0])
    lp.ln1_gamma.grad[0] += d_g1
    lp.ln1_beta.grad[0] += d_b1
    d_q_sa, d_kv_sa = attention.mha_backward(lp.self_att, cache.sa_cache, g_pre1)
    grad_q_in = g_pre1 + d_q_sa + d_kv_sa
    return grad_q_in, grad_h


def decode_queries(layers, bank, h, config, key_padding=None):
    """Refined query pair, (2 x d). With num_layers=0 the initial queries
    pass through unchanged. Returns (q_refined, caches)."""
    if len(layers) != config.num_layers:
        raise ConfigError(
            f"got {len(layers)} decoder layers for a depth-{config.num_layers} head"
        )
    mask = attention.build_query_mask(config.strategy)
    q = bank.stacked()
    caches = []
    for lp in layers:
        q, c = decoder_layer_forward(lp, q, h, mask, key_padding)
        caches.append(c)
    return q, caches


def queries_backward(layers, caches, bank, grad_q):
    """Backward through the decoder stack into the query bank.

    Returns the accumulated gradient w.r.t. the token representations.
    """
    grad_h_total = None
    for lp, cache in zip(reversed(layers), reversed(caches)):
        grad_q, grad_h = decoder_layer_backward(lp, cache, grad_q)
        grad_h_total = grad_h if grad_h_total is None else grad_h_total + grad_h
    bank.start_query.grad[0] += grad_q[0]
    bank.end_query.grad[0] += grad_q[1]
    return grad_h_total


@dataclass
class SpanDistributions:
    """Start/end position distributions over the sequence; zero mass outside
    the allowed region (padding, and non-passage positions when restricted)."""

    p_start: np.ndarray
    p_end: np.ndarray
    allowed: np.ndarray = field(repr=False)


def allowed_positions(inp, config):
    allowed = np.asarray(inp.padding_mask, dtype=np.float64).copy()
    if config.restrict_to_passage:
        first, last = inp.passage_span
        allowed[:first] = 0.0
        allowed[last + 1 :] = 0.0
    return allowed


def span_distributions(q_refined, h, inp, config):
    """Boundary estimators: p_start[i] and p_end[j] are softmaxes of the
    token scores q . h_i, restricted to allowed positions."""
    allowed = allowed_positions(inp, config)
    if not (allowed > 0.0).any():
        raise DataError("no allowed position for span scoring")
    logits = backend.kernels.matmul_nt(q_refined, h)
    mask = np.ascontiguousarray(np.broadcast_to(allowed, logits.shape))
    probs = numkit.softmax_rows(logits, mask)
    return SpanDistributions(p_start=probs[0], p_end=probs[1], allowed=allowed)


def span_nll(dists, gold, qid=None):
    """Summed negative log-likelihood of the gold (start, end) positions."""
    i, j = gold
    n = dists.p_start.shape[0]
    if not (0 <= i < n and 0 <= j < n):
        raise DataError(f"gold span {gold} out of bounds for length {n}")
    if dists.allowed[i] == 0.0 or dists.allowed[j] == 0.0:
        which = f" (example {qid})" if qid else ""
        raise DataError(f"gold span {gold} lies in a masked position{which}")
    return float(
        -np.log(max(dists.p_start[i], LOG_CLAMP))
        - np.log(max(dists.p_end[j], LOG_CLAMP))
    )


def span_nll_backward(dists, gold, scale=1.0):
    """Gradient of scale * span_nll w.r.t. the boundary logits, (2 x N)."""
    i, j = gold
    grad = np.vstack([dists.p_start, dists.p_end])
    grad[0, i] -= 1.0
    grad[1, j] -= 1.0
    grad *= scale
    return np.ascontiguousarray(grad)


def boundary_logits_backward(grad_logits, q_refined, h):
    """Split dL/dlogits into (grad_q_refined, grad_h) for logits = q . h^T."""
    grad_q = numkit.matmul(grad_logits, h)
    grad_h = backend.kernels.matmul_tn(grad_logits, q_refined)
    return grad_q, grad_h


def head_backward(layers, caches, bank, grad_logits, q_refined, h):
    """Full backward from boundary-logit gradients to every head parameter.

    Returns dL/dh for the encoder (zero decoder layers included: the scoring
    itself still propagates into h).
    """
    grad_q, grad_h = boundary_logits_backward(grad_logits, q_refined, h)
    grad_h_dec = queries_backward(layers, caches, bank, grad_q)
    if grad_h_dec is not None:
        grad_h = grad_h + grad_h_dec
    return grad_h


@dataclass
class SpanPrediction:
    start: int
    end: int
    score: float
    text: str = ""


def decode_span(dists, config):
    """Best (start, end) pair with start <= end, length <= max_answer_len,
    both allowed, maximizing p_start * p_end; ties break toward the smaller
    start, then the smaller end."""
    p_start, p_end, allowed = dists.p_start, dists.p_end, dists.allowed
    n = p_start.shape[0]
    best = None
    for i in range(n):
        if allowed[i] == 0.0:
            continue
        stop = min(n, i + config.max_answer_len)
        for j in range(i, stop):
            if allowed[j] == 0.0:
                continue
            score = p_start[i] * p_end[j]
            if best is None or score > best[0]:
                best = (score, i, j)
    if best is None:
        raise DataError("no valid span candidate under the decoding constraints")
    score, i, j = best
    return SpanPrediction(start=i, end=j, score=float(score))
