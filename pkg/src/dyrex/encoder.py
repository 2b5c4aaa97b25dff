"""Token representations for the concatenated question+passage sequence.

A deliberately small contextualizer: token embeddings + sinusoidal positions
+ optional segment embeddings, followed by zero or more standard
self-attention blocks. With num_layers=0 it degenerates to a bag of
embeddings, which is the frozen-representation mode the synthetic
experiments run in. Precomputed representations can be loaded from matrix
files instead of running the encoder at all.
"""

from dataclasses import dataclass, field

import numpy as np

from . import attention, numkit
from .errors import ConfigError, DataError, ShapeError
from .numkit import Param

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class Vocab:
    """Whitespace-token vocabulary; line number in the saved file = id."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        if UNK_TOKEN not in self.index:
            raise ConfigError(f"vocabulary must contain {UNK_TOKEN}")

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self):
        return self.index[PAD_TOKEN]

    @property
    def unk_id(self):
        return self.index[UNK_TOKEN]

    def id(self, token):
        return self.index.get(token, self.index[UNK_TOKEN])

    def ids(self, tokens):
        unk = self.index[UNK_TOKEN]
        return [self.index.get(t, unk) for t in tokens]

    @classmethod
    def build(cls, token_lists):
        """Corpus-built vocabulary: specials first, then tokens by first
        appearance."""
        tokens = [PAD_TOKEN, UNK_TOKEN]
        seen = set(tokens)
        for toks in token_lists:
            for t in toks:
                if t not in seen:
                    seen.add(t)
                    tokens.append(t)
        return cls(tokens)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line != "\n"])


def tokenize(text):
    return text.split()


@dataclass
class EncoderConfig:
    vocab_size: int
    d: int
    num_layers: int = 0
    num_heads: int = 4
    max_len: int = 512
    use_segment_embeddings: bool = True
    trainable: bool = True
    pos_scale: float = 1.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.num_layers > 0 and self.d % self.num_heads != 0:
            raise ConfigError(
                f"encoder dim {self.d} not divisible by {self.num_heads} heads"
            )
        if self.vocab_size < 1 or self.d < 1 or self.max_len < 1:
            raise ConfigError("vocab_size, d and max_len must be positive")


@dataclass
class TokenizedInput:
    """One padded question+passage sequence.

    padding_mask is {0,1} with 1 = real token; padding sits only at the tail.
    passage_span is (first, last) inclusive, in sequence coordinates.
    """

    token_ids: list
    segment_ids: list
    padding_mask: list
    passage_span: tuple

    def __post_init__(self):
        n = len(self.token_ids)
        if not (len(self.segment_ids) == len(self.padding_mask) == n):
            raise ShapeError("tokenized input sequences must have equal length")
        seen_pad = False
        for flag in self.padding_mask:
            if flag == 0:
                seen_pad = True
            elif seen_pad:
                raise DataError("padding must be contiguous at the tail")
        first, last = self.passage_span
        if not (0 <= first <= last < n):
            raise DataError(f"passage span {self.passage_span} out of bounds for length {n}")

    def __len__(self):
        return len(self.token_ids)

    @property
    def num_real(self):
        return int(sum(self.padding_mask))


@dataclass
class EncoderLayerParams:
    self_att: attention.MhaParams
    ffn: attention.FfnParams
    ln1_gamma: Param
    ln1_beta: Param
    ln2_gamma: Param
    ln2_beta: Param


@dataclass
class EncoderParams:
    token_emb: Param
    segment_emb: Param | None
    layers: list = field(default_factory=list)


def init_encoder_params(store, prefix, config, rng):
    token_emb = store.add(
        f"{prefix}.token_emb",
        rng.normal_matrix(config.vocab_size, config.d, std=config.init_std),
    )
    segment_emb = None
    if config.use_segment_embeddings:
        segment_emb = store.add(
            f"{prefix}.segment_emb", rng.normal_matrix(2, config.d, std=config.init_std)
        )
    layers = []
    d = config.d
    for i in range(config.num_layers):
        lp = f"{prefix}.layer{i}"
        layers.append(
            EncoderLayerParams(
                self_att=attention.init_mha_params(
                    store, f"{lp}.self_att", d, config.num_heads, rng, config.init_std
                ),
                ffn=attention.init_ffn_params(
                    store, f"{lp}.ffn", d, 4 * d, rng, config.init_std
                ),
                ln1_gamma=store.add(f"{lp}.ln1.gamma", np.ones((1, d))),
                ln1_beta=store.add(f"{lp}.ln1.beta", np.zeros((1, d))),
                ln2_gamma=store.add(f"{lp}.ln2.gamma", np.ones((1, d))),
                ln2_beta=store.add(f"{lp}.ln2.beta", np.zeros((1, d))),
            )
        )
    return EncoderParams(token_emb=token_emb, segment_emb=segment_emb, layers=layers)


_pos_cache = {}


def positional_encoding(n, d, scale=1.0):
    """Sinusoidal position table, (n x d): sin on even columns, cos on odd."""
    key = (n, d, scale)
    cached = _pos_cache.get(key)
    if cached is not None:
        return cached
    pos = np.arange(n)[:, None]
    idx = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (idx // 2)) / d)
    table = np.empty((n, d))
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    table = scale * table
    table.setflags(write=False)
    _pos_cache[key] = table
    return table


class EncodeCache:
    __slots__ = ("token_ids", "segment_ids", "layer_caches")

    def __init__(self, token_ids, segment_ids):
        self.token_ids = token_ids
        self.segment_ids = segment_ids
        self.layer_caches = []


def encode(config, params, inp):
    """Token representations for one sequence, (N x d). Returns (h, cache)."""
    n = len(inp)
    if n == 0:
        raise DataError("cannot encode an empty sequence")
    if n > config.max_len:
        raise DataError(f"sequence length {n} exceeds max_len {config.max_len}")
    ids = np.asarray(inp.token_ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise DataError(
            f"token id out of range [0, {config.vocab_size}): {int(ids.max())}"
        )
    segs = np.asarray(inp.segment_ids, dtype=np.int64)

    h = params.token_emb.value[ids] + positional_encoding(n, config.d, config.pos_scale)
    if params.segment_emb is not None:
        h = h + params.segment_emb.value[segs]
    h = np.ascontiguousarray(h)

    cache = EncodeCache(ids, segs)
    padding = np.asarray(inp.padding_mask, dtype=np.float64)
    for lp in params.layers:
        att_out, att_cache = attention.mha_forward(
            lp.self_att, h, h, mask=None, key_padding=padding
        )
        pre1 = h + att_out
        x_mid, ln1_cache = numkit.layer_norm(pre1, lp.ln1_gamma.value[0], lp.ln1_beta.value[0])
        ffn_out, ffn_cache = attention.ffn_forward(lp.ffn, x_mid)
        pre2 = x_mid + ffn_out
        h_next, ln2_cache = numkit.layer_norm(pre2, lp.ln2_gamma.value[0], lp.ln2_beta.value[0])
        cache.layer_caches.append((att_cache, ln1_cache, x_mid, ffn_cache, ln2_cache))
        h = h_next
    return h, cache


def encode_backward(config, params, cache, grad_h):
    """Accumulate encoder parameter gradients from dL/dh.

    No-op when the encoder is frozen (trainable=False): frozen parameters
    keep zero gradient by contract.
    """
    if not config.trainable:
        return
    g = grad_h
    for lp, (att_cache, ln1_cache, x_mid, ffn_cache, ln2_cache) in zip(
        reversed(params.layers), reversed(cache.layer_caches)
    ):
        g_pre2, d_g2, d_b2 = numkit.layer_norm_backward(g, ln2_cache, lp.ln2_gamma.value[0])
        lp.ln2_gamma.grad[0] += d_g2
        lp.ln2_beta.grad[0] += d_b2
        d_mid = g_pre2 + attention.ffn_backward(lp.ffn, ffn_cache, x_mid, g_pre2)
        g_pre1, d_g1, d_b1 = numkit.layer_norm_backward(d_mid, ln1_cache, lp.ln1_gamma.value[0])
        lp.ln1_gamma.grad[0] += d_g1
        lp.ln1_beta.grad[0] += d_b1
        d_queries, d_kv = attention.mha_backward(lp.self_att, att_cache, g_pre1)
        g = g_pre1 + d_queries + d_kv

    np.add.at(params.token_emb.grad, cache.token_ids, g)
    if params.segment_emb is not None:
        np.add.at(params.segment_emb.grad, cache.segment_ids, g)


def load_precomputed_embeddings(path):
    """Read a (N x d) representation matrix, bypassing the encoder."""
    m = numkit.load_matrix(path)
    if m.shape[0] == 0:
        raise DataError(f"{path}: representation file holds an empty sequence")
    return m
