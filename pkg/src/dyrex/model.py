"""Full pipeline model: encoder + query bank + decoder stack + span scoring,
with checkpoint save/load.

A checkpoint is a directory of one matrix file per named parameter plus a
JSON manifest recording the configs, vocabulary and seed.
"""

import dataclasses
import json
import os

import numpy as np

from . import encoder as enc
from . import numkit, qahead
from .attention import MaskStrategy
from .encoder import EncoderConfig, Vocab
from .errors import ConfigError, FormatError
from .numkit import ParamStore, Rng
from .qahead import HeadConfig

MANIFEST_NAME = "manifest.json"
VOCAB_NAME = "vocab.txt"
CHECKPOINT_FORMAT = "dyrex-checkpoint-v1"


class ForwardState:
    """Per-example forward intermediates needed by the backward pass."""

    __slots__ = ("inp", "h", "enc_cache", "q_refined", "layer_caches", "dists", "h_external")

    def __init__(self, inp, h, enc_cache, q_refined, layer_caches, dists, h_external):
        self.inp = inp
        self.h = h
        self.enc_cache = enc_cache
        self.q_refined = q_refined
        self.layer_caches = layer_caches
        self.dists = dists
        self.h_external = h_external


class QAModel:
    """Owns the parameter store; forward/backward are per example.

    Parameter registration order (encoder, then query bank, then decoder
    layers) is fixed: optimizer iteration and checkpoint layout depend on it.
    """

    def __init__(self, encoder_config, head_config, seed):
        if encoder_config.num_layers > 0 and encoder_config.d % encoder_config.num_heads:
            raise ConfigError("encoder d must be divisible by its head count")
        if encoder_config.d % head_config.num_heads:
            raise ConfigError(
                f"embedding dim {encoder_config.d} not divisible by "
                f"{head_config.num_heads} decoder heads"
            )
        self.encoder_config = encoder_config
        self.head_config = head_config
        self.seed = int(seed)
        self.store = ParamStore()
        rng = Rng(self.seed)
        self.encoder_params = enc.init_encoder_params(
            self.store, "encoder", encoder_config, rng
        )
        self.bank = qahead.init_query_bank(
            self.store, "head.bank", encoder_config.d, rng, encoder_config.init_std
        )
        self.decoder_layers = qahead.init_decoder_layers(
            self.store, "head", encoder_config.d, head_config, rng, encoder_config.init_std
        )

    def trainable_params(self):
        if self.encoder_config.trainable:
            return self.store.params()
        return [p for p in self.store.params() if not p.name.startswith("encoder.")]

    def zero_grads(self):
        self.store.zero_grads()

    def forward(self, inp, h_override=None):
        """Span distributions for one tokenized input. `h_override` feeds
        precomputed token representations, bypassing the encoder."""
        if h_override is not None:
            h, enc_cache, external = numkit.as_matrix(h_override), None, True
        else:
            h, enc_cache = enc.encode(self.encoder_config, self.encoder_params, inp)
            external = False
        padding = np.asarray(inp.padding_mask, dtype=np.float64)
        q_refined, layer_caches = qahead.decode_queries(
            self.decoder_layers, self.bank, h, self.head_config, key_padding=padding
        )
        dists = qahead.span_distributions(q_refined, h, inp, self.head_config)
        return ForwardState(inp, h, enc_cache, q_refined, layer_caches, dists, external)

    def loss(self, state, gold, qid=None):
        return qahead.span_nll(state.dists, gold, qid=qid)

    def backward(self, state, gold, scale=1.0):
        """Accumulate dL/dparam for one example; `scale` weights the example
        (1/batch_size for batch-mean training)."""
        grad_logits = qahead.span_nll_backward(state.dists, gold, scale)
        grad_h = qahead.head_backward(
            self.decoder_layers, state.layer_caches, self.bank,
            grad_logits, state.q_refined, state.h,
        )
        if not state.h_external:
            enc.encode_backward(
                self.encoder_config, self.encoder_params, state.enc_cache, grad_h
            )

    def predict(self, inp, h_override=None):
        state = self.forward(inp, h_override=h_override)
        return qahead.decode_span(state.dists, self.head_config)

    # --- checkpointing -------------------------------------------------------

    def save_checkpoint(self, directory, vocab=None):
        os.makedirs(directory, exist_ok=True)
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "seed": self.seed,
            "encoder": dataclasses.asdict(self.encoder_config),
            "head": {
                **dataclasses.asdict(self.head_config),
                "strategy": self.head_config.strategy.value,
            },
            "params": self.store.names(),
        }
        if vocab is not None:
            vocab.save(os.path.join(directory, VOCAB_NAME))
            manifest["vocab"] = VOCAB_NAME
        for p in self.store.params():
            numkit.save_matrix(os.path.join(directory, p.name + ".mat"), p.value)
        with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2)
            f.write("\n")

    def load_values(self, directory):
        """Overwrite parameter values from a checkpoint directory (shapes
        must match; used for warm starts)."""
        for p in self.store.params():
            path = os.path.join(directory, p.name + ".mat")
            if not os.path.exists(path):
                raise FormatError(f"checkpoint is missing parameter file {path}")
            value = numkit.load_matrix(path)
            if value.shape != p.value.shape:
                raise ConfigError(
                    f"checkpoint param {p.name} has shape {value.shape}, "
                    f"model expects {p.value.shape}"
                )
            p.value[...] = value

    @classmethod
    def load_checkpoint(cls, directory):
        """Rebuild (model, vocab_or_None) from a checkpoint directory."""
        manifest_path = os.path.join(directory, MANIFEST_NAME)
        try:
            with open(manifest_path, encoding="utf-8") as f:
                manifest = json.load(f)
        except FileNotFoundError:
            raise FormatError(f"no manifest at {manifest_path}") from None
        except json.JSONDecodeError as e:
            raise FormatError(f"{manifest_path}: malformed JSON ({e.msg})") from None
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{manifest_path}: unknown checkpoint format")
        encoder_config = EncoderConfig(**manifest["encoder"])
        head_kwargs = dict(manifest["head"])
        head_kwargs["strategy"] = MaskStrategy.parse(head_kwargs["strategy"])
        head_config = HeadConfig(**head_kwargs)
        model = cls(encoder_config, head_config, manifest["seed"])
        if manifest["params"] != model.store.names():
            raise FormatError("checkpoint parameter list does not match the configs")
        model.load_values(directory)
        vocab = None
        if manifest.get("vocab"):
            vocab = Vocab.load(os.path.join(directory, manifest["vocab"]))
        return model, vocab
