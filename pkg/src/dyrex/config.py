"""Run configuration: one JSON file, dotted key=value overrides, strict keys.

Sections: seed, out_dir, data{train_path, eval_path, vocab_path}, encoder
(EncoderConfig fields; vocab_size is derived from the data), head
(HeadConfig fields), train (TrainConfig fields), synthetic (SynthSpec
fields), ablation{layer_counts, strategies, num_seeds}.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .attention import MaskStrategy
from .data import SynthSpec
from .encoder import EncoderConfig
from .errors import ConfigError
from .qahead import HeadConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    train_path: str = ""
    eval_path: str = ""
    vocab_path: str = ""


@dataclass
class AblationConfig:
    layer_counts: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    strategies: list = field(
        default_factory=lambda: ["bidirectional", "causal", "independent"]
    )
    num_seeds: int = 3

    def parsed_strategies(self):
        return [MaskStrategy.parse(s) for s in self.strategies]

    def seeds(self, base_seed):
        """Run seeds fan out as base_seed + run index."""
        return [base_seed + i for i in range(self.num_seeds)]


_ENCODER_KEYS = {f.name for f in dataclasses.fields(EncoderConfig)} - {"vocab_size"}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    data: DataConfig = field(default_factory=DataConfig)
    encoder: dict = field(default_factory=dict)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SynthSpec = field(default_factory=SynthSpec)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def encoder_config(self, vocab_size):
        return EncoderConfig(vocab_size=vocab_size, **self.encoder)


def _build_section(cls, raw, where):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    if cls is SynthSpec and "value_len_range" in raw:
        raw = dict(raw, value_len_range=tuple(raw["value_len_range"]))
    return cls(**raw)


def _parse_override_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw, overrides):
    """Apply dotted key=value strings (values parsed as JSON when possible)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, value = item.split("=", 1)
        keys = dotted.split(".")
        target = raw
        for k in keys[:-1]:
            target = target.setdefault(k, {})
            if not isinstance(target, dict):
                raise ConfigError(f"override {dotted!r} descends into a non-section")
        target[keys[-1]] = _parse_override_value(value)
    return raw


def load_run_config(path=None, overrides=()):
    """Load and validate a RunConfig; referenced paths must exist."""
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON ({e.msg})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be an object")
    raw = apply_overrides(raw, overrides)

    top_allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - top_allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    encoder_raw = raw.get("encoder", {})
    bad = set(encoder_raw) - _ENCODER_KEYS
    if bad:
        raise ConfigError(f"unknown encoder keys: {sorted(bad)}")
    if "total_steps" in raw.get("train", {}):
        raise ConfigError("train.total_steps is computed from the data; set max_steps/max_epochs")

    cfg = RunConfig(
        seed=int(raw.get("seed", 0)),
        out_dir=str(raw.get("out_dir", "runs/out")),
        data=_build_section(DataConfig, raw.get("data", {}), "data"),
        encoder=dict(encoder_raw),
        head=_build_section(HeadConfig, raw.get("head", {}), "head"),
        train=_build_section(TrainConfig, raw.get("train", {}), "train"),
        synthetic=_build_section(SynthSpec, raw.get("synthetic", {}), "synthetic"),
        ablation=_build_section(AblationConfig, raw.get("ablation", {}), "ablation"),
    )
    for label, p in (
        ("data.train_path", cfg.data.train_path),
        ("data.eval_path", cfg.data.eval_path),
        ("data.vocab_path", cfg.data.vocab_path),
    ):
        if p and not os.path.exists(p):
            raise ConfigError(f"{label}: path does not exist: {p}")
    return cfg
