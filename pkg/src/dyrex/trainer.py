"""Adam optimization with linear warmup / linear decay, the training loop,
the finite-difference gradient checker, and the layers-x-masking ablation
runner.

Training is bit-deterministic given (seed, config, dataset): shuffling uses
the seeded generator, gradient reduction sums examples in batch order, and
the optimizer iterates parameters in registration order.
"""

import csv
import dataclasses
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import make_batch, span_text
from .errors import ConfigError, NumericsError, ShapeError
from .metrics import evaluate
from .model import QAModel
from .numkit import Rng

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def worker_count():
    """Worker cap from DYREX_THREADS (default 1, keeping runs single-writer)."""
    raw = os.environ.get("DYREX_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DYREX_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DYREX_THREADS must be >= 1, got {n}")
    return n


@dataclass
class TrainConfig:
    peak_lr: float = 3e-5
    warmup_frac: float = 0.10
    batch_size: int = 12
    max_epochs: int = 5
    max_steps: int = 0  # 0 = no step cap
    total_steps: int = 0  # resolved from the dataset before training
    seed: int = 0
    eval_every: int = 0  # 0 = no mid-training evaluation
    weight_decay: float = 0.0
    grad_clip: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.warmup_frac < 1.0):
            raise ConfigError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def resolve_total_steps(config, num_examples):
    """min(max_steps, steps implied by max_epochs), computed up front.

    Both bounds at 0 means an explicit no-op run (checkpoint = init).
    """
    if num_examples < 1:
        raise ConfigError("cannot train on an empty dataset")
    steps_per_epoch = math.ceil(num_examples / config.batch_size)
    implied = steps_per_epoch * config.max_epochs if config.max_epochs >= 1 else 0
    candidates = [s for s in (implied, config.max_steps) if s > 0]
    return min(candidates) if candidates else 0


def lr_at(step, config):
    """Linear 0 -> peak over the warmup steps, then linear peak -> 0."""
    total = config.total_steps
    if total < 1:
        raise ConfigError("lr_at needs a resolved total_steps")
    w = max(1, math.ceil(config.warmup_frac * total))
    if step <= w:
        return config.peak_lr * step / w
    if step >= total:
        return 0.0
    return config.peak_lr * (total - step) / (total - w)


@dataclass
class OptimState:
    """Per-parameter Adam moment buffers, keyed by parameter name."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_init(params):
    return OptimState(
        m={p.name: np.zeros_like(p.value) for p in params},
        v={p.name: np.zeros_like(p.value) for p in params},
    )


def adam_step(params, state, lr):
    """One bias-corrected Adam update from the accumulated gradients.

    Gradients are left untouched; the caller zeroes them per batch.
    """
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p in params:
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None or m.shape != p.value.shape:
            raise ShapeError(f"optimizer state out of sync for {p.name}")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def predict_all(model, vocab, examples, batch_size=32):
    """Greedy span predictions as {qid: answer text}."""
    preds = {}
    for i in range(0, len(examples), batch_size):
        batch = make_batch(examples[i : i + batch_size], vocab, model.encoder_config.max_len)
        for inp, ex in zip(batch.inputs, batch.examples):
            span = model.predict(inp)
            preds[ex.qid] = span_text(ex, span.start, span.end)
    return preds


@dataclass
class TrainResult:
    log: list
    total_steps: int
    checkpoint_dir: str = ""
    log_path: str = ""


def train(model, vocab, train_examples, eval_examples, config, out_dir=None):
    """Run the full training loop; returns the in-memory log.

    When out_dir is given, also writes train_log.ndjson and a final
    checkpoint directory there.
    """
    total = resolve_total_steps(config, len(train_examples))
    sched = dataclasses.replace(config, total_steps=total)
    params = model.trainable_params()
    state = adam_init(params)
    rng = Rng(config.seed)
    max_len = model.encoder_config.max_len

    log = []
    step = 0
    while step < total:
        order = rng.permutation(len(train_examples))
        for start in range(0, len(order), config.batch_size):
            if step >= total:
                break
            chunk = [train_examples[i] for i in order[start : start + config.batch_size]]
            batch = make_batch(chunk, vocab, max_len)
            model.zero_grads()
            scale = 1.0 / len(batch.inputs)
            loss_sum = 0.0
            for inp, gold, ex in zip(batch.inputs, batch.gold_spans, batch.examples):
                fwd = model.forward(inp)
                loss = model.loss(fwd, gold, qid=ex.qid)
                if not math.isfinite(loss):
                    qids = [e.qid for e in batch.examples]
                    raise NumericsError(
                        f"non-finite loss {loss} at step {step + 1} (examples: {qids})"
                    )
                loss_sum += loss
                model.backward(fwd, gold, scale)
            if config.weight_decay > 0.0:
                for p in params:
                    p.grad += config.weight_decay * p.value
            if config.grad_clip > 0.0:
                norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
                if norm > config.grad_clip:
                    factor = config.grad_clip / norm
                    for p in params:
                        p.grad *= factor
            step += 1
            lr = lr_at(step, sched)
            adam_step(params, state, lr)
            record = {"step": step, "lr": lr, "loss": loss_sum * scale}
            if config.eval_every > 0 and eval_examples and step % config.eval_every == 0:
                res = evaluate(predict_all(model, vocab, eval_examples), eval_examples)
                record["eval_em"] = res.em
                record["eval_f1"] = res.f1
            log.append(record)

    result = TrainResult(log=log, total_steps=total)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.log_path = os.path.join(out_dir, "train_log.ndjson")
        with open(result.log_path, "w", encoding="utf-8") as f:
            for record in log:
                f.write(json.dumps(record) + "\n")
        result.checkpoint_dir = os.path.join(out_dir, "checkpoint")
        model.save_checkpoint(result.checkpoint_dir, vocab=vocab)
    return result


# --- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: float
    per_param: list = field(default_factory=list)  # (name, coords_checked, max_rel)

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def grad_check(model, inp, gold, h=1e-5, tol=1e-4, max_coords_per_param=256, seed=0,
               floor=1e-5):
    """Central finite differences against the analytic backward, for every
    trainable parameter (coordinates subsampled above max_coords_per_param).

    Relative error uses a denominator floor: with |loss| of a few nats and
    h=1e-5, float64 FD noise sits around 1e-10, so coordinates whose true
    gradient is below `floor` are effectively compared absolutely (at ~1e-9
    for the default floor) instead of drowning in noise.
    """
    model.zero_grads()
    fwd = model.forward(inp)
    model.backward(fwd, gold, scale=1.0)
    params = model.trainable_params()
    analytic = {p.name: p.grad.copy() for p in params}

    def loss_now():
        return model.loss(model.forward(inp), gold)

    rng = Rng(seed)
    report = GradCheckReport(tol=tol, max_rel_error=0.0)
    for p in params:
        flat = p.value.ravel()
        size = flat.shape[0]
        if size <= max_coords_per_param:
            coords = range(size)
        else:
            coords = rng.permutation(size)[:max_coords_per_param]
        ga_flat = analytic[p.name].ravel()
        worst = 0.0
        checked = 0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_now()
            flat[idx] = orig - h
            lm = loss_now()
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            ga = ga_flat[idx]
            rel = abs(ga - fd) / max(abs(ga), abs(fd), floor)
            worst = max(worst, rel)
            checked += 1
        report.per_param.append((p.name, checked, worst))
        report.max_rel_error = max(report.max_rel_error, worst)
    return report


# --- ablation over decoder depth x masking strategy ---------------------------

ABLATION_COLUMNS = ("layers", "strategy", "seed_count", "f1_mean", "f1_std", "em_mean", "em_std")


def _run_cell(vocab, train_examples, eval_examples, encoder_config, head_config,
              train_config, num_layers, strategy, seeds):
    scores = []
    errors = []
    for seed in seeds:
        try:
            head = dataclasses.replace(head_config, num_layers=num_layers, strategy=strategy)
            model = QAModel(encoder_config, head, seed)
            cfg = dataclasses.replace(train_config, seed=seed)
            train(model, vocab, train_examples, None, cfg)
            res = evaluate(predict_all(model, vocab, eval_examples), eval_examples)
            scores.append((res.f1 * 100.0, res.em * 100.0))
        except Exception as e:  # record the failure, keep the grid running
            errors.append(f"seed {seed}: {e}")
    row = {"layers": num_layers, "strategy": strategy.value, "seed_count": len(scores)}
    if scores:
        f1s = np.array([s[0] for s in scores])
        ems = np.array([s[1] for s in scores])
        row.update(
            f1_mean=float(f1s.mean()), f1_std=float(f1s.std()),
            em_mean=float(ems.mean()), em_std=float(ems.std()),
        )
    else:
        row.update(f1_mean=math.nan, f1_std=math.nan, em_mean=math.nan, em_std=math.nan)
    row["errors"] = errors
    return row


def run_ablation(vocab, train_examples, eval_examples, encoder_config, head_config,
                 train_config, layer_counts, strategies, seeds, max_workers=None):
    """Train/evaluate every (layer count x strategy) cell over the given
    seeds; returns one row per cell with mean +- population std of F1/EM (in
    percent). Cells run in parallel up to DYREX_THREADS workers."""
    if max_workers is None:
        max_workers = worker_count()
    cells = [(L, s) for L in layer_counts for s in strategies]

    def job(cell):
        L, strategy = cell
        return _run_cell(vocab, train_examples, eval_examples, encoder_config,
                         head_config, train_config, L, strategy, seeds)

    if max_workers == 1:
        return [job(c) for c in cells]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(job, cells))


def write_ablation_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row["layers"],
                    row["strategy"],
                    row["seed_count"],
                    f"{row['f1_mean']:.4f}",
                    f"{row['f1_std']:.4f}",
                    f"{row['em_mean']:.4f}",
                    f"{row['em_std']:.4f}",
                ]
            )
