"""Command-line entry point.

Subcommands: train, eval, gradcheck, ablate, synth. Every command takes a
JSON config file plus key=value overrides and is deterministic given
(config, seed). Exit codes: 0 success, 1 usage/config, 2 data, 3 numerical
failure.
"""

import argparse
import dataclasses
import json
import os
import sys

from . import backend, data, trainer
from .config import load_run_config
from .data import SynthSpec, generate_synthetic, read_mrqa_jsonl, write_mrqa_jsonl
from .encoder import Vocab
from .errors import (
    ConfigError,
    DataError,
    DyrexError,
    FormatError,
    MaskError,
    NumericsError,
    ShapeError,
)
from .metrics import evaluate
from .model import QAModel
from .trainer import grad_check, predict_all, run_ablation, train, write_ablation_csv

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _load_examples(path, what):
    if not path:
        raise ConfigError(f"config is missing data.{what}")
    examples, skipped = read_mrqa_jsonl(path)
    if skipped:
        print(f"warning: skipped {skipped} unusable examples in {path}", file=sys.stderr)
    if not examples:
        raise DataError(f"{path}: no usable examples")
    return examples


def _build_vocab(cfg, train_examples):
    if cfg.data.vocab_path:
        return Vocab.load(cfg.data.vocab_path)
    return data.build_vocab(train_examples)


def cmd_train(args):
    cfg = load_run_config(args.config, args.overrides)
    train_examples = _load_examples(cfg.data.train_path, "train_path")
    eval_examples = []
    if cfg.data.eval_path:
        eval_examples = _load_examples(cfg.data.eval_path, "eval_path")
    vocab = _build_vocab(cfg, train_examples)
    model = QAModel(cfg.encoder_config(len(vocab)), cfg.head, cfg.seed)
    if args.resume:
        model.load_values(args.resume)
    # train.seed falls back to the top-level seed unless set explicitly
    run_cfg = cfg.train
    if run_cfg.seed == 0:
        run_cfg = dataclasses.replace(run_cfg, seed=cfg.seed)
    result = train(model, vocab, train_examples, eval_examples, run_cfg, out_dir=cfg.out_dir)
    final_loss = result.log[-1]["loss"] if result.log else float("nan")
    print(
        f"trained {result.total_steps} steps (backend={backend.name()}); "
        f"final loss {final_loss:.4f}"
    )
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"log: {result.log_path}")
    return EXIT_OK


def cmd_eval(args):
    model, vocab = QAModel.load_checkpoint(args.checkpoint)
    if vocab is None:
        raise ConfigError(f"checkpoint {args.checkpoint} carries no vocabulary")
    if args.config:
        cfg = load_run_config(args.config, args.overrides)
        want_d = cfg.encoder.get("d")
        if want_d is not None and want_d != model.encoder_config.d:
            raise ConfigError(
                f"config demands d={want_d} but checkpoint has d={model.encoder_config.d}"
            )
    examples, skipped = read_mrqa_jsonl(args.dataset)
    if skipped:
        print(f"warning: skipped {skipped} unusable examples", file=sys.stderr)
    if not examples:
        raise DataError(f"{args.dataset}: no usable examples")
    preds = predict_all(model, vocab, examples)
    result = evaluate(preds, examples)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    pred_path = os.path.join(out_dir, "predictions.json")
    with open(pred_path, "w", encoding="utf-8") as f:
        json.dump(preds, f, indent=2, sort_keys=True)
        f.write("\n")
    report_path = os.path.join(out_dir, "eval_report.json")
    result.save(report_path)
    print(f"em={result.em:.4f} f1={result.f1:.4f} on {len(examples)} examples")
    print(f"predictions: {pred_path}")
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = load_run_config(args.config, args.overrides)
    if cfg.data.train_path:
        examples = _load_examples(cfg.data.train_path, "train_path")
    else:
        examples = generate_synthetic(cfg.synthetic, 8)
    vocab = _build_vocab(cfg, examples)
    model = QAModel(cfg.encoder_config(len(vocab)), cfg.head, cfg.seed)
    batch = data.make_batch(examples[:1], vocab, model.encoder_config.max_len)
    report = grad_check(
        model, batch.inputs[0], batch.gold_spans[0], h=args.h, tol=args.tol
    )
    for name, checked, worst in report.per_param:
        print(f"{name}: {checked} coords, max rel err {worst:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: max relative error {report.max_rel_error:.3e} (tol {report.tol:g})")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_ablate(args):
    cfg = load_run_config(args.config, args.overrides)
    train_examples = _load_examples(cfg.data.train_path, "train_path")
    eval_examples = _load_examples(cfg.data.eval_path, "eval_path")
    vocab = _build_vocab(cfg, train_examples)
    rows = run_ablation(
        vocab,
        train_examples,
        eval_examples,
        cfg.encoder_config(len(vocab)),
        cfg.head,
        cfg.train,
        cfg.ablation.layer_counts,
        cfg.ablation.parsed_strategies(),
        cfg.ablation.seeds(cfg.seed),
    )
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = args.out or os.path.join(cfg.out_dir, "ablation.csv")
    write_ablation_csv(out_path, rows)
    for row in rows:
        print(
            f"L={row['layers']} {row['strategy']:>13}: "
            f"F1 {row['f1_mean']:.2f} +- {row['f1_std']:.2f}  "
            f"EM {row['em_mean']:.2f} +- {row['em_std']:.2f}  "
            f"({row['seed_count']} seeds)"
        )
        for err in row.get("errors", []):
            print(f"  cell failure: {err}", file=sys.stderr)
    print(f"table: {out_path}")
    return EXIT_OK


def cmd_synth(args):
    overrides = args.overrides
    cfg = load_run_config(args.config, overrides) if args.config or overrides else None
    spec = cfg.synthetic if cfg else SynthSpec()
    examples = generate_synthetic(spec, args.n)
    write_mrqa_jsonl(args.out, examples, dataset_name="synthetic-kv")
    print(f"wrote {len(examples)} examples to {args.out}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="dyrex", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("overrides", nargs="*", help="dotted key=value overrides")

    p_train = sub.add_parser("train", help="train a model and write checkpoint/logs")
    add_common(p_train)
    p_train.add_argument("--resume", help="checkpoint directory to warm-start from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--out", help="output directory for predictions/report")
    add_common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    add_common(p_grad)
    p_grad.add_argument("--h", type=float, default=1e-5)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_abl = sub.add_parser("ablate", help="decoder depth x masking strategy grid")
    add_common(p_abl)
    p_abl.add_argument("--out", help="CSV output path")
    p_abl.set_defaults(func=cmd_ablate)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    add_common(p_synth)
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericsError, ShapeError, MaskError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DyrexError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
