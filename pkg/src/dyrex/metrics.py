"""Exact Match and token-level F1 over normalized answer strings, following
the standard reading-comprehension evaluator behavior (multiset token
overlap, max over gold answers).
"""

import json
import re
import string
from collections import Counter
from dataclasses import dataclass

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s):
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def em_score(prediction, golds):
    """1 if the normalized prediction equals any normalized gold, else 0."""
    norm = normalize_answer(prediction)
    return int(any(norm == normalize_answer(g) for g in golds))


def _f1_single(pred_tokens, gold_tokens):
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_score(prediction, golds):
    """Token-multiset F1, maximized over the gold answers."""
    pred_tokens = normalize_answer(prediction).split()
    return max(_f1_single(pred_tokens, normalize_answer(g).split()) for g in golds)


@dataclass
class EvalResult:
    em: float
    f1: float
    per_example: list  # (qid, em, f1)
    missing: int

    def to_report(self):
        return {
            "em": self.em,
            "f1": self.f1,
            "count": len(self.per_example),
            "missing": self.missing,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_report(), f, indent=2)
            f.write("\n")


def evaluate(predictions, examples):
    """Aggregate EM/F1 of a {qid: answer string} map against examples.

    Examples without a prediction score 0 and are counted in `missing`.
    """
    per_example = []
    missing = 0
    for ex in examples:
        pred = predictions.get(ex.qid)
        if pred is None:
            missing += 1
            per_example.append((ex.qid, 0.0, 0.0))
            continue
        per_example.append(
            (ex.qid, float(em_score(pred, ex.gold_answers)), f1_score(pred, ex.gold_answers))
        )
    count = len(per_example)
    em = sum(e for _, e, _ in per_example) / count if count else 0.0
    f1 = sum(f for _, _, f in per_example) / count if count else 0.0
    return EvalResult(em=em, f1=f1, per_example=per_example, missing=missing)
