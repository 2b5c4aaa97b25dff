"""Dataset ingestion (MRQA-style line-delimited JSON), the synthetic
key/value span-retrieval task, and batching.
"""

import gzip
import json
from dataclasses import dataclass

from .encoder import TokenizedInput, Vocab
from .errors import ConfigError, DataError
from .metrics import normalize_answer
from .numkit import Rng


@dataclass
class QAExample:
    qid: str
    question_tokens: list
    passage_tokens: list
    gold_answers: list
    gold_token_span: tuple  # (first, last) into passage_tokens, inclusive

    def __post_init__(self):
        i, j = self.gold_token_span
        if not (0 <= i <= j < len(self.passage_tokens)):
            raise DataError(
                f"{self.qid}: gold span {self.gold_token_span} out of bounds "
                f"for passage of {len(self.passage_tokens)} tokens"
            )
        if not self.gold_answers or any(not a for a in self.gold_answers):
            raise DataError(f"{self.qid}: gold answers must be non-empty")


# --- MRQA-format reading/writing ---------------------------------------------


def _open_maybe_gzip(path, mode="rt"):
    with open(path, "rb") as probe:
        magic = probe.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, mode, encoding="utf-8" if "t" in mode else None)
    return open(path, mode, encoding="utf-8" if "t" in mode else None)


def _token_strings(entries):
    # token lists come as [token, char_offset] pairs; tolerate bare strings
    return [e[0] if isinstance(e, (list, tuple)) else e for e in entries]


def read_mrqa_jsonl(path):
    """Parse an MRQA-format file (optionally gzipped).

    Returns (examples, skipped): one QAExample per question, taking the first
    token span of the first detected answer as the training target. Questions
    whose span is missing, out of bounds, or inconsistent with the context
    tokens are skipped and counted.
    """
    examples = []
    skipped = 0
    with _open_maybe_gzip(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if lineno == 1:
                if "header" not in obj:
                    raise DataError(f"{path}: first line must be a header object")
                continue
            ctx_tokens = _token_strings(obj["context_tokens"])
            for qa in obj.get("qas", []):
                qid = qa.get("qid") or qa.get("id") or f"{path}:{lineno}"
                q_tokens = _token_strings(qa["question_tokens"])
                answers = [a for a in qa.get("answers", []) if a]
                detected = qa.get("detected_answers") or []
                span, det_text = None, None
                for det in detected:
                    if det.get("token_spans"):
                        span = tuple(det["token_spans"][0])
                        det_text = det.get("text", "")
                        break
                if span is None:
                    skipped += 1
                    continue
                s, e = span
                if not (0 <= s <= e < len(ctx_tokens)):
                    skipped += 1
                    continue
                span_text = " ".join(ctx_tokens[s : e + 1])
                norm_span = normalize_answer(span_text)
                references = [det_text] + answers if det_text else answers
                if not any(norm_span == normalize_answer(r) for r in references):
                    skipped += 1
                    continue
                if not answers:
                    answers = [det_text]
                examples.append(
                    QAExample(
                        qid=qid,
                        question_tokens=q_tokens,
                        passage_tokens=ctx_tokens,
                        gold_answers=answers,
                        gold_token_span=(s, e),
                    )
                )
    return examples, skipped


def _with_offsets(tokens):
    out, pos = [], 0
    for t in tokens:
        out.append([t, pos])
        pos += len(t) + 1
    return out


def write_mrqa_jsonl(path, examples, dataset_name="synthetic"):
    """Write examples in the same line-delimited format the reader accepts.

    Deterministic byte-for-byte for a fixed input (gzip mtime pinned to 0
    when the path ends in .gz).
    """
    lines = [json.dumps({"header": {"dataset": dataset_name}})]
    for ex in examples:
        s, e = ex.gold_token_span
        entry = {
            "context": " ".join(ex.passage_tokens),
            "context_tokens": _with_offsets(ex.passage_tokens),
            "qas": [
                {
                    "qid": ex.qid,
                    "question": " ".join(ex.question_tokens),
                    "question_tokens": _with_offsets(ex.question_tokens),
                    "answers": ex.gold_answers,
                    "detected_answers": [
                        {
                            "text": " ".join(ex.passage_tokens[s : e + 1]),
                            "token_spans": [[s, e]],
                        }
                    ],
                }
            ],
        }
        lines.append(json.dumps(entry))
    payload = ("\n".join(lines) + "\n").encode("utf-8")
    if str(path).endswith(".gz"):
        with open(path, "wb") as raw:
            # filename="" and mtime=0 keep the archive byte-stable
            with gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as f:
                f.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)


# --- synthetic key/value retrieval task --------------------------------------


@dataclass
class SynthSpec:
    """Key/value span-retrieval task: each passage holds `num_keys` records
    (a key token followed by its value tokens), then filler to passage_len;
    the question is one key, the gold span is exactly its value.

    The token space splits into disjoint alphabets: 10% keys, 60% values,
    the rest filler.
    """

    vocab_size: int = 200
    num_keys: int = 4
    passage_len: int = 40
    value_len_range: tuple = (2, 4)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.value_len_range
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad value_len_range {self.value_len_range}")
        if self.num_keys * (1 + hi) > self.passage_len:
            raise ConfigError(
                f"{self.num_keys} records of up to {1 + hi} tokens cannot fit "
                f"a passage of {self.passage_len}"
            )
        if self.num_keys + self.n_value_tokens >= self.vocab_size:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small for {self.num_keys} keys "
                f"plus a {self.n_value_tokens}-token value alphabet"
            )
        if self.n_key_tokens < self.num_keys or self.n_filler_tokens < 1:
            raise ConfigError(
                f"vocab_size {self.vocab_size} leaves too few key/filler tokens"
            )

    @property
    def n_key_tokens(self):
        return max(self.num_keys, self.vocab_size // 10)

    @property
    def n_value_tokens(self):
        return (6 * self.vocab_size) // 10

    @property
    def n_filler_tokens(self):
        return self.vocab_size - self.n_key_tokens - self.n_value_tokens


def generate_synthetic(spec, n):
    """Deterministic dataset of `n` examples for the given spec/seed."""
    rng = Rng(spec.seed)
    lo, hi = spec.value_len_range
    examples = []
    for idx in range(n):
        key_ids = rng.permutation(spec.n_key_tokens)[: spec.num_keys]
        passage = []
        spans = []
        for k in key_ids:
            passage.append(f"k{k}")
            length = rng.integers(lo, hi + 1)
            start = len(passage)
            for _ in range(length):
                passage.append(f"v{rng.integers(0, spec.n_value_tokens)}")
            spans.append((start, start + length - 1))
        while len(passage) < spec.passage_len:
            passage.append(f"f{rng.integers(0, spec.n_filler_tokens)}")
        asked = rng.integers(0, spec.num_keys)
        s, e = spans[asked]
        examples.append(
            QAExample(
                qid=f"synth-{spec.seed}-{idx:06d}",
                question_tokens=[f"k{key_ids[asked]}"],
                passage_tokens=passage,
                gold_answers=[" ".join(passage[s : e + 1])],
                gold_token_span=(s, e),
            )
        )
    return examples


def build_vocab(examples):
    """Corpus vocabulary over question+passage tokens, specials first."""
    return Vocab.build(
        [ex.question_tokens + ex.passage_tokens for ex in examples]
    )


# --- batching -----------------------------------------------------------------


@dataclass
class Batch:
    inputs: list
    gold_spans: list  # sequence coordinates, aligned with inputs
    examples: list


def make_batch(examples, vocab, max_len):
    """Concatenate [question ; passage] per example, truncate the passage
    tail to fit max_len, and right-pad everything to the batch maximum.

    Gold indices come out in sequence coordinates (shifted by the question
    length). A gold span falling beyond the truncation point is an error.
    """
    rows = []
    for ex in examples:
        q_len = len(ex.question_tokens)
        if q_len >= max_len:
            raise DataError(f"{ex.qid}: question alone exceeds max_len {max_len}")
        keep = min(len(ex.passage_tokens), max_len - q_len)
        gold_s, gold_e = ex.gold_token_span
        if gold_e >= keep:
            raise DataError(
                f"{ex.qid}: gold span {ex.gold_token_span} truncated away "
                f"(passage cut to {keep} tokens)"
            )
        tokens = ex.question_tokens + ex.passage_tokens[:keep]
        ids = vocab.ids(tokens)
        segments = [0] * q_len + [1] * keep
        rows.append((ex, ids, segments, q_len, keep, (q_len + gold_s, q_len + gold_e)))

    width = max(len(ids) for _, ids, *_ in rows)
    inputs, golds, originals = [], [], []
    for ex, ids, segments, q_len, keep, gold in rows:
        pad = width - len(ids)
        inputs.append(
            TokenizedInput(
                token_ids=ids + [vocab.pad_id] * pad,
                segment_ids=segments + [0] * pad,
                padding_mask=[1.0] * len(ids) + [0.0] * pad,
                passage_span=(q_len, q_len + keep - 1),
            )
        )
        golds.append(gold)
        originals.append(ex)
    return Batch(inputs=inputs, gold_spans=golds, examples=originals)


def span_text(example, start, end):
    """Answer string for a (start, end) pair in sequence coordinates (the
    sequence is [question ; passage], so indices line up with this list)."""
    tokens = example.question_tokens + example.passage_tokens
    return " ".join(tokens[start : end + 1])
