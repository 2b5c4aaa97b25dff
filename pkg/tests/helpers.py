"""Independent oracles and small builders shared by the test modules.

The oracles deliberately avoid the package's compute paths: plain Python
loops, math.exp/math.erf, and explicit formulas.
"""

import math

import numpy as np

from dyrex import attention, data, numkit
from dyrex.encoder import EncoderConfig
from dyrex.model import QAModel
from dyrex.qahead import HeadConfig


# --- oracles -------------------------------------------------------------------


def matmul_triple_loop(a, b):
    """Naive i,j,k product over Python floats; the bitwise reference."""
    al, bl = np.asarray(a).tolist(), np.asarray(b).tolist()
    m, kk, n = len(al), len(bl), len(bl[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for k in range(kk):
                s += al[i][k] * bl[k][j]
            out[i][j] = s
    return np.array(out)


def softmax_direct(row, mask=None):
    """Direct exponentiation with math.exp (no shift)."""
    row = list(row)
    if mask is None:
        mask = [1.0] * len(row)
    exps = [math.exp(v) if m > 0 else 0.0 for v, m in zip(row, mask)]
    z = sum(exps)
    return np.array([e / z for e in exps])


def gelu_scalar(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def central_diff(f, x, h=1e-5):
    """Elementwise central finite differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = f(x)
        flat[idx] = orig - h
        fm = f(x)
        flat[idx] = orig
        gflat[idx] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def brute_force_decode(p_start, p_end, allowed, max_answer_len):
    """O(N^2) reference for constrained span decoding with the tie rule
    (max score, then smaller start, then smaller end)."""
    n = len(p_start)
    best = None
    for i in range(n):
        for j in range(n):
            if j < i or j - i + 1 > max_answer_len:
                continue
            if allowed[i] == 0.0 or allowed[j] == 0.0:
                continue
            cand = (-(p_start[i] * p_end[j]), i, j)
            if best is None or cand < best:
                best = cand
    if best is None:
        return None
    return best[1], best[2]


def adam_reference(theta, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scripted Adam on a scalar parameter over a gradient sequence."""
    m = v = 0.0
    t = 0
    for g in grads:
        t += 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
    return theta


# --- builders ------------------------------------------------------------------


def small_model(d=8, n_layers=1, heads=2, strategy="bidirectional", vocab_size=23,
                enc_layers=0, trainable=True, seed=0, restrict=True, max_len=32):
    enc_cfg = EncoderConfig(
        vocab_size=vocab_size, d=d, num_layers=enc_layers, num_heads=heads,
        max_len=max_len, trainable=trainable,
    )
    head_cfg = HeadConfig(
        num_layers=n_layers, num_heads=heads, strategy=strategy,
        restrict_to_passage=restrict,
    )
    return QAModel(enc_cfg, head_cfg, seed)


def toy_examples(n=6, seed=0, num_keys=3, passage_len=18, value_len=(2, 3)):
    spec = data.SynthSpec(
        vocab_size=60, num_keys=num_keys, passage_len=passage_len,
        value_len_range=value_len, seed=seed,
    )
    return data.generate_synthetic(spec, n), spec


def toy_batch(model=None, n=4, seed=0):
    examples, _ = toy_examples(n=n, seed=seed)
    vocab = data.build_vocab(examples)
    if model is None:
        model = small_model(vocab_size=len(vocab))
    batch = data.make_batch(examples, vocab, model.encoder_config.max_len)
    return model, vocab, batch


def identity_mha(store, prefix, d, heads=1):
    """MhaParams with identity projections and zero biases."""
    rng = numkit.Rng(0)
    p = attention.init_mha_params(store, prefix, d, heads, rng)
    for w in (p.w_q, p.w_k, p.w_v, p.w_o):
        w.value[...] = np.eye(d)
    for b in (p.b_q, p.b_v, p.b_o):
        b.value[...] = 0.0
    return p
