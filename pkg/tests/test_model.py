import json

import numpy as np
import pytest

from dyrex import numkit
from dyrex.encoder import load_precomputed_embeddings
from dyrex.errors import ConfigError, FormatError
from dyrex.model import QAModel
from helpers import small_model, toy_batch


def test_forward_shapes_and_distributions():
    model, vocab, batch = toy_batch()
    state = model.forward(batch.inputs[0])
    n = len(batch.inputs[0])
    assert state.h.shape == (n, model.encoder_config.d)
    assert abs(state.dists.p_start.sum() - 1.0) < 1e-9
    assert abs(state.dists.p_end.sum() - 1.0) < 1e-9
    first, last = batch.inputs[0].passage_span
    assert np.all(state.dists.p_start[:first] == 0.0)


def test_loss_positive_and_backward_populates_grads():
    model, vocab, batch = toy_batch()
    model.zero_grads()
    state = model.forward(batch.inputs[0])
    loss = model.loss(state, batch.gold_spans[0])
    assert loss > 0.0
    model.backward(state, batch.gold_spans[0])
    nonzero = sum(
        1 for p in model.trainable_params() if np.abs(p.grad).max() > 0
    )
    assert nonzero > len(model.trainable_params()) * 0.9


def test_precomputed_representations_bypass_encoder(tmp_path, rng):
    model, vocab, batch = toy_batch()
    inp = batch.inputs[0]
    h = np.ascontiguousarray(rng.normal(size=(len(inp), model.encoder_config.d)))
    path = tmp_path / "h.mat"
    numkit.save_matrix(path, h)
    loaded = load_precomputed_embeddings(path)
    state = model.forward(inp, h_override=loaded)
    assert np.array_equal(state.h, h)
    # encoder grads untouched by backward when representations are external
    model.zero_grads()
    model.backward(state, batch.gold_spans[0])
    assert np.abs(model.encoder_params.token_emb.grad).max() == 0.0
    assert np.abs(model.bank.start_query.grad).max() > 0.0


def test_frozen_encoder_is_excluded_from_trainable_params():
    model = small_model(trainable=False)
    names = [p.name for p in model.trainable_params()]
    assert names and all(not n.startswith("encoder.") for n in names)


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    model, vocab, batch = toy_batch()
    ckpt = tmp_path / "ckpt"
    model.save_checkpoint(ckpt, vocab=vocab)
    restored, vocab2 = QAModel.load_checkpoint(ckpt)
    assert vocab2.tokens == vocab.tokens
    for p, q in zip(model.store.params(), restored.store.params()):
        assert p.name == q.name
        assert np.array_equal(p.value, q.value)
    a = model.forward(batch.inputs[0])
    b = restored.forward(batch.inputs[0])
    assert np.array_equal(a.dists.p_start, b.dists.p_start)


def test_checkpoint_detects_missing_and_malformed_pieces(tmp_path):
    model, vocab, batch = toy_batch()
    ckpt = tmp_path / "ckpt"
    model.save_checkpoint(ckpt, vocab=vocab)
    (ckpt / "head.bank.start_query.mat").unlink()
    with pytest.raises(FormatError, match="missing"):
        QAModel.load_checkpoint(ckpt)
    with pytest.raises(FormatError, match="manifest"):
        QAModel.load_checkpoint(tmp_path / "nowhere")


def test_checkpoint_shape_mismatch_is_config_error(tmp_path):
    model, vocab, batch = toy_batch()
    ckpt = tmp_path / "ckpt"
    model.save_checkpoint(ckpt, vocab=vocab)
    other = small_model(d=16, vocab_size=len(vocab))
    with pytest.raises(ConfigError, match="shape"):
        other.load_values(ckpt)


def test_decoder_head_count_must_divide_dim():
    with pytest.raises(ConfigError, match="divisible"):
        small_model(d=6, heads=4)


def test_predict_returns_span_within_passage():
    model, vocab, batch = toy_batch()
    pred = model.predict(batch.inputs[0])
    first, last = batch.inputs[0].passage_span
    assert first <= pred.start <= pred.end <= last
    assert pred.end - pred.start + 1 <= model.head_config.max_answer_len
