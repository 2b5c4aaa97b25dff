import math

import numpy as np
import pytest

from dyrex import attention, numkit
from dyrex.attention import MaskStrategy, build_query_mask
from dyrex.errors import ConfigError, MaskError
from helpers import central_diff, identity_mha, rel_err, softmax_direct


def C(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def random_mha(d=4, heads=2, seed=0):
    store = numkit.ParamStore()
    params = attention.init_mha_params(store, "att", d, heads, numkit.Rng(seed))
    for b in (params.b_q, params.b_v, params.b_o):
        b.value[...] = numkit.Rng(seed + 1).normal_matrix(1, d, std=0.1)
    return store, params


# --- query-interaction masks ----------------------------------------------------


def test_bidirectional_mask_is_all_ones():
    assert np.array_equal(build_query_mask(MaskStrategy.BIDIRECTIONAL), np.ones((2, 2)))


def test_causal_mask_start_cannot_see_end():
    mask = build_query_mask(MaskStrategy.CAUSAL)
    assert np.array_equal(mask, [[1.0, 0.0], [1.0, 1.0]])


def test_independent_mask_is_identity():
    assert np.array_equal(build_query_mask(MaskStrategy.INDEPENDENT), np.eye(2))


def test_strategy_parse():
    assert MaskStrategy.parse("Causal") is MaskStrategy.CAUSAL
    with pytest.raises(ConfigError):
        MaskStrategy.parse("diagonal")


# --- forward ---------------------------------------------------------------------


def test_single_key_returns_its_value_row():
    store = numkit.ParamStore()
    params = identity_mha(store, "att", 3)
    kv = C([[0.5, -1.0, 2.0]])
    queries = C(numkit.Rng(7).normal_matrix(4, 3))
    out, cache = attention.mha_forward(params, queries, kv)
    assert np.allclose(out, np.repeat(kv, 4, axis=0), atol=1e-12)
    assert np.allclose(cache.attn_weights[0], 1.0, atol=0)


def test_zero_queries_average_the_values():
    store = numkit.ParamStore()
    params = identity_mha(store, "att", 2)
    kv = C([[1.0, 2.0], [3.0, 6.0], [5.0, 10.0]])
    out, cache = attention.mha_forward(params, C(np.zeros((1, 2))), kv)
    assert np.allclose(out, kv.mean(axis=0, keepdims=True), atol=1e-12)
    assert np.allclose(cache.attn_weights[0], 1.0 / 3.0, atol=1e-12)


def test_hand_computed_single_head():
    store = numkit.ParamStore()
    params = identity_mha(store, "att", 2)
    q = C([[1.0, 0.0]])
    kv = C([[2.0, 1.0], [-1.0, 3.0]])
    out, _ = attention.mha_forward(params, q, kv)
    # scores = [2, -1]/sqrt(2); softmax; output = p0*kv0 + p1*kv1
    p = softmax_direct([2.0 / math.sqrt(2.0), -1.0 / math.sqrt(2.0)])
    expected = p[0] * kv[0] + p[1] * kv[1]
    assert np.max(np.abs(out[0] - expected)) < 1e-12


def test_attention_weight_rows_sum_to_one_and_masked_zero(rng):
    store, params = random_mha(d=6, heads=3)
    queries = C(rng.normal(size=(4, 6)))
    kv = C(rng.normal(size=(5, 6)))
    mask = C((rng.random((4, 5)) < 0.6).astype(float))
    mask[:, 2] = 1.0
    _, cache = attention.mha_forward(params, queries, kv, mask=mask)
    for probs in cache.attn_weights:
        assert np.all(np.abs(probs.sum(axis=1) - 1.0) < 1e-9)
        assert np.all(probs[mask == 0.0] == 0.0)


def test_fully_masked_query_row_rejected(rng):
    store, params = random_mha()
    queries = C(rng.normal(size=(2, 4)))
    kv = C(rng.normal(size=(3, 4)))
    mask = C([[1, 1, 1], [0, 0, 0]])
    with pytest.raises(MaskError):
        attention.mha_forward(params, queries, kv, mask=mask)


def test_head_count_must_divide_dim():
    store = numkit.ParamStore()
    with pytest.raises(ConfigError):
        attention.init_mha_params(store, "att", 6, 4, numkit.Rng(0))


def test_padded_keys_do_not_affect_output(rng):
    store, params = random_mha(d=4, heads=2)
    queries = C(rng.normal(size=(3, 4)))
    kv = C(rng.normal(size=(5, 4)))
    out_short, _ = attention.mha_forward(params, queries, kv,
                                         key_padding=np.ones(5))
    extra = C(np.vstack([kv, rng.normal(size=(2, 4))]))
    padding = np.array([1.0] * 5 + [0.0] * 2)
    out_padded, _ = attention.mha_forward(params, queries, extra, key_padding=padding)
    assert np.max(np.abs(out_short - out_padded)) < 1e-9


def test_permutation_equivariance_of_keys(rng):
    store, params = random_mha(d=4, heads=2)
    queries = C(rng.normal(size=(2, 4)))
    kv = C(rng.normal(size=(6, 4)))
    padding = C((rng.random(6) < 0.8).astype(float)).ravel()
    padding[0] = 1.0
    out, _ = attention.mha_forward(params, queries, kv, key_padding=padding)
    perm = rng.permutation(6)
    out_p, _ = attention.mha_forward(
        params, queries, C(kv[perm]), key_padding=padding[perm]
    )
    assert np.max(np.abs(out - out_p)) < 1e-9


def test_independent_mask_isolates_query_rows(rng):
    store, params = random_mha(d=4, heads=2)
    mask = build_query_mask(MaskStrategy.INDEPENDENT)
    q = C(rng.normal(size=(2, 4)))
    out, _ = attention.mha_forward(params, q, q, mask=mask)
    q2 = q.copy()
    q2[1] += rng.normal(size=4)
    out2, _ = attention.mha_forward(params, q2, q2, mask=mask)
    assert np.array_equal(out[0], out2[0])


# --- backward --------------------------------------------------------------------


def _loss_for(params, queries, kv, mask, key_padding, g):
    out, _ = attention.mha_forward(params, queries, kv, mask=mask, key_padding=key_padding)
    return float((out * g).sum())


def test_mha_backward_finite_differences(rng):
    store, params = random_mha(d=4, heads=2, seed=3)
    queries = C(rng.normal(size=(2, 4)))
    kv = C(rng.normal(size=(5, 4)))
    mask = C((rng.random((2, 5)) < 0.7).astype(float))
    mask[:, 0] = 1.0
    padding = np.array([1.0, 1.0, 1.0, 1.0, 0.0])
    # small upstream gradient keeps |loss| small, so FD noise stays well under
    # the rel_err floor for near-zero coordinates
    g = C(rng.normal(size=(2, 4)) * 0.1)

    out, cache = attention.mha_forward(params, queries, kv, mask=mask, key_padding=padding)
    store.zero_grads()
    gq, gkv = attention.mha_backward(params, cache, g)

    fd_q = central_diff(lambda v: _loss_for(params, C(v), kv, mask, padding, g), queries.copy())
    fd_kv = central_diff(lambda v: _loss_for(params, queries, C(v), mask, padding, g), kv.copy())
    assert rel_err(gq, fd_q, floor=1e-5) < 1e-6
    assert rel_err(gkv, fd_kv, floor=1e-5) < 1e-6

    for p in store.params():
        fd = central_diff(
            lambda v, pp=p: (_swap_and_loss(pp, v, params, queries, kv, mask, padding, g)),
            p.value.copy(),
        )
        assert rel_err(p.grad, fd, floor=1e-5) < 1e-6, p.name


def _swap_and_loss(param, new_value, params, queries, kv, mask, padding, g):
    original = param.value.copy()
    param.value[...] = new_value
    try:
        return _loss_for(params, queries, kv, mask, padding, g)
    finally:
        param.value[...] = original


def test_zero_upstream_gradient_gives_zero_param_grads(rng):
    store, params = random_mha()
    queries = C(rng.normal(size=(2, 4)))
    kv = C(rng.normal(size=(3, 4)))
    _, cache = attention.mha_forward(params, queries, kv)
    store.zero_grads()
    attention.mha_backward(params, cache, C(np.zeros((2, 4))))
    for p in store.params():
        assert np.array_equal(p.grad, np.zeros_like(p.grad)), p.name


def test_padded_key_rows_receive_zero_gradient(rng):
    store, params = random_mha(d=4, heads=2)
    queries = C(rng.normal(size=(2, 4)))
    kv = C(rng.normal(size=(4, 4)))
    padding = np.array([1.0, 1.0, 0.0, 1.0])
    _, cache = attention.mha_forward(params, queries, kv, key_padding=padding)
    store.zero_grads()
    _, gkv = attention.mha_backward(params, cache, C(numkit.Rng(5).normal_matrix(2, 4)))
    assert np.array_equal(gkv[2], np.zeros(4))
    fd = central_diff(
        lambda v: _loss_for(params, queries, C(v), None, padding,
                            C(numkit.Rng(5).normal_matrix(2, 4))),
        kv.copy(),
    )
    assert np.max(np.abs(fd[2])) < 1e-9
