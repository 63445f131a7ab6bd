"""Scalar oracles for the pooling mixer: global aggregation + local max-pooling."""

import math

import numpy as np
import pytest

from hybridbert.gradcheck import grad_check
from hybridbert.pooling import (
    PoolingWeights,
    global_aggregation,
    local_max_pooling,
    pooling_mixer,
)
from hybridbert.tensor import Tensor, mul, neg_inf


def make_weights(d, heads, seed, dtype=np.float64, std=0.3):
    rng = np.random.default_rng(seed)
    return PoolingWeights.init(d, heads, rng, dtype=dtype, std=std)


def naive_global_aggregation(x, w, pad=None):
    """Loop oracle for one sequence (l, d): mean query, one cross-attention
    pass per head, Hadamard fuse with the output projection."""
    l, d = x.shape
    heads = w.num_heads
    dh = d // heads
    valid = np.ones(l, dtype=bool) if pad is None else ~pad
    h_q = x @ w.w_q.data + w.b_q.data
    h_k = x @ w.w_k.data + w.b_k.data
    h_v = x @ w.w_v.data + w.b_v.data
    h_o = x @ w.w_o.data + w.b_o.data
    h_avg = h_q[valid].mean(axis=0)
    h_att = np.zeros(d)
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        logits = np.array([
            np.dot(h_avg[cols], h_k[j, cols]) / math.sqrt(dh) if valid[j]
            else neg_inf(np.float64)
            for j in range(l)
        ])
        e = np.exp(logits - logits.max())
        weights = e / e.sum()
        for j in range(l):
            h_att[cols] += weights[j] * h_v[j, cols]
    return h_o * h_att[None, :]


def naive_local_max_pooling(x, w, pad=None):
    """Window-3 stride-1 per-channel max, edges shrunk, padded rows zeroed."""
    l, d = x.shape
    h_l = x @ w.w_l.data + w.b_l.data
    valid = np.ones(l, dtype=bool) if pad is None else ~pad
    out = np.zeros((l, d))
    for i in range(l):
        if not valid[i]:
            continue
        neighborhood = [j for j in (i - 1, i, i + 1) if 0 <= j < l and valid[j]]
        out[i] = h_l[neighborhood].max(axis=0)
    return out


@pytest.mark.parametrize("l,d,heads,seed", [(6, 8, 2, 0), (16, 32, 4, 1), (9, 12, 3, 2)])
def test_global_aggregation_matches_loop_oracle(l, d, heads, seed):
    rng = np.random.default_rng(seed + 50)
    x = rng.normal(size=(l, d))
    pad = np.zeros(l, dtype=bool)
    pad[-2:] = True
    w = make_weights(d, heads, seed)
    got = global_aggregation(Tensor(x), w, pad).data
    np.testing.assert_allclose(got, naive_global_aggregation(x, w, pad),
                               atol=1e-10, rtol=0)
    got_nomask = global_aggregation(Tensor(x), w).data
    np.testing.assert_allclose(got_nomask, naive_global_aggregation(x, w),
                               atol=1e-10, rtol=0)


@pytest.mark.parametrize("l,d,seed", [(5, 8, 3), (16, 32, 4), (1, 4, 5), (2, 6, 6)])
def test_local_max_pooling_matches_window_scan(l, d, seed):
    rng = np.random.default_rng(seed + 60)
    x = rng.normal(size=(l, d))
    w = make_weights(d, 1, seed)
    got = local_max_pooling(Tensor(x), w).data
    np.testing.assert_allclose(got, naive_local_max_pooling(x, w), atol=1e-10, rtol=0)


def test_local_max_pooling_ignores_and_zeroes_padding():
    rng = np.random.default_rng(7)
    l, d = 8, 6
    x = rng.normal(size=(l, d))
    pad = np.zeros(l, dtype=bool)
    pad[[3, 6, 7]] = True
    w = make_weights(d, 1, 7)
    got = local_max_pooling(Tensor(x), w, pad).data
    np.testing.assert_allclose(got, naive_local_max_pooling(x, w, pad), atol=1e-10, rtol=0)
    assert np.all(got[pad] == 0.0)  # sentinel never leaks into the residual path


def test_pooling_mixer_is_sum_of_branches():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 7, 8))
    pad = np.zeros((2, 7), dtype=bool)
    pad[0, -1] = True
    w = make_weights(8, 2, 8)
    ga = global_aggregation(Tensor(x), w, pad).data
    lmp = local_max_pooling(Tensor(x), w, pad).data
    both = pooling_mixer(Tensor(x), w, pad).data
    np.testing.assert_array_equal(both, ga + lmp)


def test_ablations_equal_surviving_branch_exactly():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 9, 12)).astype(np.float32)
    pad = rng.random((2, 9)) < 0.2
    pad[:, 0] = False
    w = make_weights(12, 3, 9, dtype=np.float32)
    only_lmp = pooling_mixer(Tensor(x), w, pad, disable_ga=True).data
    only_ga = pooling_mixer(Tensor(x), w, pad, disable_lmp=True).data
    assert np.array_equal(only_lmp, local_max_pooling(Tensor(x), w, pad).data)
    assert np.array_equal(only_ga, global_aggregation(Tensor(x), w, pad).data)
    with pytest.raises(ValueError):
        pooling_mixer(Tensor(x), w, pad, disable_ga=True, disable_lmp=True)


def test_global_aggregation_ignores_padded_content():
    rng = np.random.default_rng(10)
    l, d = 10, 8
    x = rng.normal(size=(l, d))
    pad = np.zeros(l, dtype=bool)
    pad[5:] = True
    w = make_weights(d, 2, 10)
    base = pooling_mixer(Tensor(x), w, pad).data
    x2 = x.copy()
    x2[5:] = rng.normal(size=(5, d)) * 100
    moved = pooling_mixer(Tensor(x2), w, pad).data
    np.testing.assert_array_equal(base[:5], moved[:5])


def test_global_aggregation_rejects_fully_padded_sequence():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(2, 4, 8)))
    pad = np.zeros((2, 4), dtype=bool)
    pad[1] = True
    with pytest.raises(ValueError):
        global_aggregation(x, make_weights(8, 2, 11), pad)


def test_batched_agrees_with_per_sequence():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(3, 8, 12))
    pad = rng.random((3, 8)) < 0.25
    pad[:, 0] = False
    w = make_weights(12, 2, 12)
    batched = pooling_mixer(Tensor(x), w, pad).data
    for b in range(3):
        single = pooling_mixer(Tensor(x[b]), w, pad[b]).data
        np.testing.assert_allclose(batched[b], single, atol=1e-12, rtol=0)


def test_pooling_gradients_pass_finite_differences():
    rng = np.random.default_rng(13)
    l, d = 7, 8
    x = Tensor(rng.normal(size=(2, l, d)) * 0.5, requires_grad=True)
    w = make_weights(d, 2, 13)
    pad = np.zeros((2, l), dtype=bool)
    pad[1, -2:] = True
    probe = rng.normal(size=(2, l, d)) * 0.05

    def f(*ts):
        return mul(pooling_mixer(ts[0], w, pad), probe).sum()

    worst = grad_check(f, (x, w.w_q, w.w_k, w.w_v, w.w_o, w.b_o, w.w_l, w.b_l), h=1e-5)
    assert worst < 1e-6, f"worst relative error {worst:.3e}"


def test_window_geometry_validated():
    rng = np.random.default_rng(14)
    w = make_weights(8, 2, 14)
    with pytest.raises(ValueError):
        PoolingWeights(w.w_q, w.b_q, w.w_k, w.b_k, w.w_v, w.b_v,
                       w.w_o, w.b_o, w.w_l, w.b_l, num_heads=2, lmp_window=4)
    with pytest.raises(ValueError):
        PoolingWeights(w.w_q, w.b_q, w.w_k, w.b_k, w.w_v, w.b_v,
                       w.w_o, w.b_o, w.w_l, w.b_l, num_heads=2, lmp_stride=2)
