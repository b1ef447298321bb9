import itertools
import math

import numpy as np
import pytest

from moe_prune import (
    CalibrationCache,
    activation_frequency,
    performance_matrix,
    reconstruction_loss,
    variability_scores,
)
from moe_prune.metrics import (
    PerformanceMatrix,
    load_performance_matrix,
    load_variability_scores,
    save_performance_matrix,
    save_variability_scores,
)
from moe_prune.moe_sim import forward_single_batch, forward_subset_batch

from conftest import make_planted, make_random_cache, make_random_layer


def make_gate_cache(gate_probs, hidden=2):
    gate_probs = np.asarray(gate_probs, dtype=np.float32)
    n = gate_probs.shape[0]
    zeros = np.zeros((n, hidden), dtype=np.float32)
    return CalibrationCache(inputs=zeros, outputs_full=zeros, gate_probs=gate_probs)


# ---------------------------------------------------------------------------
# reconstruction loss


def test_loss_zero_for_full_set(rng):
    layer = make_random_layer(rng, n=6, hidden=8, top_k=2)
    cache = make_random_cache(rng, layer, n_tokens=32)
    assert reconstruction_loss(cache, layer, range(6)) == 0.0


def test_loss_matches_scalar_oracle(rng):
    layer = make_random_layer(rng, n=4, hidden=4, ff=6, top_k=2)
    cache = make_random_cache(rng, layer, n_tokens=16)
    kept = [0, 2]
    pred = forward_subset_batch(layer, kept, cache.inputs)
    want = 0.0
    for t in range(16):
        for h in range(4):
            want += (float(pred[t, h]) - float(cache.outputs_full[t, h])) ** 2
    got = reconstruction_loss(cache, layer, kept)
    assert got == pytest.approx(want, rel=1e-10)


def test_loss_minimum_over_subsets(rng):
    layer = make_random_layer(rng, n=8, hidden=6, top_k=2)
    cache = make_random_cache(rng, layer, n_tokens=24)
    losses = {
        subset: reconstruction_loss(cache, layer, subset)
        for subset in itertools.combinations(range(8), 6)
    }
    minimum = min(losses.values())
    assert all(minimum <= v for v in losses.values())
    assert losses[(0, 1, 2, 3, 4, 5)] >= minimum


def test_loss_dimension_mismatch(rng):
    layer = make_random_layer(rng, n=4, hidden=8)
    other = make_random_layer(rng, n=4, hidden=6)
    cache = make_random_cache(rng, layer)
    with pytest.raises(ValueError, match="hidden dim"):
        reconstruction_loss(cache, other, [0, 1])


# ---------------------------------------------------------------------------
# variability scores


def test_constant_column_scores_zero():
    probs = np.full((64, 4), 0.25)
    scores = variability_scores(make_gate_cache(probs)).scores
    assert np.all(scores < 1e-9)


def test_one_hot_column_hits_log2_n():
    n = 1024
    probs = np.zeros((n, 2))
    probs[:, 1] = 1.0
    probs[0] = [1.0, 0.0]  # expert 0 fires exactly once
    probs[0, 1] = 0.0
    scores = variability_scores(make_gate_cache(probs)).scores
    assert scores[0] == pytest.approx(10.0, abs=1e-6)


def test_hand_evaluated_column():
    # column (0.5, 0.25, 0.125, 0.125) with Z = 1 over 4 tokens -> 0.25 bits
    probs = np.array(
        [
            [0.500, 0.500],
            [0.250, 0.750],
            [0.125, 0.875],
            [0.125, 0.875],
        ]
    )
    scores = variability_scores(make_gate_cache(probs)).scores
    assert scores[0] == pytest.approx(0.25, abs=1e-9)


def test_dead_expert_reported():
    probs = np.zeros((8, 3))
    probs[:, 0] = 1.0
    with pytest.raises(ValueError, match="expert 1"):
        variability_scores(make_gate_cache(probs))


def test_score_bounds_and_token_permutation(rng):
    for _ in range(20):
        n_tok = int(rng.integers(4, 64))
        probs = rng.random((n_tok, 5))
        probs /= probs.sum(axis=1, keepdims=True)
        cache = make_gate_cache(probs)
        scores = variability_scores(cache).scores
        assert np.all(scores >= 0.0)
        assert np.all(scores <= math.log2(n_tok) + 1e-9)
        perm = rng.permutation(n_tok)
        shuffled = variability_scores(make_gate_cache(probs[perm])).scores
        assert np.allclose(scores, shuffled, atol=1e-12)


# ---------------------------------------------------------------------------
# activation frequency


def test_frequency_full_topk_counts_everything(rng):
    layer = make_random_layer(rng, n=5)
    cache = make_random_cache(rng, layer, n_tokens=21)
    counts = activation_frequency(cache, top_k=5)
    assert np.all(counts == 21)


def test_frequency_uniform_rows_tie_break():
    probs = np.full((12, 4), 0.25)
    counts = activation_frequency(make_gate_cache(probs), top_k=2)
    assert list(counts) == [12, 12, 0, 0]


def test_frequency_matches_per_token_sort(rng):
    layer = make_random_layer(rng, n=7)
    cache = make_random_cache(rng, layer, n_tokens=40)
    counts = activation_frequency(cache, top_k=3)
    want = np.zeros(7, dtype=int)
    for row in cache.gate_probs:
        top = sorted(range(7), key=lambda i: (-row[i], i))[:3]
        for i in top:
            want[i] += 1
    assert np.array_equal(counts, want)


def test_frequency_topk_validated(rng):
    layer = make_random_layer(rng, n=4)
    cache = make_random_cache(rng, layer)
    with pytest.raises(ValueError, match="top_k"):
        activation_frequency(cache, top_k=5)


# ---------------------------------------------------------------------------
# performance matrix


def test_perf_zero_row_for_degenerate_layer(rng):
    layer = make_random_layer(rng, n=1, hidden=4, top_k=1)
    cache = make_random_cache(rng, layer, n_tokens=12)
    labels = np.array([t % 2 for t in range(12)])
    perf = performance_matrix(cache, layer, [0], labels)
    assert np.allclose(perf.errors, 0.0)
    assert list(perf.domain_sizes) == [6, 6]


def test_perf_single_domain_is_mean_error(rng):
    layer = make_random_layer(rng, n=4, hidden=6, top_k=2)
    cache = make_random_cache(rng, layer, n_tokens=15)
    perf = performance_matrix(cache, layer, [0, 1, 2, 3], np.zeros(15, dtype=int))
    for i in range(4):
        out = forward_single_batch(layer, i, cache.inputs).astype(np.float64)
        want = (((out - cache.outputs_full.astype(np.float64)) ** 2).sum(axis=1)).mean()
        assert perf.errors[i, 0] == pytest.approx(want, rel=1e-12)


def test_perf_specialist_best_in_own_domain():
    spec, layer, calib, _ = make_planted(seed=13, noise=0.0, tokens_per_domain=40)
    perf = performance_matrix(
        calib, layer, list(range(8)), calib.source_domain.astype(int)
    )
    for e in range(6):
        own = int(layer.specialist_domain[e])
        row = perf.errors[e]
        assert row[own] < min(row[d] for d in range(3) if d != own)


def test_perf_token_order_invariance(rng):
    layer = make_random_layer(rng, n=3, hidden=4)
    cache = make_random_cache(rng, layer, n_tokens=20)
    labels = np.array([t % 2 for t in range(20)])
    base = performance_matrix(cache, layer, [0, 1, 2], labels)
    perm = rng.permutation(20)
    shuffled_cache = CalibrationCache(
        inputs=cache.inputs[perm],
        outputs_full=cache.outputs_full[perm],
        gate_probs=cache.gate_probs[perm],
    )
    shuffled = performance_matrix(shuffled_cache, layer, [0, 1, 2], labels[perm])
    assert np.allclose(base.errors, shuffled.errors, rtol=1e-10)


def test_perf_empty_domain_rejected(rng):
    layer = make_random_layer(rng, n=3)
    cache = make_random_cache(rng, layer, n_tokens=6)
    labels = np.array([0, 0, 0, 2, 2, 2])  # domain 1 missing
    with pytest.raises(ValueError, match="domain 1"):
        performance_matrix(cache, layer, [0, 1], labels)


def test_perf_candidate_validation(rng):
    layer = make_random_layer(rng, n=3)
    cache = make_random_cache(rng, layer, n_tokens=6)
    labels = np.zeros(6, dtype=int)
    with pytest.raises(ValueError, match="duplicates"):
        performance_matrix(cache, layer, [0, 0], labels)
    with pytest.raises(ValueError, match="out of range"):
        performance_matrix(cache, layer, [0, 3], labels)


def test_perf_invariants_enforced():
    with pytest.raises(ValueError, match="nonnegative"):
        PerformanceMatrix(
            errors=np.array([[-1.0, 2.0]]), domain_sizes=[3, 3], candidate_ids=[0]
        )
    with pytest.raises(ValueError, match="at least one token"):
        PerformanceMatrix(
            errors=np.array([[1.0, 2.0]]), domain_sizes=[3, 0], candidate_ids=[0]
        )


# ---------------------------------------------------------------------------
# serialization


def test_scores_archive_round_trip(tmp_path, rng):
    probs = rng.random((32, 4))
    probs /= probs.sum(axis=1, keepdims=True)
    scores = variability_scores(make_gate_cache(probs))
    save_variability_scores(scores, str(tmp_path / "sv"))
    loaded = load_variability_scores(str(tmp_path / "sv"))
    assert loaded.n_total == 32
    assert np.allclose(loaded.scores, scores.scores, atol=1e-6)


def test_perf_archive_round_trip(tmp_path, rng):
    perf = PerformanceMatrix(
        errors=rng.random((5, 3)), domain_sizes=[4, 4, 4], candidate_ids=[1, 2, 4, 6, 7]
    )
    save_performance_matrix(perf, str(tmp_path / "perf"))
    loaded = load_performance_matrix(str(tmp_path / "perf"))
    assert np.allclose(loaded.errors, perf.errors, atol=1e-6)
    assert np.array_equal(loaded.candidate_ids, perf.candidate_ids)
