import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmr.errors import ValidationError
from fedmr.evaluation import (
    heldout_rank,
    hr_at_k,
    metrics_from_ranks,
    ndcg_at_k,
    rank_items,
)
from fedmr.rng import stream


def brute_rank_items(scores, train_mask):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return np.array([i for i in order if not train_mask[i]], dtype=np.int64)


def test_ties_break_by_item_index():
    scores = np.zeros(5)
    mask = np.zeros(5, bool)
    assert rank_items(scores, mask).tolist() == [0, 1, 2, 3, 4]


def test_masked_items_never_ranked():
    scores = np.array([9.0, 1.0, 5.0, 7.0])
    mask = np.array([True, False, False, True])
    assert rank_items(scores, mask).tolist() == [2, 1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**9))
def test_rank_items_matches_brute_force(seed):
    g = stream(seed, "test", "rank")
    n = 2 + g.randbelow(30)
    scores = np.round(g.normals(n), 2)  # coarse grid forces frequent ties
    mask = g.uniforms(n) < 0.3
    if mask.all():
        mask[g.randbelow(n)] = False
    assert np.array_equal(rank_items(scores, mask), brute_rank_items(scores, mask))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**9))
def test_heldout_rank_is_position_in_ranking(seed):
    g = stream(seed, "test", "heldpos")
    n = 3 + g.randbelow(25)
    scores = np.round(g.normals(n), 2)
    mask = g.uniforms(n) < 0.3
    unmasked = np.flatnonzero(~mask)
    if unmasked.size == 0:
        mask[0] = False
        unmasked = np.array([0])
    held = int(unmasked[g.randbelow(unmasked.size)])
    ranked = rank_items(scores, mask)
    expected = int(np.flatnonzero(ranked == held)[0]) + 1
    assert heldout_rank(scores, mask, held) == expected


def test_heldout_rank_validates():
    scores = np.array([1.0, 2.0])
    with pytest.raises(ValidationError):
        heldout_rank(scores, np.array([False, True]), 1)
    with pytest.raises(ValidationError):
        heldout_rank(scores, np.array([False, False]), 7)


def test_hr_extremes():
    ranks = np.array([1, 1, 1])
    assert metrics_from_ranks(ranks, 5) == (1.0, 1.0)
    ranks = np.array([6, 7, 8])
    hr, ndcg = metrics_from_ranks(ranks, 5)
    assert hr == 0.0 and ndcg == 0.0


def test_ndcg_reference_values():
    hr, ndcg = metrics_from_ranks(np.array([2]), 10)
    assert hr == 1.0
    assert abs(ndcg - 1.0 / math.log2(3.0)) < 1e-12
    _, top = metrics_from_ranks(np.array([1]), 10)
    assert top == 1.0


def test_three_user_hand_enumeration():
    # user ranks 1, 3, 4 with K=3: hits are ranks 1 and 3
    ranks = np.array([1, 3, 4])
    hr, ndcg = metrics_from_ranks(ranks, 3)
    assert abs(hr - 2.0 / 3.0) < 1e-15
    expected = (1.0 + 1.0 / math.log2(4.0) + 0.0) / 3.0
    assert abs(ndcg - expected) < 1e-12


def exhaustive_metrics(all_scores, train_masks, held, k):
    hits, gains = [], []
    for scores, mask, h in zip(all_scores, train_masks, held):
        ranked = brute_rank_items(scores, mask)
        pos = list(ranked).index(h) + 1
        hits.append(1.0 if pos <= k else 0.0)
        gains.append(1.0 / math.log2(pos + 1.0) if pos <= k else 0.0)
    return float(np.mean(hits)), float(np.mean(gains))


def test_small_catalog_exhaustive_against_brute_force():
    g = stream(77, "test", "exhaustive")
    all_scores = [np.round(g.normals(6), 1) for _ in range(3)]
    train_masks = [g.uniforms(6) < 0.3 for _ in range(3)]
    held = []
    for m in train_masks:
        free = np.flatnonzero(~m)
        held.append(int(free[g.randbelow(free.size)]))
    for k in (1, 2, 3):
        ranks = np.array([
            heldout_rank(s, m, h)
            for s, m, h in zip(all_scores, train_masks, held)
        ])
        got = metrics_from_ranks(ranks, k)
        want = exhaustive_metrics(all_scores, train_masks, held, k)
        assert got[0] == want[0]
        assert abs(got[1] - want[1]) < 1e-15


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**9))
def test_ndcg_never_exceeds_hr(seed):
    g = stream(seed, "test", "bound")
    ranks = np.array([1 + g.randbelow(20) for _ in range(8)])
    hr, ndcg = metrics_from_ranks(ranks, 10)
    assert ndcg <= hr + 1e-15


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**9))
def test_ranking_invariant_under_affine_score_shift(seed):
    g = stream(seed, "test", "affine")
    n = 4 + g.randbelow(20)
    scores = g.normals(n)
    mask = g.uniforms(n) < 0.25
    assert np.array_equal(rank_items(scores, mask),
                          rank_items(2.0 * scores + 1.0, mask))


def test_k_equal_to_catalog_always_hits():
    g = stream(5, "test", "fullk")
    ranks = np.array([1 + g.randbelow(12) for _ in range(6)])
    hr, _ = metrics_from_ranks(ranks, 12)
    assert hr == 1.0


def test_hr_ndcg_reject_empty_and_bad_k():
    with pytest.raises(ValidationError):
        metrics_from_ranks(np.array([], dtype=np.int64), 5)
    with pytest.raises(ValidationError):
        metrics_from_ranks(np.array([1]), 0)
