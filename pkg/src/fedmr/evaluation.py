"""Masked full-catalog ranking and the two leave-one-out metrics.

Scores are ranked descending over the whole catalog minus the user's train
positives; ties break by ascending item index. HR@K is the fraction of users
whose held-out item lands in the top K; NDCG@K discounts the hit by
1/log2(rank+1) (the leave-one-out ideal DCG is 1).
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def rank_items(scores: np.ndarray, train_mask: np.ndarray) -> np.ndarray:
    """Item indices by descending score, train positives removed.

    Stable sort on negated scores, so equal scores keep ascending index
    order.
    """
    s = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(train_mask, dtype=bool)
    if s.shape != mask.shape or s.ndim != 1:
        raise ValidationError("rank_items: scores and mask must be aligned vectors")
    order = np.argsort(-s, kind="stable")
    return order[~mask[order]]


def heldout_rank(scores: np.ndarray, train_mask: np.ndarray, held: int) -> int:
    """1-based rank of the held-out item among unmasked items.

    Equivalent to rank_items(...).tolist().index(held) + 1, in O(n).
    """
    s = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(train_mask, dtype=bool)
    if not 0 <= held < s.size:
        raise ValidationError(f"held-out item {held} outside catalog")
    if mask[held]:
        raise ValidationError(f"held-out item {held} is masked")
    sh = s[held]
    alive = ~mask
    better = (s > sh) & alive
    tied_before = (s == sh) & alive
    tied_before[held:] = False
    return int(better.sum() + tied_before.sum()) + 1


def _ranks(ranked_lists, held_out) -> np.ndarray:
    held = np.asarray(held_out, dtype=np.int64)
    if len(ranked_lists) != held.size:
        raise ValidationError("one held-out item per ranked list required")
    out = np.empty(held.size, dtype=np.int64)
    for u, ranked in enumerate(ranked_lists):
        pos = np.flatnonzero(np.asarray(ranked) == held[u])
        if pos.size == 0:
            raise ValidationError(f"user {u}: held-out item {held[u]} missing from ranking")
        out[u] = pos[0] + 1
    return out


def hr_at_k(ranked_lists, held_out, k: int) -> float:
    """Fraction of users whose held-out item ranks in the top k."""
    ranks = _ranks(ranked_lists, held_out)
    return float((ranks <= k).mean())


def ndcg_at_k(ranked_lists, held_out, k: int) -> float:
    """Mean of 1/log2(rank+1) over users whose item ranks in the top k."""
    ranks = _ranks(ranked_lists, held_out)
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.mean())


def metrics_from_ranks(ranks: np.ndarray, k: int) -> tuple[float, float]:
    """(HR@K, NDCG@K) from precomputed 1-based held-out ranks."""
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValidationError("metrics need at least one evaluated user")
    if k < 1:
        raise ValidationError(f"K must be positive, got {k}")
    if (ranks < 1).any():
        raise ValidationError("ranks are 1-based; found a rank below 1")
    hr = float((ranks <= k).mean())
    ndcg = float(np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
    return hr, ndcg
