"""Ranking and multi-label classification metrics, implemented from scratch.

auroc returns the Mann-Whitney statistic rounded half-even onto the 2^-53
grid. The quantization is far below any statistical resolution but makes the
complement identity auroc(s, y) == 1 - auroc(s, 1 - y) hold exactly in
float64 for every input, which plain correctly-rounded division does not.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

__all__ = ["auroc", "auprc", "micro_f1"]

_GRID = 2**53


def _check_binary(labels, name):
    arr = np.asarray(labels)
    if arr.size == 0:
        raise ValueError(f"{name}: empty label vector")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name}: labels must be 0 or 1")
    return arr.astype(np.int64).reshape(-1)


def auroc(scores, labels):
    """Probability that a random positive outranks a random negative.

    Ties count one half. Raises on single-class input.
    """
    y = _check_binary(labels, "auroc")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"auroc: got {s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc: undefined for single-class input")

    # Average ranks within tie groups; the positives' rank sum gives
    # wins + ties/2 exactly (all values are multiples of 1/2).
    order = np.argsort(s, kind="stable")
    sorted_scores = s[order]
    ranks = np.empty(y.size, dtype=np.float64)
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    u_twice = int(round(2.0 * rank_sum)) - n_pos * (n_pos + 1)  # 2*(wins + ties/2)
    denom = n_pos * n_neg

    k = round(Fraction(u_twice * (_GRID // 2), denom))
    return float(k) / _GRID


def auprc(scores, labels):
    """Average precision: step integral of precision over recall.

    Thresholds sweep distinct scores in descending order with ties grouped.
    """
    y = _check_binary(labels, "auprc")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"auprc: got {s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("auprc: needs at least one positive")

    order = np.argsort(-s, kind="stable")
    y_sorted = y[order]
    s_sorted = s[order]
    distinct = np.nonzero(np.diff(s_sorted))[0]  # last index of each tie group
    cut = np.concatenate([distinct, [y.size - 1]])
    tp = np.cumsum(y_sorted)[cut].astype(np.float64)
    total = (cut + 1).astype(np.float64)
    precision = tp / total
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def micro_f1(pred, truth):
    """F1 over counts pooled across all sample-label cells; 0 if degenerate."""
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"micro_f1: shape mismatch {p.shape} vs {t.shape}")
    _check_binary(p, "micro_f1")
    _check_binary(t, "micro_f1")
    p = p.astype(np.int64)
    t = t.astype(np.int64)
    tp = int(((p == 1) & (t == 1)).sum())
    fp = int(((p == 1) & (t == 0)).sum())
    fn = int(((p == 0) & (t == 1)).sum())
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2 * tp / denom
