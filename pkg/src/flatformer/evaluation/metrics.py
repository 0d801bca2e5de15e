"""Threshold-free and thresholded prediction metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from ..errors import DataError

DEFAULT_LENGTH_BUCKETS = (50, 100, 200)


def auc(scores, labels) -> float | None:
    """ROC AUC via the Mann-Whitney U statistic with mid-ranks for ties.

    Returns ``None`` when only one class is present (AUC undefined).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise DataError(f"auc: {s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pairwise_auc(scores, labels) -> float | None:
    """O(n^2) reference: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        return None
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return float(wins / (pos.size * neg.size))


def acc(scores, labels, threshold: float = 0.5) -> float:
    """Fraction correct when predicting 1 for ``score >= threshold``."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0:
        raise DataError("acc: empty input")
    if s.shape != y.shape:
        raise DataError(f"acc: {s.size} scores vs {y.size} labels")
    return float(np.mean((s >= threshold).astype(int) == y.astype(int)))


def macro_auc(scores, labels, groups) -> float | None:
    """Mean of per-group AUCs, skipping single-class groups."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    g = np.asarray(groups)
    values = [auc(s[g == k], y[g == k]) for k in np.unique(g)]
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def bucket_label(lo: float, hi: float | None) -> str:
    if lo == 0:
        return f"<{hi}"
    return f">{lo}" if hi is None else f"{lo}-{hi}"


def length_buckets(scores, labels, lengths, boundaries: Sequence[int] = DEFAULT_LENGTH_BUCKETS) -> list[dict]:
    """AUC per source-sequence-length bucket.

    With boundaries ``(50, 100, 200)`` the buckets are ``<50``, ``50-100``,
    ``100-200`` and ``>200`` (lower edge inclusive).  A bucket whose labels
    are all one class reports ``auc=None``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n = np.asarray(lengths)
    edges = [0, *boundaries, None]
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (n >= lo) if hi is None else (n >= lo) & (n < hi)
        rows.append({
            "bucket": bucket_label(lo, hi),
            "lo": lo,
            "hi": hi,
            "count": int(sel.sum()),
            "auc": auc(s[sel], y[sel]) if sel.any() else None,
        })
    return rows
