"""Comparison metrics: one-sided Wilcoxon signed-rank and average rank.

The Wilcoxon test follows the zero-drop convention with mid-rank ties:
exact null distribution by sign enumeration up to n = 25 (dynamic
program over doubled rank sums, so half-integer mid-ranks stay exact),
normal approximation with continuity and tie correction above.
"""

import math

import numpy as np
from scipy.stats import norm, rankdata

EXACT_LIMIT = 25


def wilcoxon_signed_rank(acc_a, acc_b):
    """One-sided p-value for the alternative "a > b" over paired scores."""
    a = np.asarray(acc_a, dtype=float)
    b = np.asarray(acc_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValueError("expected two equally sized 1-D paired vectors")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = rankdata(np.abs(d))                 # mid-rank ties
    w_plus = float(ranks[d > 0].sum())

    if n <= EXACT_LIMIT:
        # doubled ranks are integers even with .5 mid-ranks
        r2 = np.rint(2.0 * ranks).astype(np.int64)
        total = int(r2.sum())
        counts = np.zeros(total + 1, dtype=np.int64)
        counts[0] = 1
        for r in r2:
            shifted = np.zeros_like(counts)
            shifted[r:] = counts[:total + 1 - r]
            counts = counts + shifted
        w2 = int(np.rint(2.0 * w_plus))
        return float(counts[w2:].sum() / (2.0 ** n))

    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    z = (w_plus - 0.5 - mu) / math.sqrt(var)
    return float(norm.sf(z))


def average_rank(acc_table):
    """acc_table: [models, datasets]. Per dataset, rank models by accuracy
    descending (mid-rank ties); return the mean rank per model."""
    table = np.asarray(acc_table, dtype=float)
    if table.ndim != 2:
        raise ValueError("expected a [models, datasets] table")
    ranks = np.apply_along_axis(lambda col: rankdata(-col), 0, table)
    return ranks.mean(axis=1)


def accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    return 100.0 * float((predictions == labels).mean())
