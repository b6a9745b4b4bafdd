"""Nonparametric paired statistics for the experiment reports.

Wilcoxon matched-pairs signed-rank with exact small-sample p-values and
a tie-corrected normal approximation for larger n; Spearman rank-order
correlation as Pearson correlation of average ranks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

# Exact null enumeration is cheap up to here; beyond, the normal
# approximation with tie correction is accurate.
EXACT_MAX_N = 12

MIN_EFFECTIVE_N = 5


@dataclass(frozen=True)
class WilcoxonResult:
    w: float
    n_effective: int
    p_two_sided: float
    mode: str


def average_ranks(values) -> np.ndarray:
    """Ranks 1..n with tied values sharing the mean of their positions."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=float)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_min_rank_sum_p(ranks: np.ndarray, w_obs: float) -> float:
    """P(min(W+, W-) <= w_obs) under the null of random signs.

    Average ranks are multiples of 1/2, so doubling makes them integers
    and the positive-rank-sum distribution is a subset-sum count.
    """
    doubled = np.rint(ranks * 2.0).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:
        counts[r:] = counts[r:] + counts[:-r]
    w2 = int(np.rint(w_obs * 2.0))
    sums = np.arange(total + 1)
    favourable = counts[np.minimum(sums, total - sums) <= w2].sum()
    return float(favourable) / float(2 ** len(ranks))


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided Wilcoxon matched-pairs signed-rank test.

    Zero differences are dropped before ranking. The statistic is
    W = min(W+, W-). Exact p for n_effective <= EXACT_MAX_N, otherwise
    a normal approximation with continuity correction; tie correction
    is implicit in var(W+) = sum(rank^2)/4 over average ranks.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d arrays of equal length")
    diffs = a - b
    diffs = diffs[diffs != 0.0]
    n = len(diffs)
    if n < MIN_EFFECTIVE_N:
        raise ValueError(f"need >= {MIN_EFFECTIVE_N} nonzero differences, got {n}")

    ranks = average_ranks(np.abs(diffs))
    w_pos = float(ranks[diffs > 0].sum())
    w_neg = float(ranks[diffs < 0].sum())
    w = min(w_pos, w_neg)

    if n <= EXACT_MAX_N:
        p = _exact_min_rank_sum_p(ranks, w)
        mode = "exact"
    else:
        mean = ranks.sum() / 2.0
        sd = np.sqrt(np.sum(ranks ** 2) / 4.0)
        z = (w - mean + 0.5) / sd
        p = min(1.0, 2.0 * float(norm.cdf(z)))
        mode = "normal"
    return WilcoxonResult(w=w, n_effective=n, p_two_sided=p, mode=mode)


def spearman(x, y) -> float:
    """Spearman rank-order correlation (tie-safe via average ranks)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("samples must be 1-d arrays of equal length")
    if len(x) < 3:
        raise ValueError("need at least 3 samples")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("constant sample has undefined rank correlation")
    rx = average_ranks(x)
    ry = average_ranks(y)
    return float(np.corrcoef(rx, ry)[0, 1])
