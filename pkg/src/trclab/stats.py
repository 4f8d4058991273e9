"""Wilcoxon signed-rank test, exact for small samples."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 20
MIN_PAIRS = 5


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # sum of ranks of positive differences
    p_one_sided: float  # P(W >= statistic) under H0, i.e. alternative a > b
    n: int
    exact: bool

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_one_sided": self.p_one_sided, "n": self.n, "exact": self.exact}


def signed_ranks(pairs: Sequence[tuple[float, float]]) -> tuple[np.ndarray, np.ndarray]:
    """(ranks of |d|, sign of d) after dropping zero differences; ties get average ranks."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    d = arr[:, 0] - arr[:, 1]
    d = d[d != 0]
    return rankdata(np.abs(d)), np.sign(d)


def exact_upper_tail(ranks: np.ndarray, w: float) -> float:
    """P(sum of randomly signed ranks >= w) by DP over the doubled (integral) ranks."""
    r2 = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    w2 = int(np.ceil(2 * w - 1e-9))
    return float(counts[max(w2, 0):].sum() / 2.0 ** len(r2))


def wilcoxon_signed_rank(pairs: Sequence[tuple[float, float]]) -> WilcoxonResult:
    ranks, signs = signed_ranks(pairs)
    n = len(ranks)
    if n < MIN_PAIRS:
        raise ValueError(f"need at least {MIN_PAIRS} non-zero differences, got {n}")
    w = float(ranks[signs > 0].sum())
    if n <= EXACT_MAX_N:
        return WilcoxonResult(w, exact_upper_tail(ranks, w), n, True)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    z = (w - mean - 0.5) / np.sqrt(var)
    return WilcoxonResult(w, float(norm.sf(z)), n, False)
