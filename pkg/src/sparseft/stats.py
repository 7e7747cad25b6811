"""Rank correlation and two-sample tests used by the report stage."""
from __future__ import annotations

import numpy as np
from scipy import stats as _st

from .errors import LengthMismatch, TooShort


def average_ranks(x) -> np.ndarray:
    """1-based ranks, ties share the mean of the positions they occupy."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> tuple[float, float]:
    """Spearman's rho as the Pearson correlation of average ranks.

    The p-value uses ``t = rho sqrt((n-2) / (1-rho^2))`` with ``n-2``
    degrees of freedom, two-sided.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size:
        raise LengthMismatch(f"{a.size} vs {b.size}")
    n = a.size
    if n < 3:
        raise TooShort("need at least 3 pairs")
    ra, rb = average_ranks(a), average_ranks(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = np.sqrt((da @ da) * (db @ db))
    if denom == 0:
        return float("nan"), float("nan")
    rho = float((da @ db) / denom)
    if abs(rho) >= 1.0:
        return float(np.sign(rho)), 0.0
    t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, float(2.0 * _st.t.sf(abs(t), n - 2))


def welch_ttest(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and two-sided p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise TooShort("each sample needs at least 2 values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return 0.0, 1.0
        return float(np.copysign(np.inf, diff)), 0.0
    t = diff / np.sqrt(se2)
    dof = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return float(t), float(2.0 * _st.t.sf(abs(t), dof))
