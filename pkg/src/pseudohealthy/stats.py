"""Two-sample tests and multiple-comparison correction."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Sequence

import numpy as np
from scipy import special
from scipy import stats as sps

EXACT_MAX_N = 12


class DegenerateSampleError(ValueError):
    pass


@dataclass
class TestResult:
    statistic: float
    p_value: float
    method: str
    n1: int
    n2: int
    p_adjusted: float = None
    df: float = None
    degenerate: bool = False

    __test__ = False  # not a pytest class

    def __post_init__(self):
        self.p_value = min(1.0, max(0.0, float(self.p_value)))
        if self.p_adjusted is None:
            self.p_adjusted = self.p_value

    def adjusted(self, k: int) -> "TestResult":
        self.p_adjusted = bonferroni(self.p_value, k)
        return self


def bonferroni(p: float, k: int) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if k < 1:
        raise ValueError("k must be a positive integer")
    return min(1.0, k * p)


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> TestResult:
    """Two-sided unequal-variance t-test with Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DegenerateSampleError("each sample needs at least two values")
    # constant samples get exactly zero variance; a rounded mean would leave ~1e-33
    va = 0.0 if np.all(a == a[0]) else a.var(ddof=1) / a.size
    vb = 0.0 if np.all(b == b[0]) else b.var(ddof=1) / b.size
    if va + vb == 0:
        raise DegenerateSampleError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = 2.0 * sps.t.sf(abs(t), df)
    return TestResult(float(t), p, "welch_t", int(a.size), int(b.size), df=float(df))


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@lru_cache(maxsize=256)
def _u_counts(n1: int, n2: int) -> tuple:
    """Number of rank arrangements giving each U = 0..n1*n2 (no ties).

    Recurrence on the largest observation: it belongs to the first sample
    (adding n2 to U) or to the second.
    """
    if n1 == 0 or n2 == 0:
        return (1,)
    with_first = _u_counts(n1 - 1, n2)
    with_second = _u_counts(n1, n2 - 1)
    out = [0] * (n1 * n2 + 1)
    for u, c in enumerate(with_first):
        out[u + n2] += c
    for u, c in enumerate(with_second):
        out[u] += c
    return tuple(out)


def _tied_u_counts(tie_sizes: Sequence[int], n1: int) -> Dict[int, int]:
    """Null counts of 2U given the tie structure of the pooled sample.

    Walks the tie groups in sorted order, choosing how many members of each
    group fall in the first sample; every choice adds twice the group's
    midrank per member, which keeps the rank sum on an integer grid.
    """
    states = {(0, 0): 1}
    start = 0
    for t in tie_sizes:
        twice_mid = 2 * start + t + 1
        nxt: Dict[tuple, int] = {}
        for (k, r2), c in states.items():
            for j in range(min(t, n1 - k) + 1):
                key = (k + j, r2 + j * twice_mid)
                nxt[key] = nxt.get(key, 0) + c * math.comb(t, j)
        states = nxt
        start += t
    offset = n1 * (n1 + 1)
    return {r2 - offset: c for (k, r2), c in states.items() if k == n1}


def mann_whitney_exact_p(u: float, n1: int, n2: int) -> float:
    counts = _u_counts(n1, n2)
    total = math.comb(n1 + n2, n1)
    k = int(round(u))
    lower = sum(counts[: k + 1]) / total
    upper = sum(counts[k:]) / total
    return min(1.0, 2.0 * min(lower, upper))


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> TestResult:
    """Two-sided Wilcoxon-Mann-Whitney test; U is reported for the first sample.

    Small samples get the exact null distribution (conditional on the ties
    when there are any); larger ones the normal approximation with tie and
    continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise DegenerateSampleError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    n = n1 + n2
    _, tie_sizes = np.unique(pooled, return_counts=True)
    has_ties = bool(np.any(tie_sizes > 1))
    if n <= EXACT_MAX_N and not has_ties:
        return TestResult(u, mann_whitney_exact_p(u, n1, n2), "mann_whitney", n1, n2)
    if n <= EXACT_MAX_N:
        counts = _tied_u_counts([int(t) for t in tie_sizes], n1)
        total = sum(counts.values())
        u2 = int(round(2 * u))
        lower = sum(c for k, c in counts.items() if k <= u2) / total
        upper = sum(c for k, c in counts.items() if k >= u2) / total
        return TestResult(u, min(1.0, 2.0 * min(lower, upper)), "mann_whitney", n1, n2)
    mean_u = n1 * n2 / 2.0
    tie_term = float(np.sum(tie_sizes.astype(np.float64) ** 3 - tie_sizes)) / (n * (n - 1))
    var_u = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var_u <= 0:
        return TestResult(u, 1.0, "mann_whitney", n1, n2, degenerate=True)
    z = max(abs(u - mean_u) - 0.5, 0.0) / math.sqrt(var_u)
    p = special.erfc(z / math.sqrt(2.0))
    return TestResult(u, p, "mann_whitney", n1, n2)


def normal_two_sided_p(z: float) -> float:
    return float(special.erfc(abs(z) / math.sqrt(2.0)))
