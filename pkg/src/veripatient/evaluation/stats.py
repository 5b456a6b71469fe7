"""Agreement statistics and the paired t-test.

Formulas are written out directly; only the regularized incomplete beta
function (for the t-distribution tail) comes from scipy.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

from scipy.special import betainc


class StatisticsError(ValueError):
    pass


def _check_pair(a: Sequence, b: Sequence) -> int:
    if len(a) != len(b):
        raise StatisticsError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise StatisticsError("need at least two observations")
    return len(a)


def cohens_kappa(ratings_a: Sequence[Hashable], ratings_b: Sequence[Hashable]) -> float:
    """Cohen's kappa for two raters over nominal categories.

    When chance agreement is certain (both raters used one and the same
    category throughout) kappa is undefined; perfect observed agreement then
    counts as 1.0.
    """
    n = _check_pair(ratings_a, ratings_b)
    agree = sum(1 for x, y in zip(ratings_a, ratings_b) if x == y)
    count_a, count_b = Counter(ratings_a), Counter(ratings_b)
    chance = sum(count_a[k] * count_b[k] for k in count_a)  # p_e * n^2, exact
    if chance == n * n:
        if agree == n:
            return 1.0
        raise StatisticsError("degenerate marginals with disagreement")
    p_o = agree / n
    p_e = chance / (n * n)
    return (p_o - p_e) / (1.0 - p_e)


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    n = _check_pair(x, y)
    if len(set(x)) == 1 or len(set(y)) == 1:
        raise StatisticsError("zero variance")
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    dx = [v - mx for v in x]
    dy = [v - my for v in y]
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    sxx = math.fsum(a * a for a in dx)
    syy = math.fsum(b * b for b in dy)
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class TestStats:
    t: float
    df: int
    p_two_tailed: float
    cohens_d: float

    __test__ = False  # keep pytest from collecting this as a test class

    def __post_init__(self) -> None:
        if self.df < 1:
            raise ValueError("df must be at least 1")
        if not 0.0 <= self.p_two_tailed <= 1.0:
            raise ValueError("p must lie in [0, 1]")


def t_two_tailed_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return float(min(1.0, max(0.0, betainc(df / 2.0, 0.5, df / (df + t * t)))))


def paired_t_test(clean: Sequence[float], noisy: Sequence[float]) -> TestStats:
    """Paired t-test on ``noisy - clean`` with Cohen's d for paired samples."""
    n = _check_pair(clean, noisy)
    diffs = [b - a for a, b in zip(clean, noisy)]
    if len(set(diffs)) == 1:
        raise StatisticsError("zero-variance differences")
    mean = math.fsum(diffs) / n
    sd = math.sqrt(math.fsum((d - mean) ** 2 for d in diffs) / (n - 1))
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    return TestStats(t=t, df=df, p_two_tailed=t_two_tailed_p(t, df), cohens_d=mean / sd)


def significance_stars(p: float | None) -> str:
    if p is None:
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass(frozen=True)
class AgreementStats:
    """Agreement on one dimension. Exactly one of ``kappa``/``pearson`` is set."""

    kappa: float | None
    pearson: float | None
    n: int

    def __post_init__(self) -> None:
        for value in (self.kappa, self.pearson):
            if value is not None and not -1.0 - 1e-12 <= value <= 1.0 + 1e-12:
                raise ValueError(f"agreement value {value} outside [-1, 1]")

    @property
    def value(self) -> float:
        return self.kappa if self.kappa is not None else self.pearson  # type: ignore[return-value]

    @property
    def metric(self) -> str:
        return "κ" if self.kappa is not None else "r"
