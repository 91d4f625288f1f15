"""Evasion probability for an adversary blindly removing universe items.

Setup: the defender samples k of the n universe items and requires m of them
to survive; the adversary, knowing the universe but not the sample, removes
r items. The number X of sampled items hit by the removals is
hypergeometric, and evasion is the event that the removals hit more than
k - m of the sample:

    P(X = x) = C(k, x) C(n - k, r - x) / C(n, r)
    evade  <=>  X >= k - m + 1
    mean mu = r k / n
    variance sigma^2 = r k (n - k)(n - r) / (n^2 (n - 1))

Exact tails are computed with big-integer binomials (``math.comb``) and only
converted to float at the end, so they can be checked for exact rational
equality against brute-force enumeration. A normal approximation
``1 - Phi((k - m + 1 - mu) / sigma)`` is exposed both plain and with the
half-step continuity correction; the corrected form tracks the exact tail
much more closely at moderate n.

Caution near the support edge: when the threshold k - m + 1 exceeds
min(k, r), evasion is impossible and the exact tail is identically 0 while
the normal formula still returns a small positive number. The exact value is
authoritative; the approximation is only meaningful when the threshold lies
well inside the support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .errors import DegenerateDistributionError, ParameterError


@dataclass(frozen=True)
class EvasionParams:
    """(n, k, m, r): universe size, sample size, threshold, removals."""

    n: int
    k: int
    m: int
    r: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ParameterError("universe size n must be >= 1")
        if not 0 <= self.k <= self.n:
            raise ParameterError(f"need 0 <= k <= n, got k={self.k}, n={self.n}")
        if not 0 <= self.r <= self.n:
            raise ParameterError(f"need 0 <= r <= n, got r={self.r}, n={self.n}")
        if not 0 <= self.m <= self.k:
            raise ParameterError(f"need 0 <= m <= k, got m={self.m}, k={self.k}")


@dataclass(frozen=True)
class EvasionResult:
    p_exact: float
    p_normal: float
    p_normal_cc: float
    mu: float
    sigma2: float


def _support(n: int, k: int, r: int) -> tuple[int, int]:
    return max(0, r - (n - k)), min(k, r)


def pmf_fraction(n: int, k: int, r: int, x: int) -> Fraction:
    lo, hi = _support(n, k, r)
    if not lo <= x <= hi:
        return Fraction(0)
    return Fraction(math.comb(k, x) * math.comb(n - k, r - x), math.comb(n, r))


def hypergeom_pmf(n: int, k: int, r: int, x: int) -> float:
    """P(X = x); exactly 0.0 for x outside the support."""
    EvasionParams(n=n, k=k, m=0, r=r)
    return float(pmf_fraction(n, k, r, x))


def hypergeom_mean_var(n: int, k: int, r: int) -> tuple[float, float]:
    mu = r * k / n
    if n > 1:
        sigma2 = r * k * (n - k) * (n - r) / (n * n * (n - 1))
    else:
        sigma2 = 0.0
    return mu, sigma2


def evasion_exact_fraction(params: EvasionParams) -> Fraction:
    """Exact rational P(X >= k - m + 1)."""
    n, k, m, r = params.n, params.k, params.m, params.r
    lo, hi = _support(n, k, r)
    threshold = k - m + 1
    if threshold > hi:
        return Fraction(0)
    start = max(threshold, lo)
    total = sum(
        math.comb(k, x) * math.comb(n - k, r - x) for x in range(start, hi + 1)
    )
    return Fraction(total, math.comb(n, r))


def evasion_exact(params: EvasionParams) -> float:
    return float(evasion_exact_fraction(params))


def _phi(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def evasion_normal(params: EvasionParams, continuity_correction: bool = False) -> float:
    """Normal-approximate evasion probability.

    Plain form evaluates 1 - Phi((k - m + 1 - mu) / sigma); the corrected
    form replaces the threshold with k - m + 0.5.
    """
    mu, sigma2 = hypergeom_mean_var(params.n, params.k, params.r)
    if sigma2 <= 0.0:
        raise DegenerateDistributionError(
            f"zero-variance removal count for {params}; use evasion_exact"
        )
    threshold = params.k - params.m + (0.5 if continuity_correction else 1.0)
    return 1.0 - _phi((threshold - mu) / math.sqrt(sigma2))


def evasion_report(params: EvasionParams) -> EvasionResult:
    """Exact and approximate probabilities side by side.

    The normal fields are NaN when the distribution is degenerate.
    """
    mu, sigma2 = hypergeom_mean_var(params.n, params.k, params.r)
    if sigma2 > 0.0:
        p_normal = evasion_normal(params, continuity_correction=False)
        p_normal_cc = evasion_normal(params, continuity_correction=True)
    else:
        p_normal = math.nan
        p_normal_cc = math.nan
    return EvasionResult(
        p_exact=evasion_exact(params),
        p_normal=p_normal,
        p_normal_cc=p_normal_cc,
        mu=mu,
        sigma2=sigma2,
    )


@dataclass(frozen=True)
class FrontierPoint:
    k: int
    m: int
    p_exact: float
    utility_cost: float


def design_frontier(n: int, r: int, evasion_budget: float) -> list[FrontierPoint]:
    """All (k, m) with exact evasion within budget, ascending k then m.

    The utility cost column is the r/n share of universe content the
    adversary destroys; it is the price side of the tradeoff, constant in
    (k, m).
    """
    if not 0.0 < evasion_budget <= 1.0:
        raise ParameterError(
            f"evasion_budget must lie in (0, 1], got {evasion_budget}"
        )
    if n < 1 or not 0 <= r <= n:
        raise ParameterError(f"need n >= 1 and 0 <= r <= n, got n={n}, r={r}")
    cost = r / n
    out: list[FrontierPoint] = []
    for k in range(n + 1):
        for m in range(k + 1):
            p = evasion_exact(EvasionParams(n=n, k=k, m=m, r=r))
            if p <= evasion_budget:
                out.append(FrontierPoint(k=k, m=m, p_exact=p, utility_cost=cost))
    return out
