"""The m-of-k session decision and its operating-point mathematics.

A session becomes a candidate when enough distinct sampled canaries are
recovered in it. Ranking is by (distinct canaries matched, aggregate match
score, session id), all descending except the id, so reports are total and
reproducible. Near-misses (two short of the threshold) stay on the list for
reviewer context; the protocol deliberately produces a short ranked list,
not an enforcement decision.

Threshold selection treats per-canary detections as independent Bernoulli
events: background rates q_i drive false positives, survival probabilities
s_i drive true positives, and both tails are exact Poisson-binomial sums
computed by the standard O(k^2) dynamic program (a running convolution of
the probability generating function). Independence across canaries is a
modeling assumption, validated against simulation in ``simlab``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .codebook import SampledSet
from .detector import LexicalHit, SemanticScore, char_search
from .errors import ParameterError
from .logstore import LogWindow

DISCLOSE = "disclose"
INTERNAL = "internal"


@dataclass(frozen=True)
class SessionEvidence:
    """Per-session evidence: which sampled canaries matched, and how strongly.

    ``aggregate_score`` sums, over matched canaries, the lexical occurrence
    count (the max across search levels, so finding the same occurrence at
    both levels is not double-counted) plus the scores of fired semantic
    canaries.
    """

    session_id: str
    account_id: str | None
    matched: frozenset[str]
    aggregate_score: float


@dataclass(frozen=True)
class AttributionReport:
    request_id: str
    sample: SampledSet
    m: int
    candidates: tuple[SessionEvidence, ...]
    verdicts: tuple[bool, ...]
    warnings: tuple[str, ...] = ()

    def flagged(self) -> tuple[SessionEvidence, ...]:
        return tuple(c for c, v in zip(self.candidates, self.verdicts) if v)

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "universe_id": self.sample.universe_id,
            "k": self.sample.k,
            "members": list(self.sample.members),
            "m": self.m,
            "candidates": [
                {
                    "session_id": c.session_id,
                    "account_id": c.account_id,
                    "matched": sorted(c.matched),
                    "aggregate_score": c.aggregate_score,
                    "flagged": v,
                }
                for c, v in zip(self.candidates, self.verdicts)
            ],
            "warnings": list(self.warnings),
        }


def redact(report: AttributionReport) -> AttributionReport:
    """Strip account ids; session ids remain for internal vendor response."""
    return replace(
        report,
        candidates=tuple(replace(c, account_id=None) for c in report.candidates),
    )


def decide(
    sessions: LogWindow | Mapping[str, str],
    hits: Iterable[LexicalHit],
    scores: Iterable[SemanticScore],
    sample: SampledSet,
    m: int,
    request_id: str = "",
) -> AttributionReport:
    """Combine per-canary evidence into the ranked m-of-k report.

    ``sessions`` is either the searched window or a session_id -> account_id
    mapping covering the window's census. With m = 0 the threshold is vacuous
    and every session in the window is flagged; otherwise the candidate list
    keeps every session matching at least max(1, m - 2) canaries and flags
    those reaching m.
    """
    if m < 0:
        raise ParameterError("m must be >= 0")
    if m > sample.k:
        raise ParameterError(f"m={m} exceeds k={sample.k}")
    warnings: tuple[str, ...] = ()
    if isinstance(sessions, LogWindow):
        census = {
            sid: group.account_id for sid, group in sessions.sessions().items()
        }
        warnings = tuple(sessions.integrity_warnings())
    else:
        census = dict(sessions)

    members = set(sample.members)
    lexical: dict[tuple[str, str], int] = {}
    for h in hits:
        if h.canary_id not in members or h.session_id not in census:
            continue
        key = (h.session_id, h.canary_id)
        lexical[key] = max(lexical.get(key, 0), h.count)
    semantic: dict[tuple[str, str], float] = {}
    for s in scores:
        if not s.fired or s.canary_id not in members or s.session_id not in census:
            continue
        key = (s.session_id, s.canary_id)
        semantic[key] = max(semantic.get(key, 0.0), s.score)

    matched: dict[str, set[str]] = {sid: set() for sid in census}
    aggregate: dict[str, float] = {sid: 0.0 for sid in census}
    for (sid, cid), count in lexical.items():
        matched[sid].add(cid)
        aggregate[sid] += count
    for (sid, cid), score in semantic.items():
        matched[sid].add(cid)
        aggregate[sid] += score

    floor = 0 if m == 0 else max(1, m - 2)
    kept = [sid for sid in census if len(matched[sid]) >= floor]
    kept.sort(key=lambda sid: (-len(matched[sid]), -aggregate[sid], sid))
    candidates = tuple(
        SessionEvidence(
            session_id=sid,
            account_id=census[sid],
            matched=frozenset(matched[sid]),
            aggregate_score=aggregate[sid],
        )
        for sid in kept
    )
    verdicts = tuple(len(c.matched) >= m for c in candidates)
    return AttributionReport(
        request_id=request_id,
        sample=sample,
        m=m,
        candidates=candidates,
        verdicts=verdicts,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# Poisson-binomial operating point prediction
# ---------------------------------------------------------------------------


def _check_probs(probs: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 1:
        raise ParameterError(f"{name} must be a flat sequence")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ParameterError(f"every probability in {name} must lie in [0, 1]")
    return arr


def poisson_binomial_pmf(probs: Sequence[float]) -> np.ndarray:
    """Exact pmf of a sum of independent Bernoulli(p_i), by convolution."""
    arr = _check_probs(probs, "probs")
    pmf = np.ones(1, dtype=np.float64)
    for p in arr:
        nxt = np.zeros(pmf.size + 1, dtype=np.float64)
        nxt[:-1] = pmf * (1.0 - p)
        nxt[1:] += pmf * p
        pmf = nxt
    return pmf


def poisson_binomial_tail(probs: Sequence[float], m: int) -> float:
    """P(sum of Bernoulli(p_i) >= m); 1 for m <= 0, 0 for m > k."""
    if m <= 0:
        return 1.0
    pmf = poisson_binomial_pmf(probs)
    if m >= pmf.size:
        return 0.0
    return float(np.sum(pmf[m:]))


def predict_fpr(background_rates: Sequence[float], m: int) -> float:
    """Chance an unrelated session trips the m-of-k rule by accident."""
    return poisson_binomial_tail(_check_probs(background_rates, "background_rates"), m)


def predict_tpr(survival_probs: Sequence[float], m: int) -> float:
    """Chance the injected session still clears m despite canary losses."""
    return poisson_binomial_tail(_check_probs(survival_probs, "survival_probs"), m)


@dataclass(frozen=True)
class ThresholdChoice:
    m: int
    fpr: float
    tpr: float
    feasible: bool


def choose_threshold(
    background_rates: Sequence[float],
    survival_probs: Sequence[float],
    fpr_budget: float,
) -> ThresholdChoice:
    """Smallest m whose predicted FPR fits the budget, with its TPR.

    If no m in [0, k] fits, returns m = k flagged infeasible. Note m = 0
    flags every session (FPR 1), so with any budget below 1 the chosen
    threshold is at least 1.
    """
    if not 0.0 < fpr_budget < 1.0:
        raise ParameterError(f"fpr_budget must lie in (0, 1), got {fpr_budget}")
    q = _check_probs(background_rates, "background_rates")
    s = _check_probs(survival_probs, "survival_probs")
    if q.size != s.size:
        raise ParameterError("background and survival lists must have equal length")
    k = q.size
    fpr_pmf = poisson_binomial_pmf(q)
    tpr_pmf = poisson_binomial_pmf(s)
    for m in range(k + 1):
        fpr = float(np.sum(fpr_pmf[m:]))
        if fpr <= fpr_budget:
            return ThresholdChoice(
                m=m, fpr=fpr, tpr=float(np.sum(tpr_pmf[m:])), feasible=True
            )
    return ThresholdChoice(
        m=k,
        fpr=float(fpr_pmf[k]),
        tpr=float(tpr_pmf[k]),
        feasible=False,
    )


def estimate_background_rates(
    window: LogWindow, values: Mapping[str, str], engine: str | None = None
) -> dict[str, float]:
    """Per-canary fraction of window sessions containing the value.

    Run this over a negative window (one known not to contain the injection)
    to obtain the q_i inputs for ``predict_fpr``.
    """
    n_sessions = len(window.sessions())
    rates = {cid: 0.0 for cid in values}
    if n_sessions == 0:
        return rates
    sessions_with: dict[str, set[str]] = {cid: set() for cid in values}
    for h in char_search(window, values, engine):
        sessions_with[h.canary_id].add(h.session_id)
    for cid, sids in sessions_with.items():
        rates[cid] = len(sids) / n_sessions
    return rates
