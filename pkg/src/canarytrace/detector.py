"""Canary recovery from logged content.

Three recovery channels share one window abstraction:

* ``char_search``: exact byte-level substring match of canary values, the
  ground-truth channel. Every occurrence is reported, overlapping ones
  included.
* ``token_search``: the same match over stored token ids, using the variant
  set from ``tokenizer.canary_token_variants``. Sound by construction (a
  token-span match detokenizes to the value) and complete whenever the
  injected value was whitespace-delimited; a value fused into surrounding
  non-whitespace characters can only be found at char level.
* semantic scoring: a deliberately simple, fully reproducible classifier
  stand-in. A rule scores a session as
  ``logistic(bias + sum_i weight_i * count_i)`` where ``count_i`` is the
  non-overlapping occurrence count of the i-th literal feature pattern in
  the session's concatenated text, and fires when the score clears a
  per-rule threshold calibrated to an empirical false-positive target.

Searches are read-only and can be run per shard and merged
(``search_shards``); the merged result is identical to scanning the whole
window because positions are addressed by (bucket, line, offset).
"""

from __future__ import annotations

import json
import math
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._kernels import scan_window
from .errors import CalibrationError, FormatError, ParameterError
from .logstore import LogWindow, StoredEntry
from .tokenizer import TokenSeq

CHAR = "char"
TOKEN = "token"

Position = tuple[int, int, int]  # (shard bucket, line in shard, offset in entry)


@dataclass(frozen=True)
class LexicalHit:
    """All occurrences of one canary in one session, at one search level.

    Offsets are byte offsets into the entry's UTF-8 text at char level and
    token indexes at token level.
    """

    session_id: str
    canary_id: str
    level: str
    positions: tuple[Position, ...]
    count: int

    def __post_init__(self) -> None:
        if self.count != len(self.positions) or self.count < 1:
            raise FormatError("hit count must equal the number of positions (>= 1)")


def _group_hits(
    window: LogWindow,
    rows: np.ndarray,
    pattern_canary: list[str],
    level: str,
) -> list[LexicalHit]:
    entries = window.entries()
    grouped: dict[tuple[str, str], set[Position]] = {}
    for entry_idx, pat_idx, start in rows:
        se = entries[int(entry_idx)]
        key = (se.entry.session_id, pattern_canary[int(pat_idx)])
        grouped.setdefault(key, set()).add((se.bucket, se.line, int(start)))
    out = [
        LexicalHit(
            session_id=sid,
            canary_id=cid,
            level=level,
            positions=tuple(sorted(positions)),
            count=len(positions),
        )
        for (sid, cid), positions in grouped.items()
    ]
    out.sort(key=lambda h: (h.session_id, h.canary_id))
    return out


def char_search(
    window: LogWindow, values: Mapping[str, str], engine: str | None = None
) -> list[LexicalHit]:
    """Byte-substring search for every value over every entry in the window."""
    if not values:
        raise ParameterError("char_search needs at least one canary value")
    canary_ids = sorted(values)
    patterns = []
    for cid in canary_ids:
        v = values[cid]
        if not v:
            raise ParameterError(f"canary {cid!r} has an empty value")
        patterns.append(np.frombuffer(v.encode("utf-8"), dtype=np.uint8))
    symbols, bounds = window.char_pack()
    rows = scan_window(symbols, bounds, patterns, 256, engine)
    return _group_hits(window, rows, canary_ids, CHAR)


def token_search(
    window: LogWindow,
    variants: Mapping[str, Sequence[TokenSeq]],
    engine: str | None = None,
) -> list[LexicalHit]:
    """Contiguous-subsequence search for any token variant of each canary."""
    if not variants:
        raise ParameterError("token_search needs at least one canary variant set")
    patterns: list[np.ndarray] = []
    pattern_canary: list[str] = []
    for cid in sorted(variants):
        seqs = variants[cid]
        if not seqs:
            raise ParameterError(f"canary {cid!r} has no token variants")
        for seq in seqs:
            if seq.vocab_id != window.vocab_id:
                raise FormatError(
                    f"variant for {cid!r} uses vocab {seq.vocab_id!r}, "
                    f"window uses {window.vocab_id!r}"
                )
            if len(seq) == 0:
                raise ParameterError(f"canary {cid!r} has an empty token variant")
            patterns.append(seq.tokens.astype(np.int32, copy=False))
            pattern_canary.append(cid)
    symbols, bounds = window.token_pack()
    alphabet = 256
    for pat in patterns:
        alphabet = max(alphabet, int(pat.max()) + 1)
    if symbols.size:
        alphabet = max(alphabet, int(symbols.max()) + 1)
    rows = scan_window(symbols, bounds, patterns, alphabet, engine)
    return _group_hits(window, rows, pattern_canary, TOKEN)


def merge_hits(hit_lists: Iterable[list[LexicalHit]]) -> list[LexicalHit]:
    """Union per-shard results into the whole-window result."""
    grouped: dict[tuple[str, str, str], set[Position]] = {}
    for hits in hit_lists:
        for h in hits:
            grouped.setdefault((h.session_id, h.canary_id, h.level), set()).update(
                h.positions
            )
    out = [
        LexicalHit(
            session_id=sid,
            canary_id=cid,
            level=level,
            positions=tuple(sorted(positions)),
            count=len(positions),
        )
        for (sid, cid, level), positions in grouped.items()
    ]
    out.sort(key=lambda h: (h.session_id, h.canary_id))
    return out


def search_shards(
    window: LogWindow,
    values: Mapping[str, str] | None = None,
    variants: Mapping[str, Sequence[TokenSeq]] | None = None,
    engine: str | None = None,
) -> list[LexicalHit]:
    """Scan each shard independently and merge, as a map-reduce worker would."""
    results = []
    for sub in window.per_shard():
        if values is not None:
            results.append(char_search(sub, values, engine))
        if variants is not None:
            results.append(token_search(sub, variants, engine))
    return merge_hits(results)


# ---------------------------------------------------------------------------
# Semantic rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SemanticFeature:
    pattern: str
    weight: float

    def __post_init__(self) -> None:
        if not self.pattern:
            raise FormatError("feature pattern must be non-empty")
        if not math.isfinite(self.weight):
            raise FormatError("feature weight must be finite")


@dataclass(frozen=True)
class SemanticRule:
    rule_id: str
    bias: float
    features: tuple[SemanticFeature, ...]
    description: str = ""

    def __post_init__(self) -> None:
        if not self.features:
            raise FormatError(f"rule {self.rule_id!r} has no features")
        if not math.isfinite(self.bias):
            raise FormatError(f"rule {self.rule_id!r} has a non-finite bias")


@dataclass(frozen=True)
class SemanticScore:
    session_id: str
    canary_id: str
    score: float
    threshold: float
    fired: bool

    def __post_init__(self) -> None:
        if self.fired != (self.score >= self.threshold):
            raise FormatError("fired flag inconsistent with score and threshold")


@dataclass(frozen=True)
class CalibrationTable:
    """Per-rule thresholds hit a shared empirical FPR target.

    Semantic canaries inherit the threshold of the rule they reference.
    """

    thresholds: tuple[tuple[str, float], ...]
    fpr_target: float
    negative_corpus_id: str = ""

    def threshold_for(self, rule_id: str, default: float = 0.5) -> float:
        for rid, t in self.thresholds:
            if rid == rule_id:
                return t
        return default


def _logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def session_text(entries: Sequence[StoredEntry]) -> str:
    return "\n".join(se.entry.text for se in entries)


def semantic_score(session: str | Sequence[StoredEntry], rule: SemanticRule) -> float:
    """Score one session's pooled text against one rule."""
    text = session if isinstance(session, str) else session_text(session)
    z = rule.bias
    for feat in rule.features:
        z += feat.weight * text.count(feat.pattern)
    return _logistic(z)


def semantic_search(
    window: LogWindow,
    rules_by_canary: Mapping[str, SemanticRule],
    calibration: CalibrationTable | None = None,
    default_threshold: float = 0.5,
) -> list[SemanticScore]:
    """Score every session in the window against every requested canary."""
    out: list[SemanticScore] = []
    for sid, group in sorted(window.sessions().items()):
        text = session_text(group.entries)
        for cid in sorted(rules_by_canary):
            rule = rules_by_canary[cid]
            threshold = (
                calibration.threshold_for(rule.rule_id, default_threshold)
                if calibration is not None
                else default_threshold
            )
            score = semantic_score(text, rule)
            out.append(
                SemanticScore(
                    session_id=sid,
                    canary_id=cid,
                    score=score,
                    threshold=threshold,
                    fired=score >= threshold,
                )
            )
    return out


def select_threshold(scores: Sequence[float], fpr_target: float) -> float:
    """Smallest threshold whose empirical FPR on ``scores`` fits the target.

    Candidates are the observed scores themselves (ties break upward, so a
    run of equal scores is either wholly above or wholly below). If even the
    largest observed score exceeds the target, the threshold moves one float
    step above it; should that leave [0, 1], no valid threshold exists.
    """
    if not 0.0 < fpr_target < 1.0:
        raise ParameterError(f"fpr_target must lie in (0, 1), got {fpr_target}")
    if not scores:
        raise ParameterError("cannot calibrate on an empty score list")
    ordered = sorted(scores)
    n = len(ordered)
    allowed = math.floor(fpr_target * n)
    for s in sorted(set(ordered)):
        exceeding = n - bisect_left(ordered, s)
        if exceeding <= allowed:
            return s
    bumped = math.nextafter(ordered[-1], math.inf)
    if bumped > 1.0:
        raise CalibrationError(
            f"every threshold in [0, 1] exceeds the {fpr_target} FPR target"
        )
    return bumped


def calibrate(
    rules: Sequence[SemanticRule],
    negative_corpus: Sequence[str],
    fpr_target: float,
    negative_corpus_id: str = "",
) -> CalibrationTable:
    """Pick per-rule thresholds whose empirical FPR does not exceed the target."""
    if not negative_corpus:
        raise ParameterError("negative corpus must be non-empty")
    thresholds = []
    for rule in rules:
        scores = [semantic_score(text, rule) for text in negative_corpus]
        thresholds.append((rule.rule_id, select_threshold(scores, fpr_target)))
    return CalibrationTable(
        thresholds=tuple(thresholds),
        fpr_target=fpr_target,
        negative_corpus_id=negative_corpus_id,
    )


def empirical_fpr(
    rule: SemanticRule, negative_corpus: Sequence[str], threshold: float
) -> float:
    hits = sum(1 for text in negative_corpus if semantic_score(text, rule) >= threshold)
    return hits / len(negative_corpus)


# ---------------------------------------------------------------------------
# Rules files
# ---------------------------------------------------------------------------


def rules_from_dict(payload: list[dict]) -> dict[str, SemanticRule]:
    rules: dict[str, SemanticRule] = {}
    for raw in payload:
        try:
            rule = SemanticRule(
                rule_id=raw["rule_id"],
                bias=float(raw["bias"]),
                features=tuple(
                    SemanticFeature(pattern=f["pattern"], weight=float(f["weight"]))
                    for f in raw["features"]
                ),
                description=raw.get("description", ""),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"rules file entry missing field: {exc}") from exc
        if rule.rule_id in rules:
            raise FormatError(f"duplicate rule_id {rule.rule_id!r}")
        rules[rule.rule_id] = rule
    return rules


def load_rules(path: str | Path) -> dict[str, SemanticRule]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"rules file is not valid JSON: {exc}") from exc
    if isinstance(payload, dict):
        payload = payload.get("rules", [])
    return rules_from_dict(payload)


def save_calibration(table: CalibrationTable, path: str | Path) -> None:
    payload = {
        "fpr_target": table.fpr_target,
        "negative_corpus_id": table.negative_corpus_id,
        "thresholds": {rid: t for rid, t in table.thresholds},
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_calibration(path: str | Path) -> CalibrationTable:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"calibration file is not valid JSON: {exc}") from exc
    try:
        return CalibrationTable(
            thresholds=tuple(sorted(payload["thresholds"].items())),
            fpr_target=float(payload["fpr_target"]),
            negative_corpus_id=payload.get("negative_corpus_id", ""),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"calibration file missing field: {exc}") from exc
