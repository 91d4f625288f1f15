"""Adversary simulation, end-to-end operating-point experiments, benchmarks.

The content model is a list of pieces. Every piece is a text fragment; a
piece may carry the identity of the universe item it embodies (so a wrapper
can remove it) and the identity of a task item the agent needs (so removing
it costs utility). Two content modes matter:

* ``universe`` mode: the interaction embeds one piece per universe item,
  as when canaries are indistinguishable from the legitimate content pool
  the agent must read. This is the setting of the blind-removal adversary:
  removing r of n items costs r/n of the task content.
* ``sample`` mode: only the k sampled canaries are woven in, as when an
  authority injects into a conversation. This is the setting of the
  paraphrase adversary, modeled as independent per-canary survival.

Experiments are driven end to end through the real pipeline: sessions are
written to an in-memory log store, searched with the production detector,
and flagged with the m-of-k rule; empirical TPR/FPR come with Wilson
intervals and are reproducible per seed (wall-clock excepted).

Survival defaults reflect observed regimes: paraphrase wrappers leave about
20% of exact lexical values intact, visible web content about 60%, and
meaning-level canaries in chat about 90%.

The throughput benchmark times char-level vs token-level search over growing
session counts and can compare the numba and numpy engines.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._engine import resolve_engine
from ._rng import SplitMix64, derive_seed
from .codebook import (
    CanaryTemplate,
    CanaryUniverse,
    LEXICAL,
    SampledSet,
    make_lexical_universe,
    load_universe,
    resolve_sample,
    sample_subset,
)
from .detector import char_search, token_search
from .errors import ParameterError
from .logstore import LogStore
from .tokenizer import Vocabulary, canary_token_variants, default_vocab

PASSTHROUGH = "passthrough"
REMOVE = "remove_universe_subset"
SURVIVAL = "survival"

PARAPHRASE_LEXICAL_SURVIVAL = 0.20
VISIBLE_WEB_LEXICAL_SURVIVAL = 0.60
CHAT_SEMANTIC_SURVIVAL = 0.90
DEFAULT_BACKGROUND_RATE = 0.01

# Filler vocabulary for synthetic sessions. Plain words only, so a minted
# canary value can never occur in filler by accident.
WORD_POOL = (
    "the of and to in for on with at from by about into over after under "
    "again further then once here there all any both each few more most "
    "other some such only own same so than too very can will just should "
    "now account update order invoice ticket summary report status detail "
    "review payment shipping support question answer thanks please confirm "
    "schedule meeting project plan release deploy server client request "
    "response error retry timeout window session token record system user "
    "agent model stream input output message thread reply forward archive "
    "search filter match result metric sample test check verify baseline "
    "billing refund credit balance notice policy terms contact address "
    "city region country phone email website page link form field value "
    "number date time zone start end open close active pending complete"
).split()


# ---------------------------------------------------------------------------
# Wrapper policies over content pieces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContentPiece:
    text: str
    canary_id: str | None = None
    task_item_id: str | None = None


@dataclass(frozen=True)
class TaskSpec:
    """What the agent needs: task item ids, and which canary carries which."""

    task_items: frozenset[str]
    overlap: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class WrapperPolicy:
    """Operator-side preprocessing between the world and the vendor API."""

    kind: str
    r: int = 0
    removal_seed: int | None = None
    survival_probs: Mapping[str, float] | None = None
    survival_default: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in (PASSTHROUGH, REMOVE, SURVIVAL):
            raise ParameterError(f"unknown wrapper kind {self.kind!r}")
        if self.kind == REMOVE and self.r < 0:
            raise ParameterError("removal count r must be >= 0")
        if not 0.0 <= self.survival_default <= 1.0:
            raise ParameterError("survival_default must lie in [0, 1]")
        if self.survival_probs is not None:
            for cid, p in self.survival_probs.items():
                if not 0.0 <= p <= 1.0:
                    raise ParameterError(f"survival prob for {cid!r} outside [0, 1]")

    def survival_for(self, canary_id: str) -> float:
        if self.survival_probs is not None and canary_id in self.survival_probs:
            return self.survival_probs[canary_id]
        return self.survival_default


def apply_wrapper(
    pieces: Sequence[ContentPiece],
    policy: WrapperPolicy,
    universe: CanaryUniverse,
    seed: int,
) -> list[ContentPiece]:
    """Transform content before it reaches the vendor-visible input.

    remove: sample r universe items (blind to which were actually injected)
    and delete every piece carrying one of them, task content included.
    survival: keep each canary-bearing piece independently with its
    per-canary probability. passthrough: identity.
    """
    if policy.kind == PASSTHROUGH:
        return list(pieces)
    if policy.kind == REMOVE:
        if policy.r > universe.n:
            raise ParameterError(f"r={policy.r} exceeds universe size {universe.n}")
        removal_seed = (
            policy.removal_seed if policy.removal_seed is not None else seed
        )
        rng = SplitMix64(derive_seed(removal_seed, "remove", universe.universe_id))
        removed = {
            universe.items[i].canary_id
            for i in rng.sample_indices(universe.n, policy.r)
        }
        return [p for p in pieces if p.canary_id not in removed]
    # survival
    rng = SplitMix64(derive_seed(seed, "survival"))
    out = []
    for p in pieces:
        if p.canary_id is None or rng.random() < policy.survival_for(p.canary_id):
            out.append(p)
    return out


def utility(task: TaskSpec, pieces: Sequence[ContentPiece]) -> float:
    """Fraction of task items still present after the wrapper."""
    if not task.task_items:
        return 1.0
    present = {p.task_item_id for p in pieces if p.task_item_id is not None}
    return len(present & task.task_items) / len(task.task_items)


def full_overlap_task(universe: CanaryUniverse) -> TaskSpec:
    """One task item per universe item, each carried by its canary."""
    overlap = {c.canary_id: f"task:{c.canary_id}" for c in universe.items}
    return TaskSpec(task_items=frozenset(overlap.values()), overlap=overlap)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

UNIVERSE_CONTENT = "universe"
SAMPLE_CONTENT = "sample"


@dataclass
class ExperimentConfig:
    universe: CanaryUniverse
    k: int
    m_values: tuple[int, ...]
    policy: WrapperPolicy
    trials: int
    seed: int
    negatives_per_trial: int = 0
    background_rate: float | Mapping[str, float] = DEFAULT_BACKGROUND_RATE
    task: TaskSpec | None = None
    content_mode: str | None = None  # default by policy kind
    level: str = "char"  # char | token
    filler_words: int = 24
    window_ms: int = 60_000
    engine: str | None = None

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ParameterError("trials must be >= 1")
        if self.level not in ("char", "token"):
            raise ParameterError("level must be char or token")
        if any(c.klass != LEXICAL for c in self.universe.items):
            raise ParameterError(
                "experiment universes must be lexical; semantic recovery is "
                "modeled through survival probabilities on lexical stand-ins"
            )
        if self.content_mode is None:
            self.content_mode = (
                UNIVERSE_CONTENT if self.policy.kind == REMOVE else SAMPLE_CONTENT
            )
        if self.content_mode not in (UNIVERSE_CONTENT, SAMPLE_CONTENT):
            raise ParameterError(f"unknown content mode {self.content_mode!r}")
        for m in self.m_values:
            if not 0 <= m <= self.k:
                raise ParameterError(f"m={m} outside [0, k={self.k}]")

    def rate_for(self, canary_id: str) -> float:
        if isinstance(self.background_rate, Mapping):
            return self.background_rate.get(canary_id, 0.0)
        return float(self.background_rate)


@dataclass(frozen=True)
class ExperimentRow:
    m: int
    tpr: float
    tpr_lo: float
    tpr_hi: float
    fpr: float
    fpr_lo: float
    fpr_hi: float
    utility: float


@dataclass
class ExperimentResult:
    rows: list[ExperimentRow]
    trials: int
    negatives_total: int
    mean_utility: float
    wall_clock_s: float

    def row_for(self, m: int) -> ExperimentRow:
        for row in self.rows:
            if row.m == m:
                return row
        raise KeyError(m)

    def evasion_rate(self, m: int) -> float:
        return 1.0 - self.row_for(m).tpr

    def to_csv(self, path: str | Path) -> None:
        lines = ["m,tpr,tpr_lo,tpr_hi,fpr,fpr_lo,fpr_hi,utility"]
        for r in self.rows:
            lines.append(
                f"{r.m},{r.tpr:.6f},{r.tpr_lo:.6f},{r.tpr_hi:.6f},"
                f"{r.fpr:.6f},{r.fpr_lo:.6f},{r.fpr_hi:.6f},{r.utility:.6f}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def to_summary(self) -> dict:
        return {
            "trials": self.trials,
            "negatives_total": self.negatives_total,
            "mean_utility": self.mean_utility,
            "wall_clock_s": self.wall_clock_s,
            "rows": [vars(r) for r in self.rows],
        }


def wilson_interval(successes: int, n: int, z: float = 1.959964) -> tuple[float, float]:
    """95% (by default) Wilson score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    phat = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (phat + z2 / (2 * n)) / denom
    half = z * ((phat * (1 - phat) / n + z2 / (4 * n * n)) ** 0.5) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def _filler(rng: np.random.Generator, n_words: int) -> str:
    idx = rng.integers(0, len(WORD_POOL), size=n_words)
    return " ".join(WORD_POOL[i] for i in idx)


def _positive_pieces(
    config: ExperimentConfig, sample: SampledSet
) -> list[ContentPiece]:
    values = config.universe.lexical_values()
    overlap = config.task.overlap if config.task is not None else {}
    if config.content_mode == UNIVERSE_CONTENT:
        ids = [c.canary_id for c in config.universe.items]
    else:
        ids = list(sample.members)
    return [
        ContentPiece(
            text=values[cid], canary_id=cid, task_item_id=overlap.get(cid)
        )
        for cid in ids
    ]


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Generate corpora, wrap, search, and sweep the m threshold.

    Each trial samples a fresh K, builds ``negatives_per_trial`` background
    sessions (canary i present independently with rate q_i) plus one positive
    session carrying the injected content after the wrapper, logs everything
    into an in-memory store at times inside one window, recovers canaries
    with the production detector, and applies the m-of-k rule for every
    requested m.
    """
    t_start = time.perf_counter()
    vocab = default_vocab()
    tpr_hits = {m: 0 for m in config.m_values}
    fpr_hits = {m: 0 for m in config.m_values}
    negatives_total = 0
    utilities: list[float] = []

    for trial in range(config.trials):
        trial_seed = derive_seed(config.seed, "trial", trial)
        sample = sample_subset(config.universe, config.k, trial_seed)
        values, _ = resolve_sample(sample, config.universe)
        rng = np.random.default_rng(trial_seed)
        store = LogStore(vocab=vocab, root=None, bucket_ms=config.window_ms)
        tau = config.window_ms // 2

        for j in range(config.negatives_per_trial):
            parts = [_filler(rng, config.filler_words)]
            for cid in sample.members:
                if rng.random() < config.rate_for(cid):
                    parts.append(values[cid])
            ts = int(rng.integers(0, config.window_ms))
            store.log_call(f"neg-{trial}-{j}", f"acct-neg-{trial}-{j}", ts, " ".join(parts))
        negatives_total += config.negatives_per_trial

        pieces = _positive_pieces(config, sample)
        wrapped = apply_wrapper(pieces, config.policy, config.universe, trial_seed)
        if config.task is not None:
            utilities.append(utility(config.task, wrapped))
        pos_text = " ".join(
            [_filler(rng, config.filler_words)] + [p.text for p in wrapped]
        )
        pos_sid = f"pos-{trial}"
        store.log_call(pos_sid, f"acct-pos-{trial}", tau, pos_text)

        window = store.query_window(0, config.window_ms)
        if config.level == "char":
            hits = char_search(window, values, config.engine)
        else:
            variants = {
                cid: canary_token_variants(v, vocab) for cid, v in values.items()
            }
            hits = token_search(window, variants, config.engine)
        counts: dict[str, set[str]] = {}
        for h in hits:
            counts.setdefault(h.session_id, set()).add(h.canary_id)
        pos_count = len(counts.get(pos_sid, ()))
        for m in config.m_values:
            if pos_count >= m:
                tpr_hits[m] += 1
            for sid, got in counts.items():
                if sid != pos_sid and len(got) >= m:
                    fpr_hits[m] += 1
            if m == 0:
                # Vacuous threshold: every session is flagged, matched or not.
                fpr_hits[m] += config.negatives_per_trial - sum(
                    1 for sid in counts if sid != pos_sid
                )

    rows = []
    mean_util = float(np.mean(utilities)) if utilities else 1.0
    for m in config.m_values:
        tpr = tpr_hits[m] / config.trials
        tpr_lo, tpr_hi = wilson_interval(tpr_hits[m], config.trials)
        if negatives_total:
            fpr = fpr_hits[m] / negatives_total
            fpr_lo, fpr_hi = wilson_interval(fpr_hits[m], negatives_total)
        else:
            fpr, fpr_lo, fpr_hi = 0.0, 0.0, 1.0
        rows.append(
            ExperimentRow(
                m=m,
                tpr=tpr,
                tpr_lo=tpr_lo,
                tpr_hi=tpr_hi,
                fpr=fpr,
                fpr_lo=fpr_lo,
                fpr_hi=fpr_hi,
                utility=mean_util,
            )
        )
    return ExperimentResult(
        rows=rows,
        trials=config.trials,
        negatives_total=negatives_total,
        mean_utility=mean_util,
        wall_clock_s=time.perf_counter() - t_start,
    )


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """Read the JSON experiment description (see README for the schema)."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    uni_spec = raw["universe"]
    if isinstance(uni_spec, str):
        universe = load_universe(uni_spec)
    else:
        gen = uni_spec["generate"]
        universe = make_lexical_universe(
            universe_id=gen.get("universe_id", "sim"),
            n=int(gen["n"]),
            template=CanaryTemplate("sim", gen.get("template", "ALNUM{12}")),
            seed=int(gen.get("seed", 0)),
        )
    pol = raw["policy"]
    policy = WrapperPolicy(
        kind=pol["kind"],
        r=int(pol.get("r", 0)),
        removal_seed=pol.get("removal_seed"),
        survival_probs=pol.get("probs"),
        survival_default=float(pol.get("default", 1.0)),
    )
    m_values = raw["m_values"]
    if isinstance(m_values, dict):
        m_values = list(range(int(m_values["min"]), int(m_values["max"]) + 1))
    task = None
    task_spec = raw.get("task")
    if task_spec == "full_overlap":
        task = full_overlap_task(universe)
    elif isinstance(task_spec, dict):
        task = TaskSpec(
            task_items=frozenset(task_spec["items"]),
            overlap=dict(task_spec.get("overlap", {})),
        )
    return ExperimentConfig(
        universe=universe,
        k=int(raw["k"]),
        m_values=tuple(int(m) for m in m_values),
        policy=policy,
        trials=int(raw["trials"]),
        seed=int(raw.get("seed", 0)),
        negatives_per_trial=int(raw.get("negatives_per_trial", 0)),
        background_rate=raw.get("background_rate", DEFAULT_BACKGROUND_RATE),
        task=task,
        content_mode=raw.get("content_mode"),
        level=raw.get("level", "char"),
        filler_words=int(raw.get("filler_words", 24)),
        window_ms=int(raw.get("window_ms", 60_000)),
        engine=raw.get("engine"),
    )


@dataclass(frozen=True)
class AsymmetryRow:
    r: int
    evasion_exact: float
    utility_expected: float
    evasion_emp: float
    utility_emp: float


def asymmetry_sweep(
    n: int,
    k: int,
    m: int,
    trials: int = 200,
    seed: int = 0,
    universe: CanaryUniverse | None = None,
) -> list[AsymmetryRow]:
    """Sweep the adversary's removal count r from 0 to n.

    Emits, per r, the exact evasion probability next to its empirical rate
    and the expected task utility 1 - r/n next to its empirical mean (full
    task overlap). The analytic columns are monotone by construction: more
    removals can only help evasion and only cost utility. That one-sided
    trade is the defender's asymmetry.
    """
    from .security import EvasionParams, evasion_exact

    if universe is None:
        universe = make_lexical_universe(
            "asym", n, CanaryTemplate("t", "ALNUM{12}"), seed=derive_seed(seed, "uni")
        )
    if universe.n != n:
        raise ParameterError(f"universe has {universe.n} items, expected {n}")
    task = full_overlap_task(universe)
    rows: list[AsymmetryRow] = []
    for r in range(n + 1):
        config = ExperimentConfig(
            universe=universe,
            k=k,
            m_values=(m,),
            policy=WrapperPolicy(kind=REMOVE, r=r),
            trials=trials,
            seed=derive_seed(seed, "sweep", r),
            task=task,
        )
        result = run_experiment(config)
        rows.append(
            AsymmetryRow(
                r=r,
                evasion_exact=evasion_exact(EvasionParams(n=n, k=k, m=m, r=r)),
                utility_expected=1.0 - r / n,
                evasion_emp=result.evasion_rate(m),
                utility_emp=result.mean_utility,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Search throughput benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchRow:
    size: int
    level: str
    engine: str
    median_s: float
    times: tuple[float, ...]
    matches: int


@dataclass
class BenchResult:
    rows: list[BenchRow]

    def medians(self, level: str, engine: str) -> tuple[list[int], list[float]]:
        picked = [r for r in self.rows if r.level == level and r.engine == engine]
        picked.sort(key=lambda r: r.size)
        return [r.size for r in picked], [r.median_s for r in picked]

    def correlation(self, level: str, engine: str) -> float:
        sizes, medians = self.medians(level, engine)
        return float(np.corrcoef(np.array(sizes, float), np.array(medians))[0, 1])

    def token_char_ratio(self, size: int, engine: str) -> float:
        by = {(r.level): r.median_s for r in self.rows if r.size == size and r.engine == engine}
        return by["token"] / by["char"]

    def to_csv(self, path: str | Path) -> None:
        lines = ["size,level,engine,median_s"]
        for r in sorted(self.rows, key=lambda r: (r.engine, r.level, r.size)):
            lines.append(f"{r.size},{r.level},{r.engine},{r.median_s:.6f}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _bench_corpus(
    n_sessions: int,
    value: str,
    vocab: Vocabulary,
    seed: int,
    session_words: int,
    insert_every: int,
) -> LogStore:
    rng = np.random.default_rng(derive_seed(seed, "bench-corpus"))
    store = LogStore(vocab=vocab, root=None, bucket_ms=60_000)
    for i in range(n_sessions):
        words = [WORD_POOL[j] for j in rng.integers(0, len(WORD_POOL), size=session_words)]
        if i % insert_every == insert_every // 2:
            words[session_words // 2] = value
        store.log_call(f"s{i:06d}", f"a{i:06d}", i * 10, " ".join(words))
    return store


def bench_search(
    sizes: Sequence[int],
    repetitions: int = 5,
    seed: int = 0,
    value: str | None = None,
    engines: Sequence[str | None] = (None,),
    session_words: int = 150,
    insert_every: int = 1000,
) -> BenchResult:
    """Median search time per corpus size, char level vs token level.

    Sessions hold roughly 1 KB of text each; the canary is planted in one
    session per ``insert_every``. The largest corpus is synthesized once and
    smaller sizes reuse its prefix, so timings across sizes differ only in
    the amount scanned. Timed region: one full search call (automaton build
    plus scan plus grouping) on a window whose packed arrays are already
    staged, matching a store that keeps its hot window mapped.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ParameterError("sizes must be strictly ascending")
    if repetitions < 1:
        raise ParameterError("repetitions must be >= 1")
    vocab = default_vocab()
    if value is None:
        value = "bVx7Qp92LmK4"
    variants = {"bench": canary_token_variants(value, vocab)}
    values = {"bench": value}
    store = _bench_corpus(sizes[-1], value, vocab, seed, session_words, insert_every)

    rows: list[BenchRow] = []
    for engine in engines:
        resolved = resolve_engine(engine)
        for size in sizes:
            window = store.query_window(0, (size - 1) * 10)
            window.char_pack()
            window.token_pack()
            # Warm both paths (JIT compile, caches) outside the timed region.
            char_search(window, values, engine=resolved)
            token_search(window, variants, engine=resolved)
            char_times: list[float] = []
            token_times: list[float] = []
            char_matches = token_matches = 0
            for _ in range(repetitions):
                t0 = time.perf_counter()
                hits = char_search(window, values, engine=resolved)
                char_times.append(time.perf_counter() - t0)
                char_matches = sum(h.count for h in hits)
                t0 = time.perf_counter()
                hits = token_search(window, variants, engine=resolved)
                token_times.append(time.perf_counter() - t0)
                token_matches = sum(h.count for h in hits)
            rows.append(
                BenchRow(
                    size=size,
                    level="char",
                    engine=resolved,
                    median_s=statistics.median(char_times),
                    times=tuple(char_times),
                    matches=char_matches,
                )
            )
            rows.append(
                BenchRow(
                    size=size,
                    level="token",
                    engine=resolved,
                    median_s=statistics.median(token_times),
                    times=tuple(token_times),
                    matches=token_matches,
                )
            )
    return BenchResult(rows=rows)
