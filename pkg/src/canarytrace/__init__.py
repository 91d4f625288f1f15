"""canarytrace: canary-based attribution of vendor-hosted agents.

An authority mints canaries and injects them into an agent's interaction
stream; the vendor searches a bounded window of its session log for them and
applies an m-of-k rule to produce a short ranked list of candidate accounts.
This package implements the whole loop plus its security analysis: codebook
minting and sampling, deterministic tokenization, the time-sharded log
store, char/token/semantic detectors, the decision rule with exact FPR/TPR
prediction, hypergeometric evasion bounds, a simulation lab with a search
throughput benchmark, and the authenticated, audited wire protocol.
"""

from ._engine import ENGINE_ENV_VAR, HAS_NUMBA, resolve_engine
from .attribution import (
    AttributionReport,
    SessionEvidence,
    ThresholdChoice,
    choose_threshold,
    decide,
    estimate_background_rates,
    poisson_binomial_pmf,
    poisson_binomial_tail,
    predict_fpr,
    predict_tpr,
    redact,
)
from .codebook import (
    Canary,
    CanaryTemplate,
    CanaryUniverse,
    SampledSet,
    load_universe,
    make_lexical_universe,
    mint_lexical,
    resolve_sample,
    sample_subset,
    save_universe,
)
from .detector import (
    CalibrationTable,
    LexicalHit,
    SemanticFeature,
    SemanticRule,
    SemanticScore,
    calibrate,
    char_search,
    load_rules,
    merge_hits,
    search_shards,
    semantic_score,
    semantic_search,
    token_search,
)
from .errors import (
    AuthenticationError,
    CalibrationError,
    CanarytraceError,
    ConflictError,
    DegenerateDistributionError,
    FormatError,
    ParameterError,
    TemplateError,
)
from .logstore import LogEntry, LogStore, LogWindow
from .protocol import (
    AttributionRequest,
    AuditLog,
    AuthorityRegistry,
    VendorService,
    verify_audit,
)
from .security import (
    EvasionParams,
    EvasionResult,
    design_frontier,
    evasion_exact,
    evasion_exact_fraction,
    evasion_normal,
    evasion_report,
    hypergeom_pmf,
)
from .simlab import (
    ExperimentConfig,
    ExperimentResult,
    TaskSpec,
    WrapperPolicy,
    apply_wrapper,
    asymmetry_sweep,
    bench_search,
    run_experiment,
    utility,
    wilson_interval,
)
from .tokenizer import (
    TokenSeq,
    Vocabulary,
    build_vocab,
    canary_token_variants,
    default_vocab,
    detokenize,
    tokenize,
)

__version__ = "0.1.0"
