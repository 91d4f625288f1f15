from __future__ import annotations

import pytest

from canarytrace._engine import HAS_NUMBA
from canarytrace.detector import char_search, token_search
from canarytrace.logstore import LogStore
from canarytrace.tokenizer import canary_token_variants, default_vocab, tokenize

ENGINES = ["numba", "numpy"] if HAS_NUMBA else ["numpy"]


@pytest.fixture(scope="session")
def vocab():
    return default_vocab()


@pytest.fixture(params=ENGINES)
def engine(request):
    return request.param


@pytest.fixture(scope="session", autouse=True)
def warm_kernels(vocab):
    """Absorb JIT compilation before any timed test runs."""
    store = LogStore(vocab=vocab, root=None)
    store.log_call("warm", "warm", 0, "warm up text with a token ABCDEF123456")
    window = store.query_window(0, 1)
    for eng in ENGINES:
        tokenize("warm up", vocab, engine=eng)
        char_search(window, {"w": "ABCDEF123456"}, engine=eng)
        token_search(
            window, {"w": canary_token_variants("ABCDEF123456", vocab)}, engine=eng
        )
