"""Hot inner loops: multi-pattern scanning and greedy tokenization.

The scanner is a dense-table Aho-Corasick automaton. The automaton is built
once per pattern set in plain Python (it is tiny: one state per pattern
symbol), then a single pass over the packed window finds every occurrence of
every pattern, including overlapping ones. The same construction serves both
levels: over bytes (alphabet 256) for character search and over token ids
(alphabet |vocab|) for token search. State resets at entry boundaries, so a
match never spans two log entries.

Each scan and the tokenizer walk exist twice:

* ``*_numba``: an ``@njit`` loop, compiled and cached on first use.
* the numpy fallback: per-pattern candidate filtering. Positions where the
  first symbol matches are collected with one vectorized compare, then each
  further symbol prunes the candidate list. Linear in input length as long
  as the first symbol is reasonably selective, which holds for canary values.

Both paths return the identical, canonically sorted match triples.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ._engine import HAS_NUMBA, resolve_engine

if HAS_NUMBA:
    from numba import njit
else:  # pragma: no cover - numba-less installs use the numpy path only

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# Aho-Corasick automaton
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Automaton:
    """Dense-table multi-pattern automaton.

    ``delta[s, c]`` is the next state from ``s`` on symbol ``c`` with failure
    transitions already resolved, so the scan is one table lookup per symbol.
    Outputs are stored CSR-style: state ``s`` emits pattern ids
    ``out_pat[out_off[s]:out_off[s + 1]]``, each match ending at the current
    position.
    """

    delta: np.ndarray  # int32 [states, alphabet]
    out_off: np.ndarray  # int32 [states + 1]
    out_pat: np.ndarray  # int32 [total outputs]
    pat_len: np.ndarray  # int32 [patterns]


def build_automaton(patterns: list[np.ndarray], alphabet_size: int) -> Automaton:
    """Build the automaton for non-empty symbol-sequence patterns."""
    if not patterns:
        raise ValueError("need at least one pattern")
    goto: list[dict[int, int]] = [{}]
    outputs: list[list[int]] = [[]]
    for pid, pat in enumerate(patterns):
        if len(pat) == 0:
            raise ValueError(f"pattern {pid} is empty")
        node = 0
        for sym in pat:
            sym = int(sym)
            if not 0 <= sym < alphabet_size:
                raise ValueError(f"pattern symbol {sym} outside alphabet")
            nxt = goto[node].get(sym)
            if nxt is None:
                nxt = len(goto)
                goto.append({})
                outputs.append([])
                goto[node][sym] = nxt
            node = nxt
        outputs[node].append(pid)

    n_states = len(goto)
    delta = np.zeros((n_states, alphabet_size), dtype=np.int32)
    fail = [0] * n_states
    queue: deque[int] = deque()
    for sym, child in goto[0].items():
        delta[0, sym] = child
        queue.append(child)
    # BFS: a node's failure target is strictly shallower, so its delta row
    # and output list are complete before the node is processed.
    while queue:
        u = queue.popleft()
        f = fail[u]
        outputs[u].extend(outputs[f])
        delta[u] = delta[f]
        for sym, child in goto[u].items():
            fail[child] = delta[f, sym]
            delta[u, sym] = child
            queue.append(child)

    out_off = np.zeros(n_states + 1, dtype=np.int32)
    for s in range(n_states):
        out_off[s + 1] = out_off[s] + len(outputs[s])
    out_pat = np.fromiter(
        (pid for outs in outputs for pid in outs), dtype=np.int32, count=int(out_off[-1])
    )
    pat_len = np.array([len(p) for p in patterns], dtype=np.int32)
    return Automaton(delta=delta, out_off=out_off, out_pat=out_pat, pat_len=pat_len)


@njit(cache=True)
def _ac_scan_numba(symbols, bounds, delta, out_off, out_pat, pat_len, res_entry, res_pat, res_start):
    cap = res_entry.shape[0]
    count = 0
    n_entries = bounds.shape[0] - 1
    for e in range(n_entries):
        state = 0
        for pos in range(bounds[e], bounds[e + 1]):
            state = delta[state, symbols[pos]]
            for oi in range(out_off[state], out_off[state + 1]):
                pid = out_pat[oi]
                if count < cap:
                    res_entry[count] = e
                    res_pat[count] = pid
                    res_start[count] = pos - bounds[e] - pat_len[pid] + 1
                count += 1
    return count


def _scan_window_numba(
    symbols: np.ndarray, bounds: np.ndarray, automaton: Automaton
) -> np.ndarray:
    cap = 4096
    while True:
        res_entry = np.empty(cap, dtype=np.int64)
        res_pat = np.empty(cap, dtype=np.int64)
        res_start = np.empty(cap, dtype=np.int64)
        count = _ac_scan_numba(
            symbols,
            bounds,
            automaton.delta,
            automaton.out_off,
            automaton.out_pat,
            automaton.pat_len,
            res_entry,
            res_pat,
            res_start,
        )
        if count <= cap:
            return np.stack(
                [res_entry[:count], res_pat[:count], res_start[:count]], axis=1
            )
        cap = count


def _scan_window_numpy(
    symbols: np.ndarray, bounds: np.ndarray, patterns: list[np.ndarray]
) -> np.ndarray:
    n = symbols.shape[0]
    starts = bounds[:-1]
    found: list[np.ndarray] = []
    for pid, pat in enumerate(patterns):
        m = len(pat)
        if m > n:
            continue
        cand = np.flatnonzero(symbols[: n - m + 1] == pat[0])
        for j in range(1, m):
            if cand.size == 0:
                break
            cand = cand[symbols[cand + j] == pat[j]]
        if cand.size == 0:
            continue
        # Drop candidates whose span crosses an entry boundary.
        e_first = np.searchsorted(starts, cand, side="right") - 1
        e_last = np.searchsorted(starts, cand + m - 1, side="right") - 1
        keep = e_first == e_last
        cand = cand[keep]
        e_first = e_first[keep]
        if cand.size == 0:
            continue
        rows = np.stack(
            [e_first, np.full(cand.shape, pid, dtype=np.int64), cand - starts[e_first]],
            axis=1,
        )
        found.append(rows)
    if not found:
        return np.empty((0, 3), dtype=np.int64)
    return np.concatenate(found, axis=0)


def scan_window(
    symbols: np.ndarray,
    bounds: np.ndarray,
    patterns: list[np.ndarray],
    alphabet_size: int,
    engine: str | None = None,
) -> np.ndarray:
    """Find every occurrence of every pattern inside the packed entries.

    ``symbols`` is the concatenation of all entries; ``bounds[e]:bounds[e+1]``
    delimits entry ``e``. Returns an int64 array of (entry, pattern, start)
    rows, sorted by (entry, start, pattern). Occurrences may overlap.
    """
    if any(len(p) == 0 for p in patterns):
        raise ValueError("patterns must be non-empty")
    if resolve_engine(engine) == "numba":
        automaton = build_automaton(patterns, alphabet_size)
        rows = _scan_window_numba(symbols, bounds, automaton)
    else:
        rows = _scan_window_numpy(symbols, bounds, patterns)
    if rows.shape[0] > 1:
        order = np.lexsort((rows[:, 1], rows[:, 2], rows[:, 0]))
        rows = rows[order]
    return rows


# ---------------------------------------------------------------------------
# Greedy longest-match tokenizer walk
# ---------------------------------------------------------------------------


@njit(cache=True)
def _tok_encode_numba(data, trie_next, trie_token, out):
    n = data.shape[0]
    count = 0
    i = 0
    while i < n:
        node = 0
        best_id = -1
        best_len = 0
        j = i
        while j < n:
            node = trie_next[node, data[j]]
            if node < 0:
                break
            j += 1
            tid = trie_token[node]
            if tid >= 0:
                best_id = tid
                best_len = j - i
        # Single bytes are always tokens, so a match always exists.
        out[count] = best_id
        count += 1
        i += best_len
    return count


def tok_encode_numba(
    data: np.ndarray, trie_next: np.ndarray, trie_token: np.ndarray
) -> np.ndarray:
    out = np.empty(data.shape[0], dtype=np.int32)
    count = _tok_encode_numba(data, trie_next, trie_token, out)
    return out[:count].copy()
