"""Deterministic, versioned tokenization over a byte-pair vocabulary.

Log entries are stored and searched as integer token sequences, so the
tokenizer has to satisfy three hard properties:

* **Totality and losslessness.** All 256 single bytes are tokens, every text
  tokenizes, and detokenization reproduces the input byte-exactly.
* **Determinism.** Encoding is greedy longest-match: at each position the
  longest vocabulary entry matching the remaining input is emitted. No
  tie-breaking is ever needed because candidate lengths differ.
* **Boundary soundness.** No vocabulary entry mixes whitespace with
  non-whitespace bytes (enforced at construction). Consequently a token can
  never straddle a word boundary, and wherever a whitespace-delimited value
  occurs in any text, the token span covering it equals the greedy encoding
  of the value itself. This is what makes token-level search complete for
  whitespace-delimited canary injections.

Because encodings depend on surrounding bytes only through word boundaries,
``canary_token_variants`` pads a value with leading/trailing spaces, encodes,
and trims back to the value's byte span; the deduplicated variants are the
complete multi-pattern set for token-level search.

Whitespace means the six ASCII whitespace bytes. Multi-byte Unicode spaces
are ordinary bytes: they never split words and never merge with anything
else only if the vocabulary was built that way (the shipped one was).
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ._engine import resolve_engine
from ._kernels import tok_encode_numba
from .errors import FormatError, ParameterError

_WS_BYTES = b" \t\n\r\x0b\x0c"
_PIECE_RE = re.compile(rb"[ \t\n\r\x0b\x0c]+|[^ \t\n\r\x0b\x0c]+")

DEFAULT_VOCAB_RESOURCE = "vocab/ct_bpe_v1.json"

# Unbounded growth guard for the per-vocabulary piece cache.
_MEMO_LIMIT = 1 << 20


def _is_pure(tb: bytes) -> bool:
    ws = [b in _WS_BYTES for b in tb]
    return all(ws) or not any(ws)


@dataclass(frozen=True)
class TokenSeq:
    """An encoded text: token ids plus the vocabulary version that made them."""

    tokens: np.ndarray
    vocab_id: str

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenSeq):
            return NotImplemented
        return self.vocab_id == other.vocab_id and np.array_equal(
            self.tokens, other.tokens
        )

    def __hash__(self) -> int:
        return hash((self.vocab_id, self.key()))

    def key(self) -> tuple[int, ...]:
        """Hashable id tuple, used for dedup and as a dict key."""
        return tuple(int(t) for t in self.tokens)


class Vocabulary:
    """An ordered merge list over the 256 byte tokens.

    Token ``256 + i`` is the concatenation of the byte strings of merge
    ``i``'s two parts. The merge list fully determines the vocabulary; the
    ``vocab_id`` pins the version so mismatched encodings are rejected at
    every interface that consumes token sequences.
    """

    def __init__(self, vocab_id: str, merges: tuple[tuple[int, int], ...]) -> None:
        self.vocab_id = vocab_id
        self.merges = tuple((int(a), int(b)) for a, b in merges)
        token_bytes: list[bytes] = [bytes([i]) for i in range(256)]
        for i, (a, b) in enumerate(self.merges):
            new_id = 256 + i
            if not (0 <= a < new_id and 0 <= b < new_id):
                raise FormatError(f"merge {i} references undefined token ({a}, {b})")
            tb = token_bytes[a] + token_bytes[b]
            if not _is_pure(tb):
                raise FormatError(
                    f"merge {i} would create a token mixing whitespace and "
                    f"non-whitespace bytes: {tb!r}"
                )
            token_bytes.append(tb)
        self.token_bytes: tuple[bytes, ...] = tuple(token_bytes)
        self._table: dict[bytes, int] = {tb: i for i, tb in enumerate(token_bytes)}
        self._maxlen = max(len(tb) for tb in token_bytes)
        self._memo: dict[bytes, tuple[int, ...]] = {}
        self._trie: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def size(self) -> int:
        return len(self.token_bytes)

    # -- persistence --------------------------------------------------------

    def to_file(self, path: str | Path) -> None:
        payload = {
            "vocab_id": self.vocab_id,
            "merges": [[a, b, 256 + i] for i, (a, b) in enumerate(self.merges)],
        }
        Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, payload: dict) -> "Vocabulary":
        try:
            vocab_id = payload["vocab_id"]
            raw = payload["merges"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"vocabulary file missing field: {exc}") from exc
        merges = []
        for i, triple in enumerate(raw):
            if len(triple) != 3:
                raise FormatError(f"merge {i} is not a triple: {triple!r}")
            a, b, c = (int(v) for v in triple)
            if c != 256 + i:
                raise FormatError(f"merge {i} declares id {c}, expected {256 + i}")
            merges.append((a, b))
        return cls(vocab_id, tuple(merges))

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocabulary":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"vocabulary file is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)

    # -- internal encode machinery ------------------------------------------

    def _trie_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if self._trie is None:
            next_rows: list[list[int]] = [[-1] * 256]
            token_at: list[int] = [-1]
            for tid, tb in enumerate(self.token_bytes):
                node = 0
                for byte in tb:
                    nxt = next_rows[node][byte]
                    if nxt < 0:
                        nxt = len(next_rows)
                        next_rows.append([-1] * 256)
                        token_at.append(-1)
                        next_rows[node][byte] = nxt
                    node = nxt
                token_at[node] = tid
            self._trie = (
                np.array(next_rows, dtype=np.int32),
                np.array(token_at, dtype=np.int32),
            )
        return self._trie

    def _encode_piece(self, piece: bytes) -> tuple[int, ...]:
        cached = self._memo.get(piece)
        if cached is not None:
            return cached
        ids: list[int] = []
        i, n = 0, len(piece)
        table = self._table
        while i < n:
            length = min(self._maxlen, n - i)
            while length > 1 and piece[i : i + length] not in table:
                length -= 1
            ids.append(table[piece[i : i + length]])
            i += length
        result = tuple(ids)
        if len(self._memo) < _MEMO_LIMIT:
            self._memo[piece] = result
        return result


def tokenize(text: str, vocab: Vocabulary, engine: str | None = None) -> TokenSeq:
    """Greedy longest-match encoding; lossless for any string."""
    data = text.encode("utf-8")
    if not data:
        return TokenSeq(np.empty(0, dtype=np.int32), vocab.vocab_id)
    if resolve_engine(engine) == "numba":
        arr = np.frombuffer(data, dtype=np.uint8).copy()
        trie_next, trie_token = vocab._trie_arrays()
        ids = tok_encode_numba(arr, trie_next, trie_token)
    else:
        parts: list[int] = []
        for m in _PIECE_RE.finditer(data):
            parts.extend(vocab._encode_piece(m.group()))
        ids = np.array(parts, dtype=np.int32)
    return TokenSeq(ids, vocab.vocab_id)


def detokenize(seq: TokenSeq, vocab: Vocabulary) -> str:
    """Inverse of :func:`tokenize`; byte-exact for sequences it produced."""
    if seq.vocab_id != vocab.vocab_id:
        raise FormatError(
            f"token sequence was made with vocab {seq.vocab_id!r}, "
            f"not {vocab.vocab_id!r}"
        )
    size = vocab.size
    chunks = []
    for t in seq.tokens:
        t = int(t)
        if not 0 <= t < size:
            raise FormatError(f"token id {t} outside vocabulary of size {size}")
        chunks.append(vocab.token_bytes[t])
    return b"".join(chunks).decode("utf-8")


def _aligned_slice(
    ids: np.ndarray, vocab: Vocabulary, b0: int, b1: int
) -> np.ndarray | None:
    """Slice of ``ids`` covering exactly bytes [b0, b1), or None if token
    boundaries do not line up with the requested span."""
    pos = 0
    i0 = None
    for idx in range(len(ids)):
        if pos == b0:
            i0 = idx
        pos += len(vocab.token_bytes[int(ids[idx])])
        if pos == b1:
            if i0 is None:
                return None
            return ids[i0 : idx + 1]
        if pos > b1:
            return None
    return None


def canary_token_variants(
    value: str, vocab: Vocabulary, engine: str | None = None
) -> list[TokenSeq]:
    """Token encodings of a value in its possible boundary contexts.

    Encodes the value bare and padded with a leading and/or trailing space,
    trims each encoding to the token span covering the value's own bytes,
    and returns the distinct results in a stable order. Padding variants
    whose token boundaries do not align with the value (possible only when
    the value itself starts or ends with whitespace) are skipped; the bare
    variant is always present.
    """
    if not value:
        raise ParameterError("canary value must be non-empty")
    value_len = len(value.encode("utf-8"))
    out: list[TokenSeq] = []
    seen: set[tuple[int, ...]] = set()
    for pre, post in ((False, False), (True, False), (False, True), (True, True)):
        padded = (" " if pre else "") + value + (" " if post else "")
        ids = tokenize(padded, vocab, engine).tokens
        b0 = 1 if pre else 0
        span = _aligned_slice(ids, vocab, b0, b0 + value_len)
        if span is None:
            continue
        key = tuple(int(t) for t in span)
        if key not in seen:
            seen.add(key)
            out.append(TokenSeq(np.array(span, dtype=np.int32), vocab.vocab_id))
    return out


# ---------------------------------------------------------------------------
# Vocabulary construction
# ---------------------------------------------------------------------------


def build_vocab(texts: list[str], num_merges: int, vocab_id: str) -> Vocabulary:
    """Learn a merge list from a corpus by iterated pair counting.

    Pairs are counted within whitespace-delimited pieces only, so every
    learned token is whitespace-pure by construction. Fully deterministic:
    ties between equally frequent pairs go to the numerically smallest pair,
    and the first ``k`` merges do not depend on how many more are requested.
    """
    piece_counts: Counter[bytes] = Counter()
    for text in texts:
        for m in _PIECE_RE.finditer(text.encode("utf-8")):
            piece_counts[m.group()] += 1
    words: dict[tuple[int, ...], int] = {}
    for piece, cnt in piece_counts.items():
        words[tuple(piece)] = words.get(tuple(piece), 0) + cnt

    merges: list[tuple[int, int]] = []
    for _ in range(num_merges):
        pair_counts: Counter[tuple[int, int]] = Counter()
        for word, cnt in words.items():
            for pair in zip(word, word[1:]):
                pair_counts[pair] += cnt
        if not pair_counts:
            break
        best, best_count = min(
            pair_counts.items(), key=lambda kv: (-kv[1], kv[0])
        )
        if best_count < 2:
            break
        new_id = 256 + len(merges)
        merges.append(best)
        rewritten: dict[tuple[int, ...], int] = {}
        for word, cnt in words.items():
            merged = _merge_word(word, best, new_id)
            rewritten[merged] = rewritten.get(merged, 0) + cnt
        words = rewritten
    return Vocabulary(vocab_id, tuple(merges))


def _merge_word(
    word: tuple[int, ...], pair: tuple[int, int], new_id: int
) -> tuple[int, ...]:
    out: list[int] = []
    i = 0
    n = len(word)
    while i < n:
        if i + 1 < n and word[i] == pair[0] and word[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


_default_vocab: Vocabulary | None = None


def default_vocab() -> Vocabulary:
    """The vocabulary shipped with the package (built once, versioned)."""
    global _default_vocab
    if _default_vocab is None:
        res = resources.files("canarytrace").joinpath("data", DEFAULT_VOCAB_RESOURCE)
        _default_vocab = Vocabulary.from_dict(json.loads(res.read_text("utf-8")))
    return _default_vocab
