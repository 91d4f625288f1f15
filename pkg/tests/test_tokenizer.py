from __future__ import annotations

import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canarytrace._rng import SplitMix64
from canarytrace.errors import FormatError, ParameterError
from canarytrace.simlab import WORD_POOL
from canarytrace.tokenizer import (
    Vocabulary,
    build_vocab,
    canary_token_variants,
    default_vocab,
    detokenize,
    tokenize,
)

from conftest import ENGINES


def test_empty_text(vocab):
    assert len(tokenize("", vocab)) == 0


@given(st.text(max_size=200))
@settings(max_examples=300, deadline=None)
def test_round_trip_arbitrary_text(text):
    vocab = default_vocab()
    for eng in ENGINES:
        seq = tokenize(text, vocab, engine=eng)
        assert detokenize(seq, vocab) == text


def test_round_trip_thousand_random_strings(vocab):
    # Codepoints from 1 to 0x2FFF: ASCII, Latin extensions, CJK punctuation,
    # none of them surrogates, so every string is valid UTF-8 input.
    rng = SplitMix64(1000)
    for _ in range(1000):
        length = rng.randrange(80)
        text = "".join(chr(1 + rng.randrange(0x2FFF)) for _ in range(length))
        for eng in ENGINES:
            assert detokenize(tokenize(text, vocab, engine=eng), vocab) == text


@given(st.binary(max_size=120))
@settings(max_examples=200, deadline=None)
def test_round_trip_arbitrary_bytes(data):
    # Any byte string, via the surrogateescape round trip, stays lossless.
    text = data.decode("utf-8", errors="surrogateescape")
    try:
        text.encode("utf-8")
    except UnicodeEncodeError:
        return  # unpaired surrogates are not representable input
    vocab = default_vocab()
    seq = tokenize(text, vocab, engine="numpy")
    assert detokenize(seq, vocab) == text


@given(st.text(max_size=200))
@settings(max_examples=200, deadline=None)
def test_engines_agree(text):
    if len(ENGINES) < 2:
        return
    vocab = default_vocab()
    seqs = [tokenize(text, vocab, engine=eng) for eng in ENGINES]
    assert all(s == seqs[0] for s in seqs)


def test_injected_span_matches_direct_tokenization(vocab):
    value = "BK-HTL-482931"
    context = tokenize("please quote BK-HTL-482931 when you reply", vocab)
    padded = tokenize(" " + value, vocab)
    ids = [int(t) for t in context.tokens]
    sub = [int(t) for t in padded.tokens]
    assert any(
        ids[i : i + len(sub)] == sub for i in range(len(ids) - len(sub) + 1)
    )


def test_variants_dedup_and_cover_value(vocab):
    value = "BK-HTL-482931"
    variants = canary_token_variants(value, vocab)
    assert 1 <= len(variants) <= 4
    for v in variants:
        assert detokenize(v, vocab) == value


def test_variants_space_insensitive_under_shipped_vocab(vocab):
    # No merge crosses whitespace, so bare and padded encodings coincide.
    value = "deadbeef42"
    variants = canary_token_variants(value, vocab)
    assert len(variants) == 1
    assert variants[0] == tokenize(value, vocab)


def test_single_unmerged_byte_value(vocab):
    variants = canary_token_variants("\x01", vocab)
    assert len(variants) == 1
    assert variants[0].key() == (1,)


def test_variants_reject_empty(vocab):
    with pytest.raises(ParameterError):
        canary_token_variants("", vocab)


def test_boundary_soundness_on_random_embeddings(vocab):
    # Wherever a value occurs whitespace-delimited, its token span equals a
    # variant. 10^4 seeded random embeddings.
    rng = SplitMix64(2024)
    values = ["BK-HTL-482931", "q7Xk29Ra4P", "ref-vcmjoagb", "x9", "Atlas-361"]
    words = list(WORD_POOL)
    for trial in range(10_000):
        value = values[rng.randrange(len(values))]
        n_before = rng.randrange(6)
        n_after = rng.randrange(6)
        before = [words[rng.randrange(len(words))] for _ in range(n_before)]
        after = [words[rng.randrange(len(words))] for _ in range(n_after)]
        sep1 = " " * (1 + rng.randrange(2)) if before else ""
        sep2 = " " * (1 + rng.randrange(2)) if after else ""
        text = " ".join(before) + sep1 + value + sep2 + " ".join(after)
        ids = [int(t) for t in tokenize(text, vocab).tokens]
        variant_keys = {v.key() for v in canary_token_variants(value, vocab)}
        found = any(
            tuple(ids[i : i + len(key)]) == key
            for key in variant_keys
            for i in range(len(ids) - len(key) + 1)
        )
        assert found, (trial, text)


def test_vocab_id_pinning(vocab):
    other = Vocabulary("other-id", vocab.merges)
    seq = tokenize("hello", vocab)
    with pytest.raises(FormatError):
        detokenize(seq, other)


def test_out_of_range_token_rejected(vocab):
    from canarytrace.tokenizer import TokenSeq

    bad = TokenSeq(np.array([vocab.size + 5], dtype=np.int32), vocab.vocab_id)
    with pytest.raises(FormatError):
        detokenize(bad, vocab)


def test_vocab_rejects_whitespace_crossing_merge():
    # ord(' ') = 32, ord('a') = 97: a space+letter token must be refused.
    with pytest.raises(FormatError):
        Vocabulary("bad", ((32, 97),))


def test_vocab_rejects_forward_reference():
    with pytest.raises(FormatError):
        Vocabulary("bad", ((300, 97),))


def test_vocab_file_round_trip(tmp_path, vocab):
    path = tmp_path / "v.json"
    vocab.to_file(path)
    again = Vocabulary.from_file(path)
    assert again.vocab_id == vocab.vocab_id
    assert again.merges == vocab.merges


def test_vocab_file_id_sequence_checked(tmp_path):
    path = tmp_path / "v.json"
    path.write_text(json.dumps({"vocab_id": "x", "merges": [[97, 98, 400]]}))
    with pytest.raises(FormatError):
        Vocabulary.from_file(path)


def test_build_vocab_deterministic_prefix(vocab):
    # The first merges of a rebuild from the committed seed corpus must match
    # the shipped vocabulary exactly; merge i never depends on later merges.
    corpus = (
        resources.files("canarytrace")
        .joinpath("data", "vocab", "seed_corpus.txt")
        .read_text("utf-8")
    )
    rebuilt = build_vocab([corpus], num_merges=48, vocab_id="check")
    assert rebuilt.merges == vocab.merges[:48]


def test_build_vocab_never_mixes_classes():
    built = build_vocab(["a a a a  b b b b   a b a b"], num_merges=16, vocab_id="t")
    for tb in built.token_bytes[256:]:
        ws = [b in b" \t\n\r\x0b\x0c" for b in tb]
        assert all(ws) or not any(ws)
