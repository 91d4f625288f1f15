"""Acceptance gate: every criterion at its stated tolerance.

Each test prints exactly one `[acceptance] criterion NN ...: PASS/FAIL`
line (run with `pytest tests/test_acceptance.py -v -s` to see them live).
Tolerances are pinned here, not configurable.
"""

from __future__ import annotations

import json
import math
import time
from collections import defaultdict
from fractions import Fraction
from importlib import resources

import numpy as np

from canarytrace._rng import SplitMix64, derive_seed
from canarytrace.attribution import (
    choose_threshold,
    decide,
    poisson_binomial_tail,
)
from canarytrace.codebook import CanaryTemplate, SampledSet, make_lexical_universe, mint_lexical
from canarytrace.detector import (
    calibrate,
    char_search,
    empirical_fpr,
    load_rules,
    merge_hits,
    search_shards,
    semantic_score,
    token_search,
)
from canarytrace.logstore import LogStore
from canarytrace.protocol import (
    AttributionRequest,
    AuditLog,
    AuthorityRegistry,
    VendorService,
    canonical_bytes,
)
from canarytrace.security import EvasionParams, evasion_exact, evasion_exact_fraction, evasion_normal
from canarytrace.simlab import (
    ExperimentConfig,
    REMOVE,
    SURVIVAL,
    WORD_POOL,
    WrapperPolicy,
    bench_search,
    full_overlap_task,
    run_experiment,
)
from canarytrace.tokenizer import canary_token_variants, default_vocab


def _report(num: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"\n[acceptance] criterion {num:02d} ({name}): {status}  {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


# ---------------------------------------------------------------------------


def test_criterion_01_evasion_exact_vs_full_enumeration():
    """Exact rational equality against all-removal-sets x all-samples, n <= 12."""
    t0 = time.perf_counter()
    popcount = np.array([bin(i).count("1") for i in range(1 << 16)], dtype=np.int64)
    mismatches = 0
    checked = 0
    for n in range(1, 13):
        by_count: dict[int, list[int]] = defaultdict(list)
        for mask in range(1 << n):
            by_count[int(popcount[mask])].append(mask)
        arrays = {c: np.array(v, dtype=np.uint16) for c, v in by_count.items()}
        for k in range(n + 1):
            a = arrays[k]
            for r in range(n + 1):
                b = arrays[r]
                x = popcount[a[:, None] & b[None, :]]
                dist = np.bincount(x.ravel(), minlength=k + 2)
                total = int(a.size) * int(b.size)
                for m in range(k + 1):
                    threshold = k - m + 1
                    tail = int(dist[threshold:].sum())
                    expected = Fraction(tail, total)
                    got = evasion_exact_fraction(EvasionParams(n=n, k=k, m=m, r=r))
                    checked += 1
                    if got != expected:
                        mismatches += 1
    dt = time.perf_counter() - t0
    _report(
        1,
        "evasion math, exact",
        mismatches == 0 and dt < 60.0,
        f"{checked} parameter points, {mismatches} mismatches, {dt:.1f}s",
    )


def test_criterion_02_evasion_paper_scale_anchor():
    params = EvasionParams(n=50, k=25, m=18, r=8)
    p_exact = evasion_exact(params)
    p_cc = evasion_normal(params, continuity_correction=True)
    ok_exact = abs(p_exact - 0.0020147) <= 1e-6
    ok_cc = abs(p_cc - 0.00375) <= 5e-4
    # The companion worked figure for (r=20, m=5) is documented as
    # unreconciled (README): with k=25 the threshold 21 exceeds the support
    # maximum 20, so the exact tail is identically zero.
    second = evasion_exact(EvasionParams(n=50, k=25, m=5, r=20))
    _report(
        2,
        "evasion math, anchor",
        ok_exact and ok_cc and second == 0.0,
        f"p_exact={p_exact:.7f} p_cc={p_cc:.5f} second-example-exact={second}",
    )


def test_criterion_03_poisson_binomial_dp():
    rng = SplitMix64(303)
    worst = 0.0
    for k in range(1, 13):
        probs = [rng.random() for _ in range(k)]
        bits = (np.arange(1 << k)[:, None] >> np.arange(k)[None, :]) & 1
        weights = np.where(bits == 1, np.array(probs), 1.0 - np.array(probs))
        outcome_p = weights.prod(axis=1)
        counts = bits.sum(axis=1)
        for m in range(k + 1):
            enum = float(outcome_p[counts >= m].sum())
            worst = max(worst, abs(poisson_binomial_tail(probs, m) - enum))
    ok_exact = worst <= 1e-12

    k = 25
    probs = [0.2 + 0.6 * rng.random() for _ in range(k)]
    draws = np.random.default_rng(4242).random((1_000_000, k)) < np.array(probs)
    counts = draws.sum(axis=1)
    ok_mc = True
    details = []
    mean = sum(probs)
    for m in {int(mean) - 2, int(mean), int(mean) + 2}:
        tail = poisson_binomial_tail(probs, m)
        emp = float(np.mean(counts >= m))
        sigma = math.sqrt(tail * (1 - tail) / 1_000_000)
        ok_mc = ok_mc and abs(emp - tail) <= 3 * sigma
        details.append(f"m={m}:|{emp - tail:+.2e}|<=3s={3 * sigma:.2e}")
    _report(
        3,
        "Poisson-binomial DP",
        ok_exact and ok_mc,
        f"max-enum-gap={worst:.2e}; MC {' '.join(details)}",
    )


def test_criterion_04_non_adversarial_end_to_end():
    vocab = default_vocab()
    template = CanaryTemplate("c4", "ALNUM{12}")
    n_sessions = 2000
    seeds = 100
    t0 = time.perf_counter()
    exact = 0
    for i in range(seeds):
        rng = np.random.default_rng(derive_seed(404, "c4", i))
        value = mint_lexical(template, derive_seed(404, "value", i))
        ids = rng.integers(0, len(WORD_POOL), size=(n_sessions, 18))
        stamps = rng.integers(0, 60_000, size=n_sessions)
        target = int(rng.integers(0, n_sessions))
        store = LogStore(vocab=vocab, root=None, bucket_ms=60_000)
        for j in range(n_sessions):
            words = [WORD_POOL[w] for w in ids[j]]
            if j == target:
                words[9] = value
            store.log_call(f"sess-{j}", f"acct-{j}", int(stamps[j]), " ".join(words))
        window = store.query_window(0, 60_000)
        hits = char_search(window, {"c": value})
        report = decide(window, hits, [], SampledSet("adhoc", 1, ("c",), 0), 1)
        flagged = report.flagged()
        if (
            len(flagged) == 1
            and flagged[0].session_id == f"sess-{target}"
            and flagged[0].account_id == f"acct-{target}"
        ):
            exact += 1
    dt = time.perf_counter() - t0
    _report(
        4,
        "non-adversarial end-to-end",
        exact == seeds and dt < 30.0,
        f"{exact}/{seeds} exact attributions in {dt:.1f}s",
    )


def test_criterion_05_removal_adversary_vs_theory():
    n, k, m, r = 50, 25, 18, 8
    trials = 10_000
    universe = make_lexical_universe("c5", n, CanaryTemplate("t", "ALNUM{12}"), seed=55)
    config = ExperimentConfig(
        universe=universe,
        k=k,
        m_values=(m,),
        policy=WrapperPolicy(kind=REMOVE, r=r),
        trials=trials,
        seed=505,
        task=full_overlap_task(universe),
    )
    result = run_experiment(config)
    p = evasion_exact(EvasionParams(n=n, k=k, m=m, r=r))
    sigma = math.sqrt(p * (1 - p) / trials)
    evasion = result.evasion_rate(m)
    ok_evasion = abs(evasion - p) <= 3 * sigma
    expected_utility = 1 - r / n
    ok_utility = abs(result.mean_utility - expected_utility) <= 3 * sigma + 1e-9
    _report(
        5,
        "adversarial simulation vs theory",
        ok_evasion and ok_utility,
        f"evasion={evasion:.5f} (exact {p:.5f}, 3s={3 * sigma:.5f}); "
        f"utility={result.mean_utility:.4f} (expected {expected_utility:.4f})",
    )


def test_criterion_06_m_of_k_operating_point():
    k = 20
    survival = [0.9] * k
    background = [0.01] * k
    choice = choose_threshold(background, survival, fpr_budget=0.01)
    predicted_ok = choice.feasible and choice.tpr >= 0.97 and choice.fpr <= 0.01

    universe = make_lexical_universe("c6", k, CanaryTemplate("t", "ALNUM{12}"), seed=66)
    config = ExperimentConfig(
        universe=universe,
        k=k,
        m_values=tuple(range(k + 1)),
        policy=WrapperPolicy(kind=SURVIVAL, survival_default=0.9),
        trials=200,
        seed=606,
        negatives_per_trial=50,
        background_rate=0.01,
    )
    result = run_experiment(config)
    row = result.row_for(choice.m)
    empirical_ok = row.tpr >= 0.97 and row.fpr <= 0.01

    tprs = [r.tpr for r in result.rows]
    fprs = [r.fpr for r in result.rows]
    pred_tprs = [poisson_binomial_tail(survival, m) for m in range(k + 1)]
    pred_fprs = [poisson_binomial_tail(background, m) for m in range(k + 1)]
    monotone = (
        all(a >= b for a, b in zip(tprs, tprs[1:]))
        and all(a >= b for a, b in zip(fprs, fprs[1:]))
        and all(a >= b - 1e-15 for a, b in zip(pred_tprs, pred_tprs[1:]))
        and all(a >= b - 1e-15 for a, b in zip(pred_fprs, pred_fprs[1:]))
    )
    _report(
        6,
        "m-of-k operating point",
        predicted_ok and empirical_ok and monotone,
        f"m*={choice.m} predicted tpr={choice.tpr:.4f} fpr={choice.fpr:.5f}; "
        f"empirical tpr={row.tpr:.4f} fpr={row.fpr:.5f}; monotone={monotone}",
    )


def _c7_corpus(vocab):
    rng = SplitMix64(707)
    values = {
        f"c{i}": mint_lexical(CanaryTemplate("t", "ALNUM{12}"), derive_seed(707, i))
        for i in range(6)
    }
    store = LogStore(vocab=vocab, root=None, bucket_ms=7_000)
    for i in range(2000):
        words = [WORD_POOL[rng.randrange(len(WORD_POOL))] for _ in range(24)]
        for cid, value in values.items():
            if rng.randrange(20) == 0:
                words[rng.randrange(len(words))] = value
        store.log_call(f"s{i}", f"a{i}", rng.randrange(50_000), " ".join(words))
    # A handful of mid-word embeddings: char-only territory.
    fused = values["c0"]
    store.log_call("s-fused", "a-fused", 100, f"prefix xx{fused}zz suffix")
    return store, values


def _naive_char_hits(window, values):
    grouped: dict[tuple[str, str], set[tuple[int, int, int]]] = {}
    for se in window.entries():
        data = se.entry.text.encode("utf-8")
        for cid, value in values.items():
            pat = value.encode("utf-8")
            start = 0
            while True:
                idx = data.find(pat, start)
                if idx < 0:
                    break
                grouped.setdefault((se.entry.session_id, cid), set()).add(
                    (se.bucket, se.line, idx)
                )
                start = idx + 1
    return {key: tuple(sorted(p)) for key, p in grouped.items()}


def test_criterion_07_search_correctness():
    vocab = default_vocab()
    store, values = _c7_corpus(vocab)
    window = store.query_window(0, 50_000)
    oracle = _naive_char_hits(window, values)
    char_hits = char_search(window, values)
    got = {(h.session_id, h.canary_id): h.positions for h in char_hits}
    char_ok = got == oracle

    variants = {cid: canary_token_variants(v, vocab) for cid, v in values.items()}
    token_hits = token_search(window, variants)
    entries = {(se.bucket, se.line): se.entry for se in window.entries()}
    sound = True
    for h in token_hits:
        key = (h.session_id, h.canary_id)
        if key not in oracle:
            sound = False
            break
        for bucket, line, tok_idx in h.positions:
            entry = entries[(bucket, line)]
            byte_off = sum(
                len(vocab.token_bytes[int(t)]) for t in entry.tokens.tokens[:tok_idx]
            )
            if (bucket, line, byte_off) not in oracle[key]:
                sound = False
    # Completeness on the whitespace-delimited part of the corpus (everything
    # except the deliberately fused session).
    token_counts = {
        (h.session_id, h.canary_id): h.count
        for h in token_hits
        if h.session_id != "s-fused"
    }
    char_counts = {
        key: len(pos) for key, pos in oracle.items() if key[0] != "s-fused"
    }
    complete = token_counts == char_counts
    fused_found_char = ("s-fused", "c0") in oracle

    merged = search_shards(window, values=values, variants=variants)
    whole = merge_hits([char_hits, token_hits])
    shard_ok = merged == whole and window.shard_count > 1
    _report(
        7,
        "search correctness",
        char_ok and sound and complete and fused_found_char and shard_ok,
        f"char-oracle={char_ok} token-sound={sound} token-complete={complete} "
        f"fused-char-hit={fused_found_char} shard-merge={shard_ok}",
    )


def test_criterion_08_search_throughput():
    sizes = [2000, 5000, 7000, 10000, 13000]
    t0 = time.perf_counter()
    result = bench_search(sizes, repetitions=5, seed=808)
    dt = time.perf_counter() - t0
    engine = result.rows[0].engine
    char_corr = result.correlation("char", engine)
    token_corr = result.correlation("token", engine)
    ratio = result.token_char_ratio(13000, engine)
    ok = char_corr >= 0.98 and token_corr >= 0.98 and ratio <= 0.67 and dt < 300.0
    _report(
        8,
        "search throughput",
        ok,
        f"engine={engine} corr(char)={char_corr:.4f} corr(token)={token_corr:.4f} "
        f"token/char@13000={ratio:.3f} wall={dt:.1f}s",
    )


def test_criterion_09_protocol(vocab):
    key = bytes(range(32))
    rng = SplitMix64(909)

    def random_request(i: int) -> AttributionRequest:
        k = 1 + rng.randrange(6)
        members = tuple(f"c{j}" for j in range(k))
        values = {
            cid: mint_lexical(CanaryTemplate("t", "ALNUM{12}"), rng.next_u64())
            for cid in members
        }
        return AttributionRequest(
            request_id=f"{rng.next_u64():08x}"[:8]
            + "-0000-4000-8000-"
            + f"{i:012d}",
            authority_id="authority-a",
            universe_id="proto",
            k=k,
            members=members,
            values=values,
            rule_ids={},
            tau=rng.randrange(10**12),
            delta=1 + rng.randrange(10**6),
            m=rng.randrange(k + 1),
            redaction="internal" if rng.randrange(2) else "disclose",
            sample_seed=rng.next_u64(),
        ).signed(key)

    requests = [random_request(i) for i in range(1000)]
    verify_ok = all(r.verify(key) for r in requests)
    round_trip_ok = True
    for r in requests:
        raw = canonical_bytes(r.to_dict())
        again = AttributionRequest.from_dict(json.loads(raw.decode()))
        if canonical_bytes(again.to_dict()) != raw:
            round_trip_ok = False
            break

    flips_rejected = True
    for r in requests[:100]:
        raw = bytearray(canonical_bytes(r.to_dict()))
        pos = rng.randrange(len(raw))
        raw[pos] ^= 1 << rng.randrange(8)
        try:
            tampered = AttributionRequest.from_dict(json.loads(bytes(raw).decode("utf-8")))
        except Exception:
            continue  # rejected at parse time
        if tampered.verify(key):
            flips_rejected = False
            break
    mac_flips_rejected = True
    for r in requests[:100]:
        pos = rng.randrange(64)
        flipped = r.mac[:pos] + ("0" if r.mac[pos] != "0" else "1") + r.mac[pos + 1 :]
        tampered = AttributionRequest.from_dict({**r.to_dict(), "mac": flipped})
        if tampered.verify(key):
            mac_flips_rejected = False
            break

    # End-to-end submissions with an audited service.
    store = LogStore(vocab=vocab, root=None)
    registry = AuthorityRegistry()
    registry.register("authority-a", key)
    audit = AuditLog()
    service = VendorService(store, registry, audit)
    target = requests[0]
    store.log_call("sess-t", "acct-t", target.tau, "x " + next(iter(target.values.values())) + " y")
    for r in requests[:25]:
        service.submit(r)
    report = service.submit(target)
    served_ok = any(
        c.session_id == "sess-t" and v for c, v in zip(report.candidates, report.verdicts)
    )
    audit_ok, _ = audit.verify()

    import dataclasses

    victim = 13
    audit.records[victim] = dataclasses.replace(
        audit.records[victim], verdict_summary="outcome=doctored"
    )
    tampered_ok, bad_seq = audit.verify()
    tamper_detected = (not tampered_ok) and bad_seq == victim

    ok = (
        verify_ok
        and round_trip_ok
        and flips_rejected
        and mac_flips_rejected
        and served_ok
        and audit_ok
        and tamper_detected
    )
    _report(
        9,
        "protocol",
        ok,
        f"verify={verify_ok} round-trip={round_trip_ok} body-flips={flips_rejected} "
        f"mac-flips={mac_flips_rejected} served={served_ok} audit={audit_ok} "
        f"tamper-at={bad_seq}",
    )


def test_criterion_10_calibration_targets():
    rules_path = resources.files("canarytrace").joinpath(
        "data", "rules", "reference_rules.json"
    )
    rules = list(load_rules(str(rules_path)).values())
    rng = SplitMix64(1010)
    snippets = [
        "1. first item 2. second item",
        "First, check the order.",
        "Only 3 left in stock",
        "offer expires in two hours, limited time",
        "prima facie this looks fine",
        "the change is de facto approved per se",
        "Hurry, Act now",
        "3. third point follows secondly",
    ]
    corpus = []
    for i in range(400):
        words = [WORD_POOL[rng.randrange(len(WORD_POOL))] for _ in range(40)]
        text = " ".join(words)
        while rng.randrange(3) == 0:
            text += " " + snippets[rng.randrange(len(snippets))]
        corpus.append(text)

    targets = (0.01, 0.02, 0.05, 0.10, 0.20)
    failures = []
    for target in targets:
        table = calibrate(rules, corpus, target, negative_corpus_id="acceptance")
        for rule in rules:
            fpr = empirical_fpr(rule, corpus, table.threshold_for(rule.rule_id))
            if fpr > target:
                failures.append((rule.rule_id, target, fpr))
    # The corpus must actually exercise the rules: scores must vary.
    varied = all(
        len({semantic_score(t, rule) for t in corpus}) > 3 for rule in rules
    )
    _report(
        10,
        "calibration",
        not failures and varied,
        f"rules={len(rules)} targets={targets} violations={failures} varied={varied}",
    )
