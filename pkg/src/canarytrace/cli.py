"""Command line interface. One subcommand per operation, JSON in and out."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import simlab
from .attribution import AttributionReport, decide
from .codebook import (
    CanaryTemplate,
    load_universe,
    mint_lexical,
    resolve_sample,
    sample_subset,
    SampledSet,
)
from .detector import (
    calibrate,
    char_search,
    load_calibration,
    load_rules,
    save_calibration,
    semantic_search,
    token_search,
)
from .logstore import LogStore
from .protocol import (
    AttributionRequest,
    AuditLog,
    AuthorityRegistry,
    MSG_REQUEST,
    VendorService,
    call,
    serve,
)
from .security import EvasionParams, design_frontier, evasion_normal, evasion_report
from .tokenizer import Vocabulary, canary_token_variants, default_vocab, tokenize


def _root(args) -> Path:
    root = args.root or os.environ.get("CANARYTRACE_ROOT")
    if not root:
        raise SystemExit("no store root: pass --root or set CANARYTRACE_ROOT")
    return Path(root)


def _vocab(args) -> Vocabulary:
    if getattr(args, "vocab", None):
        return Vocabulary.from_file(args.vocab)
    return default_vocab()


def _window_arg(raw: str) -> tuple[int, int]:
    try:
        t0, t1 = (int(p) for p in raw.split(","))
    except ValueError:
        raise SystemExit(f"bad window {raw!r}; expected t0,t1 in unix ms")
    return t0, t1


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, ensure_ascii=False))


# -- subcommands -------------------------------------------------------------


def cmd_mint(args) -> None:
    template = CanaryTemplate(template_id="cli", pattern=args.template)
    print(mint_lexical(template, args.seed))


def cmd_sample(args) -> None:
    universe = load_universe(args.universe)
    sample = sample_subset(universe, args.k, args.seed)
    _print_json(
        {
            "universe_id": sample.universe_id,
            "k": sample.k,
            "members": list(sample.members),
            "rng_seed": sample.rng_seed,
        }
    )


def cmd_tokenize(args) -> None:
    vocab = _vocab(args)
    text = sys.stdin.read() if args.stdin else args.text
    if text is None:
        raise SystemExit("pass --text or --stdin")
    seq = tokenize(text, vocab)
    _print_json({"vocab_id": seq.vocab_id, "tokens": [int(t) for t in seq.tokens]})


def cmd_log_append(args) -> None:
    store = LogStore(vocab=_vocab(args), root=_root(args), bucket_ms=args.bucket_ms)
    entry = store.log_call(args.session, args.account, args.ts, args.text)
    store.close()
    _print_json({"appended": {"session_id": entry.session_id, "ts": entry.ts}})


def cmd_log_query(args) -> None:
    store = LogStore(vocab=_vocab(args), root=_root(args), bucket_ms=args.bucket_ms)
    window = store.query_window(args.t0, args.t1)
    out = [
        {
            "session_id": se.entry.session_id,
            "account_id": se.entry.account_id,
            "ts": se.entry.ts,
            "text": se.entry.text,
        }
        for se in window
    ]
    store.close()
    _print_json({"shards": window.shard_ids, "entries": out})


def cmd_search(args) -> None:
    vocab = _vocab(args)
    store = LogStore(vocab=vocab, root=_root(args), bucket_ms=args.bucket_ms)
    t0, t1 = _window_arg(args.window)
    window = store.query_window(t0, t1)
    universe = load_universe(args.canaries)
    values = universe.lexical_values()
    result: dict = {"hits": [], "scores": []}
    if values:
        if args.level == "token":
            variants = {
                cid: canary_token_variants(v, vocab) for cid, v in values.items()
            }
            hits = token_search(window, variants)
        else:
            hits = char_search(window, values)
        result["hits"] = [
            {
                "session_id": h.session_id,
                "canary_id": h.canary_id,
                "level": h.level,
                "count": h.count,
                "positions": [list(p) for p in h.positions],
            }
            for h in hits
        ]
    if args.rules:
        rules = load_rules(args.rules)
        calibration = load_calibration(args.calibration) if args.calibration else None
        rules_by_canary = {
            cid: rules[rid]
            for cid, rid in universe.semantic_rules().items()
            if rid in rules
        }
        scores = semantic_search(window, rules_by_canary, calibration)
        result["scores"] = [
            {
                "session_id": s.session_id,
                "canary_id": s.canary_id,
                "score": s.score,
                "threshold": s.threshold,
                "fired": s.fired,
            }
            for s in scores
        ]
    store.close()
    _print_json(result)


def _report_table(report: AttributionReport) -> str:
    lines = [
        f"request {report.request_id or '(local)'}  m={report.m} of k={report.sample.k}",
        f"{'flag':4}  {'matched':7}  {'score':>8}  {'session':24}  account",
    ]
    for cand, verdict in zip(report.candidates, report.verdicts):
        lines.append(
            f"{'*' if verdict else ' ':4}  {len(cand.matched):7d}  "
            f"{cand.aggregate_score:8.2f}  {cand.session_id:24}  "
            f"{cand.account_id if cand.account_id is not None else '(redacted)'}"
        )
    for w in report.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines)


def cmd_attribute(args) -> None:
    vocab = _vocab(args)
    store = LogStore(vocab=vocab, root=_root(args), bucket_ms=args.bucket_ms)
    t0, t1 = _window_arg(args.window)
    window = store.query_window(t0, t1)
    universe = load_universe(args.universe)
    raw = json.loads(Path(args.sample).read_text(encoding="utf-8"))
    sample = SampledSet(
        universe_id=raw["universe_id"],
        k=int(raw["k"]),
        members=tuple(raw["members"]),
        rng_seed=int(raw.get("rng_seed", 0)),
    )
    values, _ = resolve_sample(sample, universe)
    hits = char_search(window, values) if values else []
    report = decide(window, hits, [], sample, args.m)
    store.close()
    if not args.json:
        print(_report_table(report))
    if args.json or args.out:
        payload = report.to_dict()
        if args.out:
            Path(args.out).write_text(
                json.dumps(payload, indent=2) + "\n", encoding="utf-8"
            )
        if args.json:
            _print_json(payload)


def cmd_evasion(args) -> None:
    params = EvasionParams(n=args.n, k=args.k, m=args.m, r=args.r)
    if args.normal:
        print(f"{evasion_normal(params, continuity_correction=args.cc):.10g}")
        return
    rep = evasion_report(params)
    _print_json(
        {
            "p_exact": rep.p_exact,
            "p_normal": rep.p_normal,
            "p_normal_cc": rep.p_normal_cc,
            "mu": rep.mu,
            "sigma2": rep.sigma2,
        }
    )


def cmd_frontier(args) -> None:
    points = design_frontier(args.n, args.r, args.budget)
    _print_json(
        [
            {"k": p.k, "m": p.m, "p_exact": p.p_exact, "utility_cost": p.utility_cost}
            for p in points
        ]
    )


def cmd_calibrate(args) -> None:
    rules = load_rules(args.rules)
    negatives = [
        json.loads(line)["text"]
        for line in Path(args.negatives).read_text(encoding="utf-8").splitlines()
        if line
    ]
    table = calibrate(
        list(rules.values()),
        negatives,
        args.fpr_target,
        negative_corpus_id=Path(args.negatives).name,
    )
    if args.out:
        save_calibration(table, args.out)
    _print_json(
        {
            "fpr_target": table.fpr_target,
            "thresholds": {rid: t for rid, t in table.thresholds},
        }
    )


def cmd_simulate(args) -> None:
    config = simlab.load_experiment_config(args.config)
    result = simlab.run_experiment(config)
    if args.csv:
        result.to_csv(args.csv)
    _print_json(result.to_summary())


def cmd_bench(args) -> None:
    sizes = [int(s) for s in args.sizes.split(",")]
    engines: list[str | None]
    if args.engines == "both":
        engines = ["numba", "numpy"]
    elif args.engines == "auto":
        engines = [None]
    else:
        engines = [args.engines]
    result = simlab.bench_search(sizes, repetitions=args.repetitions, engines=engines)
    if args.csv:
        result.to_csv(args.csv)
    for row in sorted(result.rows, key=lambda r: (r.engine, r.level, r.size)):
        print(
            f"{row.engine:6} {row.level:5} N={row.size:6d} "
            f"median={row.median_s * 1e3:9.3f} ms  matches={row.matches}"
        )


def _build_service(args) -> VendorService:
    vocab = _vocab(args)
    root = _root(args)
    # Shard files and audit.jsonl share the root; the shard loader only
    # picks up files with numeric bucket names.
    store = LogStore(vocab=vocab, root=root, bucket_ms=args.bucket_ms)
    registry = AuthorityRegistry()
    if args.authorities:
        entries = json.loads(Path(args.authorities).read_text(encoding="utf-8"))
        for authority_id, entry in entries.items():
            registry.register(
                authority_id, bytes.fromhex(entry["key_hex"]), entry.get("standing", "")
            )
    rules = load_rules(args.rules) if args.rules else None
    calibration = load_calibration(args.calibration) if args.calibration else None
    audit = AuditLog(root / "audit.jsonl")
    return VendorService(store, registry, audit, rules, calibration)


def cmd_serve(args) -> None:
    host, port = args.addr.rsplit(":", 1)
    service = _build_service(args)
    server = serve((host, int(port)), service)
    print(f"serving on {server.server_address[0]}:{server.server_address[1]}")
    try:
        import threading

        threading.Event().wait()
    except KeyboardInterrupt:
        server.shutdown()


def cmd_request(args) -> None:
    body = json.loads(Path(args.file).read_text(encoding="utf-8"))
    if args.key_hex:
        request = AttributionRequest.from_dict(body).signed(bytes.fromhex(args.key_hex))
        body = request.to_dict()
    if args.addr:
        host, port = args.addr.rsplit(":", 1)
        reply = call((host, int(port)), {"type": MSG_REQUEST, "body": body})
        _print_json(reply)
    else:
        service = _build_service(args)
        _print_json(service.submit_dict(body))


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canarytrace",
        description="Canary-based agent attribution toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_store_args(p) -> None:
        p.add_argument("--root", help="store root (default: $CANARYTRACE_ROOT)")
        p.add_argument("--vocab", help="vocabulary JSON (default: shipped)")
        p.add_argument("--bucket-ms", type=int, default=60_000)

    p = sub.add_parser("mint", help="mint a lexical canary value")
    p.add_argument("--template", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_mint)

    p = sub.add_parser("sample", help="sample a k-subset of a universe")
    p.add_argument("--universe", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("tokenize", help="tokenize text with a vocabulary")
    p.add_argument("--vocab")
    p.add_argument("--text")
    p.add_argument("--stdin", action="store_true")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("log", help="append to or query the store")
    logsub = p.add_subparsers(dest="log_command", required=True)
    pa = logsub.add_parser("append")
    add_store_args(pa)
    pa.add_argument("--session", required=True)
    pa.add_argument("--account", required=True)
    pa.add_argument("--ts", type=int, required=True)
    pa.add_argument("--text", required=True)
    pa.set_defaults(func=cmd_log_append)
    pq = logsub.add_parser("query")
    add_store_args(pq)
    pq.add_argument("--t0", type=int, required=True)
    pq.add_argument("--t1", type=int, required=True)
    pq.set_defaults(func=cmd_log_query)

    p = sub.add_parser("search", help="search a window for canaries")
    add_store_args(p)
    p.add_argument("--window", required=True, help="t0,t1 in unix ms")
    p.add_argument("--canaries", required=True, help="universe JSON file")
    p.add_argument("--level", choices=["char", "token"], default="char")
    p.add_argument("--rules")
    p.add_argument("--calibration")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("attribute", help="run the m-of-k decision over a window")
    add_store_args(p)
    p.add_argument("--window", required=True)
    p.add_argument("--sample", required=True, help="sampled-set JSON file")
    p.add_argument("--universe", required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("evasion", help="evasion probability for (n, k, m, r)")
    for flag in ("--n", "--k", "--m", "--r"):
        p.add_argument(flag, type=int, required=True)
    p.add_argument("--normal", action="store_true", help="print only the normal approximation")
    p.add_argument("--cc", action="store_true", help="apply the continuity correction")
    p.set_defaults(func=cmd_evasion)

    p = sub.add_parser("frontier", help="(k, m) choices meeting an evasion budget")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--budget", type=float, required=True)
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("calibrate", help="calibrate semantic rule thresholds")
    p.add_argument("--rules", required=True)
    p.add_argument("--negatives", required=True, help="JSONL with a text field per session")
    p.add_argument("--fpr-target", type=float, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="search throughput benchmark")
    p.add_argument("--sizes", default="2000,5000,7000,10000,13000")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--engines", default="auto", choices=["auto", "numba", "numpy", "both"])
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the vendor service")
    add_store_args(p)
    p.add_argument("--addr", required=True, help="host:port")
    p.add_argument("--authorities", help="JSON {authority_id: {key_hex, standing}}")
    p.add_argument("--rules")
    p.add_argument("--calibration")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("request", help="submit an attribution request")
    add_store_args(p)
    p.add_argument("--file", required=True, help="request JSON")
    p.add_argument("--addr", help="host:port; omit for offline mode")
    p.add_argument("--key-hex", help="sign the request body before sending")
    p.add_argument("--authorities")
    p.add_argument("--rules")
    p.add_argument("--calibration")
    p.set_defaults(func=cmd_request)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
