from __future__ import annotations

import hashlib
import json
from importlib import resources

import pytest
from hypothesis import given, settings, strategies as st

from canarytrace._rng import SplitMix64
from canarytrace.attribution import AttributionReport
from canarytrace.errors import (
    AuthenticationError,
    ConflictError,
    FormatError,
    ParameterError,
)
from canarytrace.logstore import LogStore
from canarytrace.protocol import (
    AttributionRequest,
    AuditLog,
    AuthorityRegistry,
    GENESIS_HASH,
    MSG_REGISTER,
    MSG_REPORT,
    MSG_REQUEST,
    VendorService,
    call,
    canonical_bytes,
    compute_mac,
    new_request_id,
    serve,
    verify_audit,
)

KEY = bytes(range(32))


def _request(**overrides) -> AttributionRequest:
    base = dict(
        request_id="00000000-0000-4000-8000-000000000001",
        authority_id="authority-a",
        universe_id="demo-lexical-v1",
        k=2,
        members=("booking_reference", "support_case_id"),
        values={
            "booking_reference": "BK-ARP-555867",
            "support_case_id": "CS-063797",
        },
        rule_ids={},
        tau=1_000_000,
        delta=30_000,
        m=1,
        redaction="disclose",
        sample_seed=7,
    )
    base.update(overrides)
    return AttributionRequest(**base)


def _service(vocab, with_entries=True):
    store = LogStore(vocab=vocab, root=None)
    if with_entries:
        store.log_call("sess-x", "acct-x", 1_000_000, "code BK-ARP-555867 thanks")
        store.log_call("sess-y", "acct-y", 1_000_500, "unrelated words only")
    registry = AuthorityRegistry()
    registry.register("authority-a", KEY, standing="unit test")
    return VendorService(store, registry, AuditLog())


# -- canonicalization and MAC ----------------------------------------------------


def test_canonical_round_trip_byte_identical():
    req = _request().signed(KEY)
    raw = canonical_bytes(req.to_dict())
    reparsed = AttributionRequest.from_dict(json.loads(raw.decode()))
    assert canonical_bytes(reparsed.to_dict()) == raw


def test_mac_vectors_fixture():
    payload = json.loads(
        resources.files("canarytrace")
        .joinpath("data", "protocol", "mac_vectors.json")
        .read_text("utf-8")
    )
    assert payload["vectors"]
    for vec in payload["vectors"]:
        key = bytes.fromhex(vec["key_hex"])
        assert canonical_bytes(vec["body"]).decode() == vec["canonical"]
        assert compute_mac(key, vec["body"]) == vec["mac_hex"]


def test_sign_and_verify():
    req = _request().signed(KEY)
    assert req.verify(KEY)
    assert not req.verify(bytes(32))


def test_request_validation():
    with pytest.raises(FormatError):
        _request(request_id="not-a-uuid")
    with pytest.raises(FormatError):
        _request(delta=0)
    with pytest.raises(ParameterError):
        _request(m=3)
    with pytest.raises(FormatError):
        _request(redaction="loud")
    with pytest.raises(FormatError):
        _request(values={"stranger": "VALUE-999999"})
    with pytest.raises(FormatError):
        _request(k=3)


@given(st.integers(min_value=0, max_value=2**32), st.data())
@settings(max_examples=120, deadline=None)
def test_single_byte_flips_rejected(seed, data):
    rng = SplitMix64(seed)
    req = _request(
        tau=rng.randrange(10**12), m=rng.randrange(3), sample_seed=rng.next_u64()
    ).signed(KEY)
    raw = bytearray(canonical_bytes(req.to_dict()))
    pos = data.draw(st.integers(min_value=0, max_value=len(raw) - 1))
    bit = data.draw(st.integers(min_value=0, max_value=7))
    raw[pos] ^= 1 << bit
    try:
        tampered = AttributionRequest.from_dict(json.loads(bytes(raw).decode("utf-8")))
    except (json.JSONDecodeError, UnicodeDecodeError, FormatError, ParameterError, ValueError):
        return  # structurally rejected
    # Parsed fine: then either nothing meaningful changed byte-for-byte
    # (impossible for a bit flip of canonical bytes) or the MAC must fail.
    assert not tampered.verify(KEY)


# -- registry ----------------------------------------------------------------


def test_registry_duplicate_rejected():
    reg = AuthorityRegistry()
    reg.register("a", KEY)
    with pytest.raises(ConflictError):
        reg.register("a", KEY)


def test_registry_key_length_checked():
    reg = AuthorityRegistry()
    with pytest.raises(FormatError):
        reg.register("short", b"abc")


# -- service ------------------------------------------------------------------


def test_submit_disclose_returns_account(vocab):
    service = _service(vocab)
    report = service.submit(_request().signed(KEY))
    assert isinstance(report, AttributionReport)
    flagged = report.flagged()
    assert [(c.session_id, c.account_id) for c in flagged] == [("sess-x", "acct-x")]
    ok, bad = verify_audit(service.audit)
    assert ok and bad is None
    assert "outcome=ok" in service.audit.records[-1].verdict_summary


def test_submit_internal_redacts_account(vocab):
    service = _service(vocab)
    report = service.submit(_request(redaction="internal").signed(KEY))
    assert report.flagged()[0].account_id is None
    assert report.flagged()[0].session_id == "sess-x"


def test_unknown_authority_rejected_and_audited(vocab):
    service = _service(vocab)
    req = _request(authority_id="nobody").signed(KEY)
    with pytest.raises(AuthenticationError):
        service.submit(req)
    assert len(service.audit.records) == 1
    assert "unknown-authority" in service.audit.records[0].verdict_summary


def test_bad_mac_rejected_and_audited(vocab):
    service = _service(vocab)
    req = _request().signed(KEY)
    flipped = req.mac[:-1] + ("0" if req.mac[-1] != "0" else "1")
    bad = AttributionRequest.from_dict({**req.to_dict(), "mac": flipped})
    with pytest.raises(AuthenticationError):
        service.submit(bad)
    assert len(service.audit.records) == 1
    assert "bad-mac" in service.audit.records[0].verdict_summary
    ok, _ = verify_audit(service.audit)
    assert ok


def test_empty_window_returns_no_candidates(vocab):
    service = _service(vocab, with_entries=False)
    report = service.submit(_request().signed(KEY))
    assert report.candidates == ()


def test_malformed_body_rejected_and_audited(vocab):
    service = _service(vocab)
    body = _request().signed(KEY).to_dict()
    body.pop("delta")
    with pytest.raises(FormatError):
        service.submit_dict(body)
    assert len(service.audit.records) == 1
    assert "format-error" in service.audit.records[0].verdict_summary

    body = _request().signed(KEY).to_dict()
    body["unexpected"] = 1
    with pytest.raises(FormatError):
        service.submit_dict(body)
    assert "format-error" in service.audit.records[1].verdict_summary
    assert verify_audit(service.audit) == (True, None)


def test_missing_rule_warned(vocab):
    service = _service(vocab)
    req = _request(
        k=3,
        members=("booking_reference", "support_case_id", "style"),
        rule_ids={"style": "no-such-rule"},
    ).signed(KEY)
    report = service.submit(req)
    assert any("no-such-rule" in w for w in report.warnings)


def test_audit_before_answer_crash_injection(vocab, monkeypatch):
    service = _service(vocab)

    def boom(report):
        raise RuntimeError("crash before delivery")

    monkeypatch.setattr(service, "_release", boom)
    with pytest.raises(RuntimeError):
        service.submit(_request().signed(KEY))
    # The audit record exists even though no response was ever released.
    assert len(service.audit.records) == 1
    assert "outcome=ok" in service.audit.records[0].verdict_summary

    service2 = _service(vocab)

    def boom_append(*args, **kwargs):
        raise RuntimeError("crash before audit")

    monkeypatch.setattr(service2.audit, "append", boom_append)
    with pytest.raises(RuntimeError):
        service2.submit(_request().signed(KEY))
    assert service2.audit.records == []  # neither record nor response


# -- audit chain ----------------------------------------------------------------


def test_fresh_log_verifies():
    assert AuditLog().verify() == (True, None)


def test_chain_recomputed_independently():
    log = AuditLog()
    for i in range(100):
        log.append(f"00000000-0000-4000-8000-{i:012d}", f"outcome=ok n={i}", received_at=i)
    ok, bad = log.verify()
    assert ok and bad is None
    prev = GENESIS_HASH
    for rec in log.records:
        body = json.dumps(
            {
                "received_at": rec.received_at,
                "request_id": rec.request_id,
                "seq": rec.seq,
                "verdict_summary": rec.verdict_summary,
            },
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        ).encode()
        want = hashlib.sha256(prev.encode() + body).hexdigest()
        assert rec.this_hash == want
        prev = want


def test_tampering_pinpointed():
    import dataclasses

    log = AuditLog()
    for i in range(10):
        log.append(f"00000000-0000-4000-8000-{i:012d}", "outcome=ok", received_at=i)
    victim = 6
    log.records[victim] = dataclasses.replace(
        log.records[victim], verdict_summary="outcome=doctored"
    )
    ok, bad = log.verify()
    assert not ok and bad == victim


def test_audit_persistence(tmp_path):
    path = tmp_path / "audit.jsonl"
    log = AuditLog(path)
    log.append("00000000-0000-4000-8000-000000000001", "outcome=ok")
    log.append("00000000-0000-4000-8000-000000000002", "outcome=ok")
    reloaded = AuditLog(path)
    assert reloaded.verify() == (True, None)
    assert [r.seq for r in reloaded.records] == [0, 1]
    # Chain continues across restarts.
    reloaded.append("00000000-0000-4000-8000-000000000003", "outcome=ok")
    assert reloaded.verify() == (True, None)


# -- wire ------------------------------------------------------------------------


def test_serve_register_and_request(vocab):
    store = LogStore(vocab=vocab, root=None)
    store.log_call("sess-x", "acct-x", 1_000_000, "code BK-ARP-555867 thanks")
    service = VendorService(store, AuthorityRegistry(), AuditLog())
    server = serve(("127.0.0.1", 0), service)
    try:
        addr = ("127.0.0.1", server.server_address[1])
        reply = call(
            addr,
            {"type": MSG_REGISTER, "authority_id": "authority-a", "key_hex": KEY.hex()},
        )
        assert reply == {"type": MSG_REPORT, "body": {"registered": "authority-a"}}
        # Duplicate registration comes back as a typed error frame.
        reply = call(
            addr,
            {"type": MSG_REGISTER, "authority_id": "authority-a", "key_hex": KEY.hex()},
        )
        assert reply["type"] == "error" and reply["error"] == "conflict"

        signed = _request(request_id=new_request_id()).signed(KEY)
        reply = call(addr, {"type": MSG_REQUEST, "body": signed.to_dict()})
        assert reply["type"] == MSG_REPORT
        flagged = [c for c in reply["body"]["candidates"] if c["flagged"]]
        assert [(c["session_id"], c["account_id"]) for c in flagged] == [
            ("sess-x", "acct-x")
        ]

        bad = dict(signed.to_dict(), mac="0" * 64)
        reply = call(addr, {"type": MSG_REQUEST, "body": bad})
        assert reply["type"] == "error"
        assert reply["error"] == "authentication-failure"

        reply = call(addr, {"type": "mystery"})
        assert reply["type"] == "error" and reply["error"] == "format-error"
    finally:
        server.shutdown()
        server.server_close()
