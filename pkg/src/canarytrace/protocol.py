"""The authority-vendor protocol: authenticated requests, audited execution.

Message bodies are canonicalized as JSON with sorted keys and no
insignificant whitespace (UTF-8, non-ASCII unescaped); requests are
authenticated with HMAC-SHA256 over the canonical body under a 32-byte key
established at registration. Canonicalization is byte-stable across
serialize/parse round trips, which is what makes the MAC well defined.

Canary values necessarily travel in plaintext over the authenticated
channel: the vendor must substring-search for the exact values, so hashed
or blinded forms cannot work. The channel protects integrity and origin,
not secrecy from the vendor.

Every submission, including ones that fail authentication or validation, is
appended to a hash-chained audit log before any response is released. Each
record hashes its predecessor's hash together with its own canonical body,
so truncation, reordering, or in-place edits are all detectable and
localizable to a sequence number.

Transport is 4-byte big-endian length-prefixed JSON frames with message
types ``register``, ``request``, ``report``, and ``error``. The same
request/report schema works over files for offline use.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import re
import socket
import socketserver
import struct
import threading
import time
import uuid
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

from .attribution import AttributionReport, INTERNAL, DISCLOSE, decide, redact
from .codebook import SampledSet
from .detector import (
    CalibrationTable,
    SemanticRule,
    char_search,
    semantic_search,
)
from .errors import (
    AuthenticationError,
    CanarytraceError,
    ConflictError,
    FormatError,
    ParameterError,
)
from .logstore import LogStore

KEY_LENGTH = 32
GENESIS_HASH = "0" * 64

MSG_REGISTER = "register"
MSG_REQUEST = "request"
MSG_REPORT = "report"
MSG_ERROR = "error"

_UUID4_RE = re.compile(
    r"[0-9a-f]{8}-[0-9a-f]{4}-4[0-9a-f]{3}-[89ab][0-9a-f]{3}-[0-9a-f]{12}"
)


def canonical_bytes(obj) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def compute_mac(key: bytes, body: Mapping) -> str:
    return hmac.new(key, canonical_bytes(body), hashlib.sha256).hexdigest()


# ---------------------------------------------------------------------------
# Registration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuthorityRegistration:
    authority_id: str
    key: bytes
    standing: str = ""

    def __post_init__(self) -> None:
        if not self.authority_id:
            raise FormatError("authority_id must be non-empty")
        if len(self.key) != KEY_LENGTH:
            raise FormatError(f"authority key must be exactly {KEY_LENGTH} bytes")


class AuthorityRegistry:
    def __init__(self) -> None:
        self._entries: dict[str, AuthorityRegistration] = {}
        self._lock = threading.Lock()

    def register(self, authority_id: str, key: bytes, standing: str = "") -> None:
        reg = AuthorityRegistration(authority_id, key, standing)
        with self._lock:
            if authority_id in self._entries:
                raise ConflictError(f"authority {authority_id!r} already registered")
            self._entries[authority_id] = reg

    def get(self, authority_id: str) -> AuthorityRegistration | None:
        return self._entries.get(authority_id)


# ---------------------------------------------------------------------------
# Attribution requests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttributionRequest:
    """A signed search order: the sampled canaries, the window, the rule."""

    request_id: str
    authority_id: str
    universe_id: str
    k: int
    members: tuple[str, ...]
    values: Mapping[str, str]
    rule_ids: Mapping[str, str]
    tau: int
    delta: int
    m: int
    redaction: str
    sample_seed: int = 0
    mac: str = ""

    def __post_init__(self) -> None:
        if not _UUID4_RE.fullmatch(self.request_id):
            raise FormatError(f"request_id {self.request_id!r} is not a UUID4")
        if self.delta <= 0:
            raise FormatError("delta must be positive")
        if self.k != len(self.members):
            raise FormatError("k does not match the member count")
        if not 0 <= self.m <= self.k:
            raise ParameterError(f"need 0 <= m <= k, got m={self.m}, k={self.k}")
        if self.redaction not in (INTERNAL, DISCLOSE):
            raise FormatError(f"unknown redaction mode {self.redaction!r}")
        member_set = set(self.members)
        if len(member_set) != len(self.members):
            raise FormatError("sampled members are not distinct")
        carried = set(self.values) | set(self.rule_ids)
        if set(self.values) & set(self.rule_ids):
            raise FormatError("a canary cannot carry both a value and a rule")
        if not carried <= member_set:
            raise FormatError("values/rule_ids reference canaries outside the sample")

    def body(self) -> dict:
        return {
            "request_id": self.request_id,
            "authority_id": self.authority_id,
            "universe_id": self.universe_id,
            "k": self.k,
            "members": list(self.members),
            "values": dict(self.values),
            "rule_ids": dict(self.rule_ids),
            "tau": self.tau,
            "delta": self.delta,
            "m": self.m,
            "redaction": self.redaction,
            "sample_seed": self.sample_seed,
        }

    def signed(self, key: bytes) -> "AttributionRequest":
        return replace(self, mac=compute_mac(key, self.body()))

    def verify(self, key: bytes) -> bool:
        return hmac.compare_digest(self.mac, compute_mac(key, self.body()))

    def sample(self) -> SampledSet:
        return SampledSet(
            universe_id=self.universe_id,
            k=self.k,
            members=self.members,
            rng_seed=self.sample_seed,
        )

    def to_dict(self) -> dict:
        d = self.body()
        d["mac"] = self.mac
        return d

    _SCHEMA_KEYS = frozenset(
        {
            "request_id",
            "authority_id",
            "universe_id",
            "k",
            "members",
            "values",
            "rule_ids",
            "tau",
            "delta",
            "m",
            "redaction",
            "sample_seed",
            "mac",
        }
    )

    @classmethod
    def from_dict(cls, payload: Mapping) -> "AttributionRequest":
        # Strict schema: exactly these keys, no defaults. Anything else means
        # the bytes on the wire are not a canonical request.
        keys = set(payload)
        if keys != cls._SCHEMA_KEYS:
            unexpected = sorted(keys - cls._SCHEMA_KEYS)
            missing = sorted(cls._SCHEMA_KEYS - keys)
            raise FormatError(
                f"non-canonical request: unexpected keys {unexpected}, "
                f"missing keys {missing}"
            )
        try:
            return cls(
                request_id=payload["request_id"],
                authority_id=payload["authority_id"],
                universe_id=payload["universe_id"],
                k=int(payload["k"]),
                members=tuple(payload["members"]),
                values=dict(payload["values"]),
                rule_ids=dict(payload["rule_ids"]),
                tau=int(payload["tau"]),
                delta=int(payload["delta"]),
                m=int(payload["m"]),
                redaction=payload["redaction"],
                sample_seed=int(payload["sample_seed"]),
                mac=payload["mac"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed attribution request: {exc}") from exc


def new_request_id() -> str:
    return str(uuid.uuid4())


# ---------------------------------------------------------------------------
# Tamper-evident audit log
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    request_id: str
    received_at: int
    verdict_summary: str
    prev_hash: str
    this_hash: str

    def body(self) -> dict:
        return {
            "seq": self.seq,
            "request_id": self.request_id,
            "received_at": self.received_at,
            "verdict_summary": self.verdict_summary,
        }


def _chain_hash(prev_hash: str, body: Mapping) -> str:
    return hashlib.sha256(prev_hash.encode("ascii") + canonical_bytes(body)).hexdigest()


class AuditLog:
    """Hash-chained, gapless-sequence record of every submission.

    Appends are serialized through one lock: the chain is the total order
    of request handling. With a path, each record is also written as one
    JSONL line.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[AuditRecord] = []
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for raw in self.path.read_text(encoding="utf-8").splitlines():
                if raw:
                    rec = json.loads(raw)
                    self.records.append(AuditRecord(**rec))

    def append(
        self,
        request_id: str,
        verdict_summary: str,
        received_at: int | None = None,
    ) -> AuditRecord:
        with self._lock:
            prev = self.records[-1].this_hash if self.records else GENESIS_HASH
            record = AuditRecord(
                seq=len(self.records),
                request_id=request_id,
                received_at=(
                    received_at if received_at is not None else int(time.time() * 1000)
                ),
                verdict_summary=verdict_summary,
                prev_hash=prev,
                this_hash="",
            )
            record = replace(record, this_hash=_chain_hash(prev, record.body()))
            self.records.append(record)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(vars(record), sort_keys=True) + "\n")
            return record

    def verify(self) -> tuple[bool, int | None]:
        """True if the chain holds end to end, else the first broken seq."""
        prev = GENESIS_HASH
        for i, rec in enumerate(self.records):
            if rec.seq != i or rec.prev_hash != prev:
                return False, rec.seq if rec.seq != i else i
            if _chain_hash(prev, rec.body()) != rec.this_hash:
                return False, i
            prev = rec.this_hash
        return True, None


def verify_audit(log: AuditLog) -> tuple[bool, int | None]:
    return log.verify()


# ---------------------------------------------------------------------------
# Vendor service
# ---------------------------------------------------------------------------


class VendorService:
    """Executes authenticated attribution requests against the local log.

    Flow per submission: authenticate, search the window [tau - delta,
    tau + delta] (char level for lexical values, rule scoring for semantic
    references), decide m-of-k, apply redaction, append the audit record,
    and only then release the report. Failures are audited too.
    """

    def __init__(
        self,
        store: LogStore,
        registry: AuthorityRegistry,
        audit: AuditLog,
        rules: Mapping[str, SemanticRule] | None = None,
        calibration: CalibrationTable | None = None,
    ) -> None:
        self.store = store
        self.registry = registry
        self.audit = audit
        self.rules = dict(rules) if rules else {}
        self.calibration = calibration

    def _release(self, report: AttributionReport) -> AttributionReport:
        # Deliberate seam: everything before this call is audited state,
        # everything from it on is response delivery.
        return report

    def _fail(self, request_id: str, reason: str, exc: CanarytraceError):
        self.audit.append(request_id, f"outcome={reason}")
        raise exc

    def submit(self, request: AttributionRequest) -> AttributionReport:
        registration = self.registry.get(request.authority_id)
        if registration is None:
            self._fail(
                request.request_id,
                "authentication-failure:unknown-authority",
                AuthenticationError(
                    f"authority {request.authority_id!r} is not registered"
                ),
            )
        assert registration is not None
        if not request.verify(registration.key):
            self._fail(
                request.request_id,
                "authentication-failure:bad-mac",
                AuthenticationError("request MAC does not verify"),
            )

        window = self.store.query_window(request.tau - request.delta, request.tau + request.delta)
        hits = []
        if request.values:
            hits = char_search(window, request.values)
        scores = []
        missing_rules = []
        if request.rule_ids:
            rules_by_canary = {}
            for cid, rid in request.rule_ids.items():
                rule = self.rules.get(rid)
                if rule is None:
                    missing_rules.append(rid)
                else:
                    rules_by_canary[cid] = rule
            if rules_by_canary:
                scores = semantic_search(window, rules_by_canary, self.calibration)
        report = decide(
            window,
            hits,
            scores,
            request.sample(),
            request.m,
            request_id=request.request_id,
        )
        if missing_rules:
            report = replace(
                report,
                warnings=report.warnings
                + tuple(f"no such rule {rid!r}; canary skipped" for rid in sorted(missing_rules)),
            )
        if request.redaction == INTERNAL:
            report = redact(report)
        flagged = sum(report.verdicts)
        self.audit.append(
            request.request_id,
            f"outcome=ok flagged={flagged} candidates={len(report.candidates)}",
        )
        return self._release(report)

    def submit_dict(self, payload: Mapping) -> dict:
        try:
            request = AttributionRequest.from_dict(payload)
        except (FormatError, ParameterError) as exc:
            rid = "unknown"
            if isinstance(payload, Mapping):
                rid = str(payload.get("request_id", "unknown"))
            kind = (
                "format-error" if isinstance(exc, FormatError) else "parameter-error"
            )
            self.audit.append(rid, f"outcome={kind}")
            raise
        return self.submit(request).to_dict()


# ---------------------------------------------------------------------------
# Wire framing and the service loop
# ---------------------------------------------------------------------------


def write_frame(wfile, obj: Mapping) -> None:
    raw = canonical_bytes(obj)
    wfile.write(struct.pack("!I", len(raw)) + raw)
    wfile.flush()


def read_frame(rfile) -> dict | None:
    header = rfile.read(4)
    if len(header) < 4:
        return None
    (length,) = struct.unpack("!I", header)
    raw = rfile.read(length)
    if len(raw) < length:
        return None
    return json.loads(raw.decode("utf-8"))


_ERROR_KINDS = {
    AuthenticationError: "authentication-failure",
    ConflictError: "conflict",
    ParameterError: "parameter-error",
    FormatError: "format-error",
}


def _error_frame(exc: Exception) -> dict:
    kind = _ERROR_KINDS.get(type(exc), "error")
    return {"type": MSG_ERROR, "error": kind, "message": str(exc)}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:  # pragma: no cover - exercised via live sockets
        while True:
            msg = read_frame(self.rfile)
            if msg is None:
                return
            try:
                reply = self.server.dispatch(msg)  # type: ignore[attr-defined]
            except Exception as exc:
                reply = _error_frame(exc)
            write_frame(self.wfile, reply)


class ProtocolServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr: tuple[str, int], service: VendorService) -> None:
        super().__init__(addr, _Handler)
        self.service = service

    def dispatch(self, msg: Mapping) -> dict:
        mtype = msg.get("type")
        if mtype == MSG_REGISTER:
            self.service.registry.register(
                msg["authority_id"],
                bytes.fromhex(msg["key_hex"]),
                msg.get("standing", ""),
            )
            return {
                "type": MSG_REPORT,
                "body": {"registered": msg["authority_id"]},
            }
        if mtype == MSG_REQUEST:
            return {"type": MSG_REPORT, "body": self.service.submit_dict(msg["body"])}
        raise FormatError(f"unknown message type {mtype!r}")


def serve(addr: tuple[str, int], service: VendorService) -> ProtocolServer:
    """Start the protocol server on a background thread; caller shuts down."""
    server = ProtocolServer(addr, service)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


def call(addr: tuple[str, int], message: Mapping) -> dict:
    """One framed round trip as a client."""
    with socket.create_connection(addr) as sock:
        wfile = sock.makefile("wb")
        rfile = sock.makefile("rb")
        write_frame(wfile, message)
        reply = read_frame(rfile)
    if reply is None:
        raise CanarytraceError("connection closed before a reply arrived")
    return reply
