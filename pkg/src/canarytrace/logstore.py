"""The vendor's temporary call log: append-only, time-sharded, window-queried.

Entries land in fixed-width time buckets (default 60 s). Each shard is one
JSONL file named by its bucket start, so a window query touches exactly the
buckets overlapping the requested interval and the layout stays trivially
map-reduce-able: shards can be scanned independently and results merged.

Retention is a separate sweep that unlinks whole expired shards; nothing
ever mutates or deletes an individual entry. A window snapshots each shard's
length at query time, so readers are unaffected by appends that race with
iteration of the newest shard.

The store may also run fully in memory (``root=None``), which the simulation
lab uses; the JSONL layout is the durable interface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import FormatError, ParameterError
from .tokenizer import TokenSeq, Vocabulary, tokenize


@dataclass(frozen=True)
class LogEntry:
    """One API call: the stored input text and its token encoding."""

    session_id: str
    account_id: str
    ts: int
    text: str
    tokens: TokenSeq

    def __post_init__(self) -> None:
        if not self.session_id or not self.account_id:
            raise FormatError("session_id and account_id must be non-empty")
        if self.ts < 0:
            raise FormatError("ts must be >= 0")


class StoredEntry(NamedTuple):
    """A log entry plus its stable address (bucket start, line index)."""

    bucket: int
    line: int
    entry: LogEntry


class Shard:
    """One time bucket, entries in append order."""

    def __init__(self, bucket_start: int, bucket_ms: int, path: Path | None) -> None:
        self.bucket_start = bucket_start
        self.bucket_ms = bucket_ms
        self.path = path
        self.entries: list[LogEntry] = []
        self._fh = None

    @property
    def shard_id(self) -> str:
        return str(self.bucket_start)

    def append(self, entry: LogEntry) -> None:
        if not self.bucket_start <= entry.ts < self.bucket_start + self.bucket_ms:
            raise FormatError(
                f"entry ts {entry.ts} outside shard bucket "
                f"[{self.bucket_start}, {self.bucket_start + self.bucket_ms})"
            )
        if self.path is not None:
            if self._fh is None:
                self._fh = open(self.path, "a", encoding="utf-8")
            line = json.dumps(
                {
                    "session_id": entry.session_id,
                    "account_id": entry.account_id,
                    "ts": entry.ts,
                    "text": entry.text,
                    "tokens": [int(t) for t in entry.tokens.tokens],
                    "vocab_id": entry.tokens.vocab_id,
                },
                ensure_ascii=False,
            )
            self._fh.write(line + "\n")
            self._fh.flush()
        self.entries.append(entry)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class LogStore:
    """Append-only store bound to one vocabulary version."""

    def __init__(
        self,
        vocab: Vocabulary,
        root: str | Path | None = None,
        bucket_ms: int = 60_000,
    ) -> None:
        if bucket_ms <= 0:
            raise ParameterError("bucket_ms must be positive")
        self.vocab = vocab
        self.root = Path(root) if root is not None else None
        self.bucket_ms = bucket_ms
        self._shards: dict[int, Shard] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._load_existing()

    def _load_existing(self) -> None:
        assert self.root is not None
        for path in sorted(self.root.glob("*.jsonl")):
            try:
                bucket = int(path.stem)
            except ValueError:
                continue
            shard = Shard(bucket, self.bucket_ms, path)
            for raw in path.read_text(encoding="utf-8").splitlines():
                if not raw:
                    continue
                rec = json.loads(raw)
                if rec["vocab_id"] != self.vocab.vocab_id:
                    raise FormatError(
                        f"shard {path.name} was written with vocab "
                        f"{rec['vocab_id']!r}, store uses {self.vocab.vocab_id!r}"
                    )
                shard.entries.append(
                    LogEntry(
                        session_id=rec["session_id"],
                        account_id=rec["account_id"],
                        ts=int(rec["ts"]),
                        text=rec["text"],
                        tokens=TokenSeq(
                            np.array(rec["tokens"], dtype=np.int32), rec["vocab_id"]
                        ),
                    )
                )
            self._shards[bucket] = shard

    # -- writes --------------------------------------------------------------

    def bucket_of(self, ts: int) -> int:
        return (ts // self.bucket_ms) * self.bucket_ms

    def make_entry(
        self, session_id: str, account_id: str, ts: int, text: str
    ) -> LogEntry:
        return LogEntry(
            session_id=session_id,
            account_id=account_id,
            ts=ts,
            text=text,
            tokens=tokenize(text, self.vocab),
        )

    def append(self, entry: LogEntry) -> None:
        if entry.tokens.vocab_id != self.vocab.vocab_id:
            raise FormatError(
                f"entry tokens use vocab {entry.tokens.vocab_id!r}, "
                f"store uses {self.vocab.vocab_id!r}"
            )
        bucket = self.bucket_of(entry.ts)
        shard = self._shards.get(bucket)
        if shard is None:
            path = self.root / f"{bucket}.jsonl" if self.root is not None else None
            shard = Shard(bucket, self.bucket_ms, path)
            self._shards[bucket] = shard
        shard.append(entry)

    def log_call(self, session_id: str, account_id: str, ts: int, text: str) -> LogEntry:
        entry = self.make_entry(session_id, account_id, ts, text)
        self.append(entry)
        return entry

    # -- reads ---------------------------------------------------------------

    def query_window(self, t0: int, t1: int) -> "LogWindow":
        if t0 > t1:
            raise ParameterError(f"need t0 <= t1, got {t0} > {t1}")
        snap = []
        for bucket in sorted(self._shards):
            shard = self._shards[bucket]
            if bucket <= t1 and bucket + self.bucket_ms > t0:
                snap.append((shard, len(shard.entries)))
        return LogWindow(t0, t1, self.vocab.vocab_id, snap)

    def shard_buckets(self) -> list[int]:
        return sorted(self._shards)

    def expire_before(self, horizon_ts: int) -> int:
        """Drop whole shards strictly older than the horizon; returns count."""
        victims = [
            b for b, s in self._shards.items() if b + self.bucket_ms <= horizon_ts
        ]
        for b in victims:
            shard = self._shards.pop(b)
            shard.close()
            if shard.path is not None and shard.path.exists():
                shard.path.unlink()
        return len(victims)

    def close(self) -> None:
        for shard in self._shards.values():
            shard.close()


@dataclass(frozen=True)
class SessionGroup:
    session_id: str
    account_id: str
    entries: tuple[StoredEntry, ...]
    account_conflict: bool = False


class LogWindow:
    """A bounded slice of the log: the shards overlapping [t0, t1].

    Iteration yields exactly the entries with t0 <= ts <= t1, in canonical
    order (bucket ascending, then append order). Shard lengths were
    snapshotted at query time, so concurrent appends are invisible.
    """

    def __init__(
        self,
        t0: int,
        t1: int,
        vocab_id: str,
        shard_snapshot: list[tuple[Shard, int]],
    ) -> None:
        self.t0 = t0
        self.t1 = t1
        self.vocab_id = vocab_id
        self._snap = shard_snapshot
        self._entries: list[StoredEntry] | None = None
        self._char_pack: tuple[np.ndarray, np.ndarray] | None = None
        self._token_pack: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def shard_count(self) -> int:
        return len(self._snap)

    @property
    def shard_ids(self) -> list[str]:
        return [shard.shard_id for shard, _ in self._snap]

    def entries(self) -> list[StoredEntry]:
        if self._entries is None:
            out: list[StoredEntry] = []
            for shard, count in self._snap:
                for line in range(count):
                    e = shard.entries[line]
                    if self.t0 <= e.ts <= self.t1:
                        out.append(StoredEntry(shard.bucket_start, line, e))
            self._entries = out
        return self._entries

    def __iter__(self) -> Iterator[StoredEntry]:
        return iter(self.entries())

    def sessions(self) -> dict[str, SessionGroup]:
        """Group entries by session, preserving order; flag account splits."""
        grouped: dict[str, list[StoredEntry]] = {}
        for se in self.entries():
            grouped.setdefault(se.entry.session_id, []).append(se)
        out: dict[str, SessionGroup] = {}
        for sid, ses in grouped.items():
            accounts = {se.entry.account_id for se in ses}
            out[sid] = SessionGroup(
                session_id=sid,
                account_id=ses[0].entry.account_id,
                entries=tuple(ses),
                account_conflict=len(accounts) > 1,
            )
        return out

    def integrity_warnings(self) -> list[str]:
        return [
            f"session {g.session_id!r} appears under multiple accounts"
            for g in self.sessions().values()
            if g.account_conflict
        ]

    def per_shard(self) -> list["LogWindow"]:
        """One single-shard window per shard, for independent scanning."""
        return [
            LogWindow(self.t0, self.t1, self.vocab_id, [(shard, count)])
            for shard, count in self._snap
        ]

    # -- packed views for the scan kernels ------------------------------------

    def char_pack(self) -> tuple[np.ndarray, np.ndarray]:
        if self._char_pack is None:
            bufs = [se.entry.text.encode("utf-8") for se in self.entries()]
            bounds = np.zeros(len(bufs) + 1, dtype=np.int64)
            if bufs:
                bounds[1:] = np.cumsum([len(b) for b in bufs])
            symbols = np.frombuffer(b"".join(bufs), dtype=np.uint8).copy()
            self._char_pack = (symbols, bounds)
        return self._char_pack

    def token_pack(self) -> tuple[np.ndarray, np.ndarray]:
        if self._token_pack is None:
            seqs = [se.entry.tokens.tokens for se in self.entries()]
            bounds = np.zeros(len(seqs) + 1, dtype=np.int64)
            if seqs:
                bounds[1:] = np.cumsum([len(s) for s in seqs])
                symbols = np.concatenate(seqs).astype(np.int32, copy=False)
            else:
                symbols = np.empty(0, dtype=np.int32)
            self._token_pack = (symbols, bounds)
        return self._token_pack
