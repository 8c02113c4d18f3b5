"""
Run traces: per-step digests of every entity state plus a running hash.

Two runs are correct with respect to each other exactly when their traces
compare equal. Traces serialize to a binary log: magic "MLTR", a version
byte, then one record per snapshot (kind, step, entry count, entries,
running hash after the record).
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from melsim import codec

logger = logging.getLogger(__name__)

MAGIC = b"MLTR"
VERSION = 1
DIGEST_SIZE = 16

# Record kinds
KIND_INITIAL = 0
KIND_STEP = 1
KIND_CLOSING = 2
_KIND_NAMES = {KIND_INITIAL: "initial", KIND_STEP: "step", KIND_CLOSING: "closing"}

_RECORD_HEADER = struct.Struct("<BQI")
_ENTRY_ID = struct.Struct("<Q")


class TraceFormatError(ValueError):
    """Raised when a binary trace log cannot be parsed."""


def entity_digest(entity: Any) -> bytes:
    """128-bit digest over the canonical encoding of (id, kind, level, state)."""
    payload = codec.encode((entity.id, entity.kind, entity.level, entity.state))
    return hashlib.blake2b(payload, digest_size=DIGEST_SIZE).digest()


@dataclass(frozen=True)
class TraceRecord:
    kind: int
    step: int
    entries: tuple[tuple[int, bytes], ...]

    def to_bytes(self) -> bytes:
        out = bytearray(_RECORD_HEADER.pack(self.kind, self.step, len(self.entries)))
        for eid, digest in self.entries:
            out += _ENTRY_ID.pack(eid)
            out += digest
        return bytes(out)


@dataclass(frozen=True)
class Divergence:
    """First point where two traces disagree."""

    kind: str
    step: int
    entity: int | None
    detail: str

    def __str__(self) -> str:
        where = f"{self.kind} record, step {self.step}"
        if self.entity is not None:
            where += f", entity {self.entity}"
        return f"{where}: {self.detail}"


@dataclass(eq=False)
class Trace:
    """Ordered trace records with a running hash; `report` is ignored by equality."""

    records: list[TraceRecord] = field(default_factory=list)
    running_hash: bytes = bytes(DIGEST_SIZE)
    report: Any = None

    def _append(self, record: TraceRecord) -> None:
        self.records.append(record)
        self.running_hash = hashlib.blake2b(self.running_hash + record.to_bytes(), digest_size=DIGEST_SIZE).digest()

    def record_initial(self, entries: Iterable[tuple[int, bytes]]) -> None:
        self._append(TraceRecord(KIND_INITIAL, 0, tuple(sorted(entries))))

    def record_step(self, step: int, entries: Iterable[tuple[int, bytes]]) -> None:
        self._append(TraceRecord(KIND_STEP, step, tuple(sorted(entries))))

    def record_closing(self, step: int, entries: Iterable[tuple[int, bytes]]) -> None:
        self._append(TraceRecord(KIND_CLOSING, step, tuple(sorted(entries))))

    @property
    def steps(self) -> list[TraceRecord]:
        return [r for r in self.records if r.kind == KIND_STEP]

    @property
    def final(self) -> TraceRecord | None:
        return self.records[-1] if self.records else None

    def hexdigest(self) -> str:
        return self.running_hash.hex()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return self.running_hash == other.running_hash and self.records == other.records

    def __hash__(self) -> int:
        return hash(self.running_hash)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out.append(VERSION)
        running = bytes(DIGEST_SIZE)
        for record in self.records:
            raw = record.to_bytes()
            running = hashlib.blake2b(running + raw, digest_size=DIGEST_SIZE).digest()
            out += raw
            out += running
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Trace":
        if data[:4] != MAGIC:
            raise TraceFormatError("missing MLTR magic")
        if len(data) < 5 or data[4] != VERSION:
            raise TraceFormatError(f"unsupported trace version {data[4] if len(data) > 4 else None}")
        trace = cls()
        offset = 5
        while offset < len(data):
            if offset + _RECORD_HEADER.size > len(data):
                raise TraceFormatError(f"truncated record header at offset {offset}")
            kind, step, count = _RECORD_HEADER.unpack_from(data, offset)
            offset += _RECORD_HEADER.size
            needed = count * (_ENTRY_ID.size + DIGEST_SIZE) + DIGEST_SIZE
            if offset + needed > len(data):
                raise TraceFormatError(
                    f"truncated {_KIND_NAMES.get(kind, kind)} record {step}: "
                    f"{count} entries need {needed} bytes, {len(data) - offset} left"
                )
            entries = []
            for _ in range(count):
                (eid,) = _ENTRY_ID.unpack_from(data, offset)
                offset += _ENTRY_ID.size
                entries.append((eid, bytes(data[offset:offset + DIGEST_SIZE])))
                offset += DIGEST_SIZE
            trace._append(TraceRecord(kind, step, tuple(entries)))
            stored = bytes(data[offset:offset + DIGEST_SIZE])
            offset += DIGEST_SIZE
            if stored != trace.running_hash:
                raise TraceFormatError(f"running hash mismatch after {_KIND_NAMES.get(kind, kind)} record {step}")
        return trace

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        logger.info("Wrote trace (%s records) to %s", len(self.records), path)
        return path

    @classmethod
    def read(cls, path: str | Path) -> "Trace":
        return cls.from_bytes(Path(path).read_bytes())


def first_divergence(left: Trace, right: Trace) -> Divergence | None:
    """Locate the first differing record and entity, or None when traces are equal."""
    for a, b in zip(left.records, right.records):
        kind = _KIND_NAMES.get(a.kind, str(a.kind))
        if (a.kind, a.step) != (b.kind, b.step):
            return Divergence(kind, a.step, None, f"record mismatch ({a.kind},{a.step}) vs ({b.kind},{b.step})")
        if a.entries == b.entries:
            continue
        mine = dict(a.entries)
        theirs = dict(b.entries)
        for eid in sorted(set(mine) | set(theirs)):
            if eid not in theirs:
                return Divergence(kind, a.step, eid, "entity missing from right trace")
            if eid not in mine:
                return Divergence(kind, a.step, eid, "entity missing from left trace")
            if mine[eid] != theirs[eid]:
                return Divergence(kind, a.step, eid, f"digest {mine[eid].hex()} != {theirs[eid].hex()}")
    if len(left.records) != len(right.records):
        n = min(len(left.records), len(right.records))
        return Divergence("length", n, None, f"{len(left.records)} records vs {len(right.records)}")
    return None
