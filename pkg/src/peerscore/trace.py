"""Event model and on-disk formats shared by the simulator, sensor and pipeline.

Trace file grammar (UTF-8, one event per line)::

    line    := field (" " field)*
    field   := key "=" value          # value contains no spaces and no "="
    keys    := ts kind peer dir [kind-specific fields] [optional flags]

``ts`` is Unix time in seconds written with exactly six decimals, ``peer`` is
``host:port`` (IPv6 hosts in brackets), ``dir`` is ``inbound`` or ``outbound``.
Kind-specific fields are listed in :data:`PAYLOAD_FIELDS`. Blank lines and
lines starting with ``#`` are ignored by the reader.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

try:
    import fcntl
except ImportError:  # pragma: no cover - non-POSIX
    fcntl = None

log = logging.getLogger(__name__)

__all__ = [
    "Direction",
    "EventKind",
    "PeerKey",
    "ObservationEvent",
    "TraceFormatError",
    "TraceOrderError",
    "Violation",
    "TraceValidationReport",
    "format_event",
    "parse_event",
    "write_events",
    "TraceWriter",
    "read_events",
    "validate_trace",
    "export_peer_csv",
    "export_score_csv",
]


class TraceFormatError(ValueError):
    """A trace line could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TraceOrderError(ValueError):
    """Events handed to the writer are not ordered by timestamp."""


class Direction(str, enum.Enum):
    INBOUND = "inbound"
    OUTBOUND = "outbound"


class EventKind(str, enum.Enum):
    CONNECT = "CONNECT"
    DISCONNECT = "DISCONNECT"
    BLOCK = "BLOCK"
    TX = "TX"
    PING_RTT = "PING_RTT"
    PROTO_PING_RTT = "PROTO_PING_RTT"
    ADDR = "ADDR"
    HEADERS_HEIGHT = "HEADERS_HEIGHT"
    BLOCK_HEIGHT = "BLOCK_HEIGHT"
    FEEFILTER = "FEEFILTER"
    MSG = "MSG"


# Required payload fields per kind, in on-disk order, with their parsers.
PAYLOAD_FIELDS: dict[EventKind, tuple[tuple[str, type], ...]] = {
    EventKind.CONNECT: (),
    EventKind.DISCONNECT: (),
    EventKind.BLOCK: (("hash", str), ("height", int)),
    EventKind.TX: (("hash", str), ("fee", int), ("size", int)),
    EventKind.PING_RTT: (("rtt_ms", float),),
    EventKind.PROTO_PING_RTT: (("rtt_ms", float),),
    EventKind.ADDR: (("count", int),),
    EventKind.HEADERS_HEIGHT: (("height", int),),
    EventKind.BLOCK_HEIGHT: (("height", int),),
    EventKind.FEEFILTER: (("min_fee_rate", float),),
    EventKind.MSG: (("command", str),),
}

# Optional annotations, mostly written by the live sensor.
OPTIONAL_FIELDS: dict[EventKind, tuple[tuple[str, type], ...]] = {
    EventKind.DISCONNECT: (("reason", str),),
    EventKind.BLOCK: (("height_unknown", bool),),
    EventKind.TX: (("fee_unknown", bool),),
}

_HEX64 = re.compile(r"[0-9a-f]{64}")
_TOKEN = re.compile(r"[^\s=]+")
MAX_COMMAND_LEN = 12


@dataclass(frozen=True, order=True)
class PeerKey:
    address: str
    port: int
    direction: Direction = Direction.OUTBOUND

    def __post_init__(self):
        if not self.address or not _TOKEN.fullmatch(self.address):
            raise ValueError(f"invalid peer address {self.address!r}")
        if not 0 <= int(self.port) <= 65535:
            raise ValueError(f"port out of range: {self.port}")
        if not isinstance(self.direction, Direction):
            object.__setattr__(self, "direction", Direction(self.direction))

    @property
    def endpoint(self) -> str:
        host = f"[{self.address}]" if ":" in self.address else self.address
        return f"{host}:{self.port}"

    @classmethod
    def parse(cls, endpoint: str, direction: Direction | str = Direction.OUTBOUND) -> "PeerKey":
        if endpoint.startswith("["):
            host, sep, port = endpoint[1:].partition("]:")
        else:
            host, sep, port = endpoint.rpartition(":")
        if not sep or not host:
            raise ValueError(f"malformed peer endpoint {endpoint!r}")
        return cls(host, int(port), Direction(direction))

    def identity(self, mode: str = "address_only") -> str:
        """Remembrance identity for this peer under ``mode``."""
        if mode == "address_only":
            return self.address
        if mode == "address_and_port":
            return self.endpoint
        raise ValueError(f"unknown identity mode {mode!r}")


def _check_payload(kind: EventKind, payload: Mapping[str, Any]) -> None:
    required = PAYLOAD_FIELDS[kind]
    optional = dict(OPTIONAL_FIELDS.get(kind, ()))
    for name, _ in required:
        if name not in payload:
            raise ValueError(f"{kind.value} event missing field {name!r}")
    extra = set(payload) - {n for n, _ in required} - set(optional)
    if extra:
        raise ValueError(f"{kind.value} event has unexpected fields {sorted(extra)}")
    if "hash" in payload and not _HEX64.fullmatch(payload["hash"]):
        raise ValueError("hash must be 64 lowercase hex characters")
    for name in ("height", "count", "fee"):
        if name in payload and payload[name] < 0:
            raise ValueError(f"{name} must be >= 0")
    if "size" in payload and payload["size"] <= 0:
        raise ValueError("size must be > 0")
    for name in ("rtt_ms", "min_fee_rate"):
        if name in payload and not (payload[name] >= 0 and math.isfinite(payload[name])):
            raise ValueError(f"{name} must be a finite value >= 0")
    if kind is EventKind.MSG:
        cmd = payload["command"]
        if not cmd or len(cmd) > MAX_COMMAND_LEN or not _TOKEN.fullmatch(cmd):
            raise ValueError(f"invalid command token {cmd!r}")
    if "reason" in payload and not _TOKEN.fullmatch(payload["reason"]):
        raise ValueError("reason must be a single token")


@dataclass(frozen=True)
class ObservationEvent:
    """One timestamped observation attributed to a peer connection."""

    ts: float
    peer: PeerKey
    kind: EventKind
    payload: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.kind, EventKind):
            object.__setattr__(self, "kind", EventKind(self.kind))
        if not math.isfinite(self.ts):
            raise ValueError("timestamp must be finite")
        _check_payload(self.kind, self.payload)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_event(event: ObservationEvent) -> str:
    """Render one event as a trace line (without newline)."""
    parts = [
        f"ts={event.ts:.6f}",
        f"kind={event.kind.value}",
        f"peer={event.peer.endpoint}",
        f"dir={event.peer.direction.value}",
    ]
    for name, _ in PAYLOAD_FIELDS[event.kind]:
        parts.append(f"{name}={_format_value(event.payload[name])}")
    for name, _ in OPTIONAL_FIELDS.get(event.kind, ()):
        if name in event.payload:
            parts.append(f"{name}={_format_value(event.payload[name])}")
    return " ".join(parts)


def _convert(raw: str, typ: type) -> Any:
    if typ is bool:
        if raw not in ("0", "1"):
            raise ValueError(f"expected 0/1, got {raw!r}")
        return raw == "1"
    return typ(raw)


class _UnknownKind(Exception):
    pass


def parse_event(line: str, lineno: int | None = None) -> ObservationEvent:
    """Parse a single trace line. Raises :class:`TraceFormatError`."""
    fields: dict[str, str] = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep or not key or not value or key in fields:
            raise TraceFormatError(f"malformed field {token!r}", lineno)
        fields[key] = value
    for key in ("ts", "kind", "peer", "dir"):
        if key not in fields:
            raise TraceFormatError(f"missing field {key!r}", lineno)
    try:
        kind = EventKind(fields.pop("kind"))
    except ValueError:
        raise _UnknownKind() from None
    try:
        ts = float(fields.pop("ts"))
        peer = PeerKey.parse(fields.pop("peer"), fields.pop("dir"))
        payload = {}
        schema = PAYLOAD_FIELDS[kind] + OPTIONAL_FIELDS.get(kind, ())
        for name, typ in schema:
            if name in fields:
                payload[name] = _convert(fields.pop(name), typ)
        if fields:
            raise ValueError(f"unexpected fields {sorted(fields)}")
        return ObservationEvent(ts, peer, kind, payload)
    except ValueError as exc:
        raise TraceFormatError(str(exc), lineno) from None


def _check_order(events: Sequence[ObservationEvent], after: float = -math.inf) -> None:
    prev = after
    for i, ev in enumerate(events):
        if ev.ts < prev:
            raise TraceOrderError(f"event {i} at ts={ev.ts:.6f} precedes ts={prev:.6f}")
        prev = ev.ts


def _last_ts(path: Path) -> float:
    last = -math.inf
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("ts="):
                last = float(line[3:line.index(" ")])
    return last


def write_events(path: str | os.PathLike, events: Iterable[ObservationEvent], append: bool = False) -> None:
    """Write ``events`` to ``path`` in trace format.

    The whole batch is checked for timestamp order before anything is written.
    With ``append=True`` the batch must also not precede the file's last event.
    Writers take an exclusive advisory lock on the file where supported.
    """
    events = list(events)
    path = Path(path)
    _check_order(events)
    with open(path, "a" if append else "w", encoding="utf-8", newline="\n") as fh:
        if fcntl is not None:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            if append and events and path.stat().st_size:
                _check_order(events, _last_ts(path))
            for ev in events:
                fh.write(format_event(ev))
                fh.write("\n")
            fh.flush()
        finally:
            if fcntl is not None:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


class TraceWriter:
    """Appends events one at a time to a trace file it holds locked until :meth:`close`."""

    def __init__(self, path: str | os.PathLike, append: bool = False):
        self.path = Path(path)
        self.last_ts = _last_ts(self.path) if append and self.path.exists() else -math.inf
        self._fh = open(self.path, "a" if append else "w", encoding="utf-8", newline="\n")
        if fcntl is not None:
            fcntl.flock(self._fh.fileno(), fcntl.LOCK_EX)
        self.count = 0

    def write(self, event: ObservationEvent) -> None:
        if event.ts < self.last_ts:
            raise TraceOrderError(f"event at ts={event.ts:.6f} precedes ts={self.last_ts:.6f}")
        self._fh.write(format_event(event))
        self._fh.write("\n")
        self._fh.flush()
        self.last_ts = event.ts
        self.count += 1

    def close(self) -> None:
        if self._fh.closed:
            return
        if fcntl is not None:
            fcntl.flock(self._fh.fileno(), fcntl.LOCK_UN)
        self._fh.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_events(
    path: str | os.PathLike,
    strict: bool = False,
    skipped: list[tuple[int, str]] | None = None,
) -> list[ObservationEvent]:
    """Read a trace file.

    In lenient mode (the default) unknown event kinds and malformed lines are
    skipped; each skip is logged and appended to ``skipped`` as
    ``(line number, reason)`` when a list is given. In strict mode any such
    line raises :class:`TraceFormatError` naming the line.
    """
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                events.append(parse_event(line, lineno))
            except _UnknownKind:
                reason = "unknown event kind"
                if strict:
                    raise TraceFormatError(reason, lineno) from None
            except TraceFormatError as exc:
                reason = str(exc)
                if strict:
                    raise
            else:
                continue
            log.warning("skipping trace line %d: %s", lineno, reason)
            if skipped is not None:
                skipped.append((lineno, reason))
    return events


@dataclass(frozen=True)
class Violation:
    line: int
    rule: str
    description: str


@dataclass
class TraceValidationReport:
    event_count: int = 0
    peer_count: int = 0
    session_count: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_trace(events: Iterable[ObservationEvent]) -> TraceValidationReport:
    """Check ordering and session rules; violations are reported, never raised.

    Line numbers are 1-based positions in ``events``.
    """
    report = TraceValidationReport()
    open_sessions: set[PeerKey] = set()
    peers: set[PeerKey] = set()
    prev_ts = -math.inf
    for lineno, ev in enumerate(events, start=1):
        report.event_count += 1
        peers.add(ev.peer)
        if ev.ts < prev_ts:
            report.violations.append(Violation(
                lineno, "ts-order", f"timestamp {ev.ts:.6f} decreases from {prev_ts:.6f}"))
        prev_ts = max(prev_ts, ev.ts)
        if ev.kind is EventKind.CONNECT:
            if ev.peer in open_sessions:
                report.violations.append(Violation(
                    lineno, "nested-session", f"nested session for {ev.peer.endpoint}"))
            else:
                open_sessions.add(ev.peer)
                report.session_count += 1
        elif ev.peer not in open_sessions:
            report.violations.append(Violation(
                lineno, "outside-session",
                f"activity outside session: {ev.kind.value} from {ev.peer.endpoint}"))
        elif ev.kind is EventKind.DISCONNECT:
            open_sessions.discard(ev.peer)
    report.peer_count = len(peers)
    return report


def _peer_filename(identity: str) -> str:
    return "peer_" + re.sub(r"[^A-Za-z0-9._-]", "_", identity) + ".csv"


def export_peer_csv(samples: Iterable[Any], directory: str | os.PathLike) -> set[Path]:
    """Write one CSV per peer identity; returns the written paths.

    Columns are ``window_end, partial``, the numeric features, the categorical
    features (raw tokens), then ``remembrance`` and ``label``. Rows keep the
    chronological order of ``samples``. Output is byte-identical for identical
    input.
    """
    samples = list(samples)
    if not samples:
        return set()
    numeric: dict[str, None] = {}
    categorical: dict[str, None] = {}
    by_peer: dict[str, list[Any]] = {}
    for s in samples:
        numeric.update(dict.fromkeys(s.numeric))
        categorical.update(dict.fromkeys(s.categorical))
        by_peer.setdefault(s.peer, []).append(s)
    header = ["window_end", "partial", *numeric, *categorical, "remembrance", "label"]

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {peer: _peer_filename(peer) for peer in by_peer}
    if len(set(names.values())) != len(names):
        raise ValueError("peer identities collide after filename sanitising")
    written = set()
    for peer in sorted(by_peer):
        path = directory / names[peer]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(header)
            for s in by_peer[peer]:
                writer.writerow([
                    repr(float(s.window_end)),
                    int(bool(getattr(s, "partial", False))),
                    *(repr(float(s.numeric[name])) for name in numeric),
                    *(s.categorical[name] for name in categorical),
                    repr(float(s.remembrance)),
                    repr(float(s.label)),
                ])
        written.add(path)
    return written


def export_score_csv(records: Iterable[Any], directory: str | os.PathLike) -> set[Path]:
    """Write one ``window_end, partial, remembrance, label`` CSV per identity.

    ``records`` are scored windows carrying ``identity``, ``window_end``,
    ``partial``, ``s_prev`` and ``s_curr``. Same layout rules as
    :func:`export_peer_csv`.
    """
    by_peer: dict[str, list[Any]] = {}
    for r in records:
        by_peer.setdefault(r.identity, []).append(r)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {peer: _peer_filename(peer) for peer in by_peer}
    if len(set(names.values())) != len(names):
        raise ValueError("peer identities collide after filename sanitising")
    written = set()
    for peer in sorted(by_peer):
        path = directory / names[peer]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(["window_end", "partial", "remembrance", "label"])
            for r in by_peer[peer]:
                writer.writerow([repr(float(r.window_end)), int(bool(r.partial)),
                                 repr(float(r.s_prev)), repr(float(r.s_curr))])
        written.add(path)
    return written
