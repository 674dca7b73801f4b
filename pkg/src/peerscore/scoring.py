"""Beneficialness scoring with a node-global novelty ledger and remembrance.

Per peer and per measurement window the engine counts novel blocks (``f_block``)
and sums novel transaction fees (``f_fee``, satoshi divided by ``fee_scale``).
Closing a window applies::

    increment mode:  s_t = s_prev + gamma * (w_block * f_block + w_tx * f_fee)
    prior mode:      s_t = gamma * s_prev + (w_block * f_block + w_tx * f_fee)

with ``w_tx = 1 - w_block``. Only the first delivery of a hash anywhere on the
node credits a peer. Scores are checkpointed per remembrance identity and a
reconnecting identity resumes from its last score.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .trace import EventKind, ObservationEvent, PeerKey

__all__ = [
    "DecayMode",
    "IdentityMode",
    "ScoreConfig",
    "FEE_SCALE_PRESET",
    "WindowMeasurement",
    "ScoreState",
    "NoveltyLedger",
    "RemembranceStore",
    "ScoreEngine",
    "SessionError",
    "ConfigError",
    "WindowRecord",
    "new_engine",
    "iter_scored",
    "score_trace",
]

#: Documented fee normalisation preset: fees counted in units of 10^4 satoshi.
FEE_SCALE_PRESET = 1e4


class ConfigError(ValueError):
    pass


class SessionError(RuntimeError):
    """An event or window refers to a peer without an open session."""


class DecayMode(str, enum.Enum):
    INCREMENT = "increment"
    PRIOR = "prior"


class IdentityMode(str, enum.Enum):
    ADDRESS_ONLY = "address_only"
    ADDRESS_AND_PORT = "address_and_port"


@dataclass(frozen=True)
class ScoreConfig:
    gamma: float = 1.0
    w_block: float = 0.5
    fee_scale: float = 1.0
    window_seconds: float = 1.0
    decay_mode: DecayMode = DecayMode.INCREMENT
    identity_mode: IdentityMode = IdentityMode.ADDRESS_ONLY

    def __post_init__(self):
        object.__setattr__(self, "decay_mode", DecayMode(self.decay_mode))
        object.__setattr__(self, "identity_mode", IdentityMode(self.identity_mode))
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma out of range [0, 1]: {self.gamma}")
        if not 0.0 <= self.w_block <= 1.0:
            raise ConfigError(f"w_block out of range [0, 1]: {self.w_block}")
        if not (self.fee_scale > 0 and math.isfinite(self.fee_scale)):
            raise ConfigError(f"fee_scale must be positive: {self.fee_scale}")
        if not (self.window_seconds > 0 and math.isfinite(self.window_seconds)):
            raise ConfigError(f"window_seconds must be positive: {self.window_seconds}")

    @property
    def w_tx(self) -> float:
        return 1.0 - self.w_block

    def identity(self, peer: PeerKey) -> str:
        return peer.identity(self.identity_mode.value)

    def update(self, s_prev: float, f_block: float, f_fee: float) -> float:
        """One application of the score recurrence."""
        gain = self.w_block * f_block + self.w_tx * f_fee
        if self.decay_mode is DecayMode.INCREMENT:
            return s_prev + self.gamma * gain
        return self.gamma * s_prev + gain


@dataclass(frozen=True)
class WindowMeasurement:
    f_block: int
    f_fee: float
    window_start: float
    window_end: float


@dataclass(frozen=True)
class ScoreState:
    peer: str
    s_prev: float
    s_curr: float
    last_update: float


@dataclass
class NoveltyLedger:
    """Node-global, insert-only record of hashes already received."""

    seen_blocks: set[str] = field(default_factory=set)
    seen_txs: set[str] = field(default_factory=set)

    def admit_block(self, block_hash: str) -> bool:
        if block_hash in self.seen_blocks:
            return False
        self.seen_blocks.add(block_hash)
        return True

    def admit_tx(self, tx_hash: str) -> bool:
        if tx_hash in self.seen_txs:
            return False
        self.seen_txs.add(tx_hash)
        return True


class RemembranceStore(dict):
    """Map from remembrance identity to the identity's last :class:`ScoreState`.

    Entries never expire within a run.
    """

    def score(self, identity: str) -> float:
        state = self.get(identity)
        return 0.0 if state is None else state.s_curr


@dataclass
class _Session:
    identity: str
    start: float
    seq: int
    s: float
    last_update: float
    window_start: float
    windows_closed: int = 0
    f_block: int = 0
    f_fee: float = 0.0

    def next_end(self, window_seconds: float) -> float:
        return self.start + (self.windows_closed + 1) * window_seconds


class ScoreEngine:
    """Incremental scorer; events must be applied in timestamp order.

    ``remembrance_lookup`` only reads immutable :class:`ScoreState` objects from
    the store and may be called from other threads while events are applied.
    """

    def __init__(self, config: ScoreConfig):
        if not isinstance(config, ScoreConfig):
            raise ConfigError("config must be a ScoreConfig")
        self.config = config
        self.ledger = NoveltyLedger()
        self.store = RemembranceStore()
        self.sessions: dict[PeerKey, _Session] = {}
        self._seq = 0

    @property
    def peer_count(self) -> int:
        return len(self.sessions)

    def _session(self, peer: PeerKey) -> _Session:
        try:
            return self.sessions[peer]
        except KeyError:
            raise SessionError(f"no open session for {peer.endpoint}") from None

    def observe(self, event: ObservationEvent) -> None:
        kind = event.kind
        peer = event.peer
        if kind is EventKind.CONNECT:
            if peer in self.sessions:
                raise SessionError(f"session already open for {peer.endpoint}")
            identity = self.config.identity(peer)
            self.sessions[peer] = _Session(
                identity=identity, start=event.ts, seq=self._seq,
                s=self.store.score(identity), last_update=event.ts,
                window_start=event.ts)
            self._seq += 1
            return
        sess = self._session(peer)
        if kind is EventKind.BLOCK:
            if self.ledger.admit_block(event.payload["hash"]):
                sess.f_block += 1
        elif kind is EventKind.TX:
            if self.ledger.admit_tx(event.payload["hash"]):
                sess.f_fee += event.payload["fee"] / self.config.fee_scale
        elif kind is EventKind.DISCONNECT:
            # Measurements not yet folded in by close_window are dropped here.
            self.store[sess.identity] = ScoreState(sess.identity, sess.s, sess.s, sess.last_update)
            del self.sessions[peer]

    def close_window(self, peer: PeerKey, t: float) -> tuple[ScoreState, WindowMeasurement]:
        sess = self._session(peer)
        if t < sess.last_update:
            raise SessionError(f"window end {t} precedes last update {sess.last_update}")
        measurement = WindowMeasurement(sess.f_block, sess.f_fee, sess.window_start, t)
        s_new = self.config.update(sess.s, sess.f_block, sess.f_fee)
        state = ScoreState(sess.identity, sess.s, s_new, t)
        sess.s = s_new
        sess.last_update = t
        sess.window_start = t
        sess.windows_closed += 1
        sess.f_block = 0
        sess.f_fee = 0.0
        self.store[sess.identity] = state
        return state, measurement

    def remembrance_lookup(self, identity: str) -> float:
        return self.store.score(identity)


def new_engine(config: ScoreConfig | None = None) -> ScoreEngine:
    return ScoreEngine(config if config is not None else ScoreConfig())


@dataclass(frozen=True)
class WindowRecord:
    """One closed window: the skeleton of a measurement sample."""

    peer: PeerKey
    identity: str
    window_start: float
    window_end: float
    partial: bool
    f_block: int
    f_fee: float
    s_prev: float
    s_curr: float


def iter_scored(
    events: Iterable[ObservationEvent],
    config: ScoreConfig,
    end_ts: float | None = None,
    engine: ScoreEngine | None = None,
) -> Iterator[ObservationEvent | WindowRecord]:
    """Drive an engine over ``events``, yielding events and closed windows.

    Windows of a session are ``[start + (k-1)w, start + kw)``; a window closes
    as soon as an event at or past its end is seen, before that event is
    applied. The last window of a session ends at its DISCONNECT, is flagged
    partial when short, and is closed on the right: it also holds the
    session's events stamped at that instant, so the set of windows depends
    only on session timing. Events are read one timestamp group ahead for
    this. A DISCONNECT does not close windows of other peers ending at its
    instant.
    After the last event, windows ending at or before ``end_ts`` (default: the
    last event's timestamp) are closed; open partial windows are not emitted.

    The stream interleaves each applied event with the windows it closed, in
    processing order, so consumers can snapshot per-window state.
    """
    engine = engine if engine is not None else ScoreEngine(config)
    w = config.window_seconds
    heap: list[tuple[float, int, PeerKey]] = []

    def close(peer: PeerKey, sess: _Session, end: float, partial: bool) -> WindowRecord:
        state, m = engine.close_window(peer, end)
        return WindowRecord(peer, sess.identity, m.window_start, end, partial,
                            m.f_block, m.f_fee, state.s_prev, state.s_curr)

    def advance(t: float, inclusive: bool, ending: set[int] = frozenset()) -> Iterator[WindowRecord]:
        held = []
        while heap and (heap[0][0] < t or (inclusive and heap[0][0] == t)):
            end, seq, peer = heapq.heappop(heap)
            sess = engine.sessions.get(peer)
            if sess is None or sess.seq != seq:
                continue
            if end == t and seq in ending:
                held.append((end, seq, peer))  # closed by its own DISCONNECT
                continue
            yield close(peer, sess, end, False)
            heapq.heappush(heap, (sess.next_end(w), seq, peer))
        for item in held:
            heapq.heappush(heap, item)

    last_ts = None
    for ts, group in itertools.groupby(events, key=lambda e: e.ts):
        group = list(group)
        last_ts = ts
        ending = {engine.sessions[e.peer].seq for e in group
                  if e.kind is EventKind.DISCONNECT and e.peer in engine.sessions}
        for ev in group:
            if ev.kind is EventKind.DISCONNECT:
                yield from advance(ts, inclusive=False)
                sess = engine._session(ev.peer)
                yield close(ev.peer, sess, ts, sess.next_end(w) > ts)
                engine.observe(ev)
                yield ev
                continue
            yield from advance(ts, inclusive=True, ending=ending)
            engine.observe(ev)
            if ev.kind is EventKind.CONNECT:
                sess = engine.sessions[ev.peer]
                heapq.heappush(heap, (sess.next_end(w), sess.seq, ev.peer))
            yield ev
    if end_ts is None:
        end_ts = last_ts
    if end_ts is not None:
        yield from advance(end_ts, inclusive=True)


def score_trace(
    events: Sequence[ObservationEvent],
    config: ScoreConfig,
    end_ts: float | None = None,
) -> list[WindowRecord]:
    """Score a whole trace; returns closed windows in close order."""
    return [r for r in iter_scored(events, config, end_ts) if isinstance(r, WindowRecord)]
