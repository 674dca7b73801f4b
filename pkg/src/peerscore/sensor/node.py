"""Listen-only outbound collector that writes what peers send to a trace file.

Each peer session runs in its own task and pushes observations onto one
queue; a single writer task stamps them with the receipt time and appends
them to the trace, so timestamps are non-decreasing across peers while each
peer's events keep their order.
"""

from __future__ import annotations

import asyncio
import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from ..trace import Direction, EventKind, ObservationEvent, PeerKey, TraceWriter, _TOKEN
from . import wire

log = logging.getLogger(__name__)

MAX_OUTBOUND_LIMIT = 10


class SensorConfigError(ValueError):
    pass


@dataclass
class SensorConfig:
    seeds: list[str]
    output: Path
    max_outbound: int = MAX_OUTBOUND_LIMIT
    user_agent: str = "/peerscore:0.1.0/"
    protocol_version: int = wire.PROTOCOL_VERSION
    handshake_timeout_s: float = 10.0
    connect_timeout_s: float = 10.0
    ping_interval_s: float = 60.0
    redial_delay_s: float = 5.0
    duration_s: float | None = None
    magic: bytes = wire.MAINNET_MAGIC

    def validate(self) -> None:
        if not self.seeds:
            raise SensorConfigError("at least one seed address is required")
        if not 1 <= self.max_outbound <= MAX_OUTBOUND_LIMIT:
            raise SensorConfigError(f"max_outbound must be in [1, {MAX_OUTBOUND_LIMIT}]")
        for name in ("handshake_timeout_s", "connect_timeout_s", "ping_interval_s"):
            if not getattr(self, name) > 0:
                raise SensorConfigError(f"{name} must be > 0")
        if self.redial_delay_s < 0:
            raise SensorConfigError("redial_delay_s must be >= 0")
        if self.duration_s is not None and not self.duration_s > 0:
            raise SensorConfigError("duration_s must be > 0")
        for seed in self.seeds:
            PeerKey.parse(seed)


@dataclass
class SensorStats:
    dials: int = 0
    suppressed: int = 0
    sessions: int = 0
    events: int = 0
    peak_sessions: int = 0
    disconnect_reasons: dict[str, int] = field(default_factory=dict)


class _Disconnect(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class Sensor:
    """Outbound session manager. Use :meth:`run`, or drive :meth:`dial` directly in tests."""

    def __init__(self, config: SensorConfig, clock: Callable[[], float] = time.time):
        config.validate()
        self.config = config
        self.clock = clock
        self.stats = SensorStats()
        self.active: dict[str, asyncio.Task] = {}
        self.queue: asyncio.Queue = asyncio.Queue()
        self._rng = random.Random()
        self._stopping = False

    @property
    def open_sessions(self) -> int:
        return len(self.active)

    def dial(self, endpoint: str) -> bool:
        """Start a session to ``endpoint`` unless all outbound slots are taken."""
        if self._stopping:
            return False
        if len(self.active) >= self.config.max_outbound or endpoint in self.active:
            self.stats.suppressed += 1
            log.info("dial to %s suppressed: %d sessions open", endpoint, len(self.active))
            return False
        self.stats.dials += 1
        self.active[endpoint] = asyncio.get_running_loop().create_task(self._session(endpoint))
        self.stats.peak_sessions = max(self.stats.peak_sessions, len(self.active))
        return True

    def _emit(self, peer: PeerKey, kind: EventKind, **payload: Any) -> None:
        self.queue.put_nowait((peer, kind, payload))

    async def _writer(self, out: TraceWriter) -> None:
        while True:
            item = await self.queue.get()
            try:
                if item is None:
                    return
                peer, kind, payload = item
                ts = max(round(self.clock(), 6), out.last_ts)
                out.write(ObservationEvent(ts, peer, kind, payload))
                self.stats.events += 1
            except Exception:
                log.exception("dropping unwritable event %r", item)
            finally:
                self.queue.task_done()

    async def _session(self, endpoint: str) -> None:
        cfg = self.config
        target = PeerKey.parse(endpoint, Direction.OUTBOUND)
        writer = None
        peer = None
        reason = "closed"
        try:
            host = wire.resolve_host(target.address)
            started = time.perf_counter()
            reader, writer = await asyncio.wait_for(
                asyncio.open_connection(host, target.port), cfg.connect_timeout_s)
            connect_ms = (time.perf_counter() - started) * 1000.0
            peer = PeerKey(host, target.port, Direction.OUTBOUND)
            self.stats.sessions += 1
            self._emit(peer, EventKind.CONNECT)
            self._emit(peer, EventKind.PING_RTT, rtt_ms=connect_ms)
            await _PeerSession(self, peer, reader, writer).run()
        except _Disconnect as exc:
            reason = exc.reason
        except asyncio.CancelledError:
            reason = "shutdown"
        except (OSError, asyncio.TimeoutError) as exc:
            reason = "connect_failed" if peer is None else "io_error"
            log.info("session %s ended: %s", endpoint, exc)
        except Exception:
            reason = "internal_error"
            log.exception("session %s failed", endpoint)
        finally:
            if writer is not None:
                writer.close()
            if peer is not None:
                self._emit(peer, EventKind.DISCONNECT, reason=reason)
            self.stats.disconnect_reasons[reason] = self.stats.disconnect_reasons.get(reason, 0) + 1
            self.active.pop(endpoint, None)
            if not self._stopping:
                asyncio.get_running_loop().call_later(cfg.redial_delay_s, self._redial, endpoint)

    def _redial(self, previous: str) -> None:
        if self._stopping:
            return
        idle = [s for s in self.config.seeds if s not in self.active]
        if not idle:
            return
        others = [s for s in idle if s != previous]
        self.dial(self._rng.choice(others) if others else previous)

    async def run(self, stop: asyncio.Event | None = None) -> SensorStats:
        """Collect until ``stop`` is set or ``duration_s`` elapses."""
        stop = stop or asyncio.Event()
        out = TraceWriter(self.config.output)
        writer_task = asyncio.create_task(self._writer(out))
        try:
            for seed in self.config.seeds[:self.config.max_outbound]:
                self.dial(seed)
            try:
                await asyncio.wait_for(stop.wait(), self.config.duration_s)
            except asyncio.TimeoutError:
                pass
        finally:
            self._stopping = True
            tasks = list(self.active.values())
            for task in tasks:
                task.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            self.queue.put_nowait(None)
            await writer_task
            out.close()
        return self.stats


class _PeerSession:
    def __init__(self, sensor: Sensor, peer: PeerKey, reader, writer):
        self.sensor = sensor
        self.cfg = sensor.config
        self.peer = peer
        self.reader = reader
        self.writer = writer
        self.decoder = wire.FrameDecoder(self.cfg.magic)
        self.pending: list[wire.WireMessage] = []
        self.pings: dict[int, float] = {}
        self.height: int | None = None

    def emit(self, kind: EventKind, **payload: Any) -> None:
        self.sensor._emit(self.peer, kind, **payload)

    async def send(self, command: str, payload: bytes = b"") -> None:
        self.writer.write(wire.encode_message(command, payload, self.cfg.magic))
        await self.writer.drain()

    async def recv(self) -> wire.WireMessage:
        while not self.pending:
            data = await self.reader.read(65536)
            if not data:
                raise _Disconnect("eof")
            self.pending.extend(self.decoder.feed(data))
        return self.pending.pop(0)

    async def handshake(self) -> None:
        nonce = random.getrandbits(64)
        await self.send("version", wire.version_payload(
            self.peer.address, self.peer.port, nonce, self.cfg.user_agent,
            version=self.cfg.protocol_version))
        got_version = got_verack = False
        while not (got_version and got_verack):
            msg = await self.recv()
            if msg.command == "version":
                info = wire.parse_version(msg.payload)
                got_version = True
                self.height = max(info.start_height, 0)
                self.emit(EventKind.BLOCK_HEIGHT, height=self.height)
                await self.send("verack")
            elif msg.command == "verack":
                got_verack = True

    async def run(self) -> None:
        try:
            await asyncio.wait_for(self.handshake(), self.cfg.handshake_timeout_s)
        except asyncio.TimeoutError:
            raise _Disconnect("handshake_timeout") from None
        except wire.PayloadError:
            raise _Disconnect("bad_version") from None
        pinger = asyncio.create_task(self._ping_loop())
        try:
            while True:
                msg = await self.recv()
                try:
                    await self.handle(msg)
                except wire.PayloadError as exc:
                    log.info("%s sent malformed %s: %s", self.peer.endpoint, msg.command, exc)
        finally:
            pinger.cancel()

    async def _ping_loop(self) -> None:
        while True:
            nonce = random.getrandbits(64)
            self.pings[nonce] = time.perf_counter()
            await self.send("ping", wire.ping_payload(nonce))
            await asyncio.sleep(self.cfg.ping_interval_s)

    async def handle(self, msg: wire.WireMessage) -> None:
        cmd = msg.command
        if cmd == "ping":
            await self.send("pong", msg.payload[:8])
        elif cmd == "pong":
            sent = self.pings.pop(wire.parse_nonce(msg.payload), None)
            if sent is not None:
                self.emit(EventKind.PROTO_PING_RTT, rtt_ms=(time.perf_counter() - sent) * 1000.0)
        elif cmd == "inv":
            for kind, digest in wire.parse_inv(msg.payload):
                if kind == wire.MSG_BLOCK:
                    self.emit(EventKind.BLOCK, hash=digest, height=0, height_unknown=True)
                elif kind == wire.MSG_TX:
                    self.emit(EventKind.TX, hash=digest, fee=0, size=1, fee_unknown=True)
        elif cmd in ("addr", "addrv2"):
            self.emit(EventKind.ADDR, count=wire.parse_count(msg.payload))
        elif cmd == "headers":
            n = wire.parse_count(msg.payload)
            if n:
                self.height = (self.height or 0) + n
                self.emit(EventKind.HEADERS_HEIGHT, height=self.height)
        elif cmd == "feefilter":
            self.emit(EventKind.FEEFILTER, min_fee_rate=wire.parse_feefilter(msg.payload) / 1000.0)
        elif _TOKEN.fullmatch(cmd):
            self.emit(EventKind.MSG, command=cmd)


def run_sensor(config: SensorConfig) -> SensorStats:
    """Run the collector until ``duration_s`` elapses (or forever) and return its statistics."""
    return asyncio.run(Sensor(config).run())
