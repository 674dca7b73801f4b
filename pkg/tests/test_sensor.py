import asyncio

import pytest

from peerscore.sensor import Sensor, SensorConfig, SensorConfigError, wire
from peerscore.trace import EventKind, read_events, validate_trace

BLOCK = "00" * 4 + "ab" * 28
TX = "cd" * 32


class FakePeer:
    """A scripted local peer. ``mode`` is "chatty", "silent" or "hangup"."""

    def __init__(self, mode: str = "chatty"):
        self.mode = mode
        self.received: list[tuple[str, bytes]] = []
        self.server = None

    async def start(self) -> str:
        self.server = await asyncio.start_server(self._handle, "127.0.0.1", 0)
        return f"127.0.0.1:{self.server.sockets[0].getsockname()[1]}"

    async def stop(self):
        self.server.close()
        await self.server.wait_closed()

    async def _handle(self, reader, writer):
        try:
            if self.mode == "hangup":
                return
            if self.mode == "silent":
                await reader.read()
                return
            decoder = wire.FrameDecoder()

            async def expect(command):
                while True:
                    for m in decoder.feed(await reader.read(4096)):
                        self.received.append((m.command, m.payload))
                        if m.command == command:
                            return m

            def send(command, payload=b""):
                writer.write(wire.encode_message(command, payload))

            await expect("version")
            send("version", wire.version_payload("127.0.0.1", 1, 1, "/fake/", start_height=800_000))
            send("verack")
            await expect("verack")
            ping = await expect("ping")
            send("pong", ping.payload)
            send("inv", wire.inv_payload([(wire.MSG_BLOCK, BLOCK), (wire.MSG_TX | wire.MSG_WITNESS_FLAG, TX)]))
            send("addr", wire.pack_varint(3) + b"\0" * 30 * 3)
            send("headers", wire.pack_varint(2) + b"\0" * 81 * 2)
            send("feefilter", (1500).to_bytes(8, "little"))
            send("sendcmpct", b"\0" * 9)
            send("ping", wire.ping_payload(77))
            await writer.drain()
            await expect("pong")
        finally:
            writer.close()


def run(coro):
    return asyncio.run(asyncio.wait_for(coro, 20))


def config(tmp_path, seeds, **kw):
    kw.setdefault("duration_s", 1.0)
    return SensorConfig(seeds=seeds, output=tmp_path / "live.trace", **kw)


def test_config_validation(tmp_path):
    with pytest.raises(SensorConfigError):
        config(tmp_path, []).validate()
    with pytest.raises(SensorConfigError):
        config(tmp_path, ["1.2.3.4:8333"], max_outbound=11).validate()
    with pytest.raises(SensorConfigError):
        config(tmp_path, ["1.2.3.4:8333"], handshake_timeout_s=0).validate()


def test_session_events(tmp_path):
    async def main():
        peer = FakePeer()
        ep = await peer.start()
        stats = await Sensor(config(tmp_path, [ep], redial_delay_s=30.0)).run()
        await peer.stop()
        return peer, stats

    peer, stats = run(main())
    events = read_events(tmp_path / "live.trace", strict=True)
    assert validate_trace(events).ok
    kinds = [e.kind for e in events]
    assert kinds[0] is EventKind.CONNECT and kinds[-1] is EventKind.DISCONNECT
    by = {e.kind: e for e in events}
    assert by[EventKind.BLOCK_HEIGHT].payload["height"] == 800_000
    assert by[EventKind.BLOCK].payload == {"hash": BLOCK, "height": 0, "height_unknown": True}
    assert by[EventKind.TX].payload == {"hash": TX, "fee": 0, "size": 1, "fee_unknown": True}
    assert by[EventKind.ADDR].payload == {"count": 3}
    assert by[EventKind.HEADERS_HEIGHT].payload == {"height": 800_002}
    assert by[EventKind.FEEFILTER].payload == {"min_fee_rate": 1.5}
    assert by[EventKind.MSG].payload == {"command": "sendcmpct"}
    assert by[EventKind.PROTO_PING_RTT].payload["rtt_ms"] >= 0
    assert by[EventKind.PING_RTT].payload["rtt_ms"] >= 0
    assert by[EventKind.DISCONNECT].payload == {"reason": "eof"}
    assert ("pong", wire.ping_payload(77)) in peer.received
    version = next(p for c, p in peer.received if c == "version")
    info = wire.parse_version(version)
    assert (info.version, info.services) == (70016, 0)
    assert stats.sessions == 1


def test_handshake_timeout_and_redial(tmp_path):
    async def main():
        peer = FakePeer("silent")
        ep = await peer.start()
        cfg = config(tmp_path, [ep], handshake_timeout_s=0.15, redial_delay_s=0.05, duration_s=0.8)
        stats = await Sensor(cfg).run()
        await peer.stop()
        return stats

    stats = run(main())
    assert stats.disconnect_reasons["handshake_timeout"] >= 2
    assert stats.dials >= 2
    events = read_events(tmp_path / "live.trace")
    assert validate_trace(events).ok
    assert any(e.kind is EventKind.DISCONNECT and e.payload.get("reason") == "handshake_timeout" for e in events)


def test_eleventh_dial_suppressed(tmp_path):
    async def main():
        peers = [FakePeer("silent") for _ in range(11)]
        eps = [await p.start() for p in peers]
        sensor = Sensor(config(tmp_path, eps, redial_delay_s=30.0))
        results = [sensor.dial(ep) for ep in eps]
        open_now = sensor.open_sessions
        sensor._stopping = True
        for t in list(sensor.active.values()):
            t.cancel()
        await asyncio.gather(*sensor.active.values(), return_exceptions=True)
        for p in peers:
            await p.stop()
        return results, open_now, sensor.stats

    results, open_now, stats = run(main())
    assert results == [True] * 10 + [False]
    assert open_now == 10 and stats.suppressed == 1


def test_never_exceeds_max_outbound_under_churn(tmp_path):
    async def main():
        peers = [FakePeer("hangup") for _ in range(6)]
        eps = [await p.start() for p in peers]
        stats = await Sensor(config(tmp_path, eps, max_outbound=3, redial_delay_s=0.01, duration_s=0.8)).run()
        for p in peers:
            await p.stop()
        return stats

    stats = run(main())
    assert stats.peak_sessions <= 3
    assert stats.dials > 6
    assert validate_trace(read_events(tmp_path / "live.trace")).ok
