"""Synthetic node traces with known ground truth.

A private node keeps at most ``max_concurrent_peers`` sessions open, drawn
from a finite address pool so peers come back under the same address. Blocks
and transactions arrive network-wide as Poisson processes; each is first
delivered by one connected peer chosen in proportion to its quality weight and
then echoed by some of the other connected peers a little later.
"""

from __future__ import annotations

import dataclasses
import heapq
import ipaddress
import math
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .scoring import DecayMode, ScoreConfig
from .trace import Direction, EventKind, ObservationEvent, PeerKey

__all__ = [
    "Scenario",
    "ScenarioError",
    "GroundTruth",
    "simulate",
    "expected_scores",
    "load_scenario",
    "dump_scenario",
]

_COMMANDS = ("inv", "getheaders", "sendcmpct", "sendheaders", "getaddr", "notfound", "getdata",
             "wtxidrelay", "sendaddrv2", "mempool")
_B32 = "abcdefghijklmnopqrstuvwxyz234567"


class ScenarioError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class Scenario:
    duration_s: float = 6 * 3600.0
    start_ts: float = 1_700_000_000.0
    max_concurrent_peers: int = 10
    peer_pool_size: int = 40
    peer_arrival_rate: float = 0.05
    session_median_s: float = 1200.0
    session_sigma: float = 1.0
    short_lived_fraction: float = 0.25
    short_lived_duration_s: float = 0.5
    duration_quality_coupling: float = 0.8
    block_interval_s: float = 600.0
    tx_rate_per_s: float = 5.0
    quality_alpha: float = 1.0
    quality_weights: tuple[float, ...] | None = None
    echo_probability: float = 0.3
    echo_delay_mean_s: float = 0.2
    fee_median_sat: float = 2000.0
    fee_sigma: float = 1.0
    rtt_base_ms: tuple[float, float] = (20.0, 300.0)
    rtt_jitter_ms: float = 10.0
    ping_interval_s: float = 60.0
    proto_ping_interval_s: float = 120.0
    addr_rate_per_s: float = 1 / 300
    feefilter_interval_s: float = 600.0
    msg_rate_per_s: float = 0.05
    inbound_fraction: float = 0.0
    seed: int = 42

    def __post_init__(self):
        positive = ("peer_arrival_rate", "session_median_s", "session_sigma", "short_lived_duration_s",
                    "block_interval_s", "tx_rate_per_s", "quality_alpha", "echo_delay_mean_s",
                    "fee_median_sat", "ping_interval_s", "proto_ping_interval_s", "addr_rate_per_s",
                    "feefilter_interval_s", "msg_rate_per_s")
        for name in positive:
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ScenarioError(name, f"must be positive, got {value!r}")
        for name in ("short_lived_fraction", "duration_quality_coupling", "echo_probability",
                     "inbound_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ScenarioError(name, "must be in [0, 1]")
        if not self.duration_s >= 0:
            raise ScenarioError("duration_s", "must be >= 0")
        if self.max_concurrent_peers < 1:
            raise ScenarioError("max_concurrent_peers", "must be >= 1")
        if self.peer_pool_size < 1:
            raise ScenarioError("peer_pool_size", "must be >= 1")
        if self.fee_sigma < 0 or self.rtt_jitter_ms < 0:
            raise ScenarioError("fee_sigma" if self.fee_sigma < 0 else "rtt_jitter_ms", "must be >= 0")
        lo, hi = self.rtt_base_ms
        if not 0 <= lo <= hi:
            raise ScenarioError("rtt_base_ms", "must be an ordered pair of nonnegative values")
        if self.quality_weights is not None:
            w = self.quality_weights
            if len(w) != self.peer_pool_size or min(w) < 0 or sum(w) <= 0:
                raise ScenarioError("quality_weights",
                                    "need peer_pool_size nonnegative weights with positive sum")

    @property
    def mean_fee_sat(self) -> float:
        return self.fee_median_sat * math.exp(self.fee_sigma ** 2 / 2)


@dataclass
class GroundTruth:
    quality: dict[str, float]
    first_deliverer: dict[str, PeerKey] = field(default_factory=dict)
    peers: dict[str, PeerKey] = field(default_factory=dict)


@dataclass
class _Peer:
    key: PeerKey
    quality: float
    rtt_base: float
    fee_rate: float
    session: int = -1


def _address(rng: np.random.Generator, i: int) -> str:
    u = rng.random()
    if u < 0.7:
        return str(ipaddress.IPv4Address(int(rng.integers(0x0B000000, 0xDF000000))))
    if u < 0.9:
        return str(ipaddress.IPv6Address((0x2001 << 112) | int(rng.integers(1, 2**62)) << 40 | i))
    return "".join(_B32[c] for c in rng.integers(0, 32, size=56)) + ".onion"


def simulate(scenario: Scenario) -> tuple[list[ObservationEvent], GroundTruth]:
    """Generate a trace; same scenario (seed included) gives the same trace."""
    sc = scenario
    streams = np.random.SeedSequence(sc.seed).spawn(4)
    rng_pop, rng_net, rng_chain, rng_peer = (np.random.default_rng(s) for s in streams)

    if sc.quality_weights is not None:
        quality = np.asarray(sc.quality_weights, dtype=float)
        quality = quality / quality.sum()
    else:
        quality = rng_pop.dirichlet(np.full(sc.peer_pool_size, sc.quality_alpha))
    peers: list[_Peer] = []
    used: set[str] = set()
    for i in range(sc.peer_pool_size):
        addr = _address(rng_pop, i)
        while addr in used:
            addr = _address(rng_pop, i)
        used.add(addr)
        inbound = rng_pop.random() < sc.inbound_fraction
        lo, hi = sc.rtt_base_ms
        peers.append(_Peer(
            PeerKey(addr, 8333, Direction.INBOUND if inbound else Direction.OUTBOUND),
            float(quality[i]),
            float(rng_pop.uniform(lo, hi)),
            float(rng_pop.choice([1.0, 1.0, 2.0, 5.0, 10.0])),
        ))
    truth = GroundTruth({p.key.address: p.quality for p in peers},
                        peers={p.key.address: p.key for p in peers})

    t0 = sc.start_ts
    t_end = t0 + sc.duration_s
    heap: list[tuple[float, int, str, tuple]] = []
    seq = 0
    out: list[ObservationEvent] = []
    connected: dict[int, _Peer] = {}  # session id -> peer
    session_keys: dict[int, PeerKey] = {}
    next_session = 0
    height = 800_000

    def push(t: float, action: str, *args):
        nonlocal seq
        if t <= t_end:
            heapq.heappush(heap, (t, seq, action, args))
            seq += 1

    def emit(t: float, key: PeerKey, kind: EventKind, **payload):
        out.append(ObservationEvent(round(t, 6), key, kind, payload))

    def jitter() -> float:
        return float(rng_peer.exponential(sc.rtt_jitter_ms)) if sc.rtt_jitter_ms > 0 else 0.0

    def connect(t: float):
        nonlocal next_session
        if len(connected) >= sc.max_concurrent_peers:
            return
        busy = {p.key.address for p in connected.values()}
        free = [p for p in peers if p.key.address not in busy]
        if not free:
            push(t + rng_net.exponential(1 / sc.peer_arrival_rate), "dial")
            return
        peer = free[int(rng_net.integers(len(free)))]
        sid = next_session
        next_session += 1
        key = peer.key
        if key.direction is Direction.INBOUND:
            key = PeerKey(key.address, int(rng_net.integers(1024, 65536)), Direction.INBOUND)
        peer.session = sid
        connected[sid] = peer
        session_keys[sid] = key
        emit(t, key, EventKind.CONNECT)
        if rng_net.random() < sc.short_lived_fraction:
            length = sc.short_lived_duration_s
        else:
            scale = 1 - sc.duration_quality_coupling + sc.duration_quality_coupling * peer.quality * len(peers)
            length = float(rng_net.lognormal(math.log(sc.session_median_s * scale), sc.session_sigma))
        push(t + length, "disconnect", sid)
        rtt = peer.rtt_base / 1000.0
        push(t + rtt, "handshake", sid)
        push(t + rtt + float(rng_peer.uniform(0, sc.ping_interval_s)), "ping", sid)
        push(t + 2 * rtt + float(rng_peer.uniform(0, sc.proto_ping_interval_s)), "proto_ping", sid)
        push(t + float(rng_peer.exponential(1 / sc.addr_rate_per_s)), "addr", sid)
        push(t + float(rng_peer.exponential(1 / sc.msg_rate_per_s)), "msg", sid)

    def active(sid: int) -> _Peer | None:
        peer = connected.get(sid)
        return peer if peer is not None and peer.session == sid else None

    def deliver(t: float, kind: EventKind, item: str, payload: dict):
        sids = sorted(connected)
        if not sids:
            return
        w = np.array([connected[s].quality for s in sids])
        w = w / w.sum() if w.sum() > 0 else np.full(len(sids), 1 / len(sids))
        first = sids[int(rng_chain.choice(len(sids), p=w))]
        truth.first_deliverer[item] = session_keys[first]
        emit(t, session_keys[first], kind, **payload)
        for s in sids:
            if s != first and rng_chain.random() < sc.echo_probability:
                push(t + float(rng_chain.exponential(sc.echo_delay_mean_s)), "echo", s, kind, payload)

    for _ in range(min(sc.max_concurrent_peers, len(peers))):
        connect(t0)
    push(t0 + float(rng_chain.exponential(sc.block_interval_s)), "block")
    push(t0 + float(rng_chain.exponential(1 / sc.tx_rate_per_s)), "tx")

    while heap:
        t, _, action, args = heapq.heappop(heap)
        if action == "block":
            height += 1
            h = rng_chain.bytes(32).hex()
            deliver(t, EventKind.BLOCK, h, {"hash": h, "height": height})
            for s in sorted(connected):
                push(t + float(rng_chain.exponential(1.0)), "headers", s, height)
            push(t + float(rng_chain.exponential(sc.block_interval_s)), "block")
        elif action == "tx":
            h = rng_chain.bytes(32).hex()
            fee = int(round(rng_chain.lognormal(math.log(sc.fee_median_sat), sc.fee_sigma)))
            size = int(rng_chain.integers(150, 800))
            deliver(t, EventKind.TX, h, {"hash": h, "fee": fee, "size": size})
            push(t + float(rng_chain.exponential(1 / sc.tx_rate_per_s)), "tx")
        elif action == "dial":
            connect(t)
        else:
            sid = args[0]
            peer = active(sid)
            if peer is None:
                continue
            key = session_keys[sid]
            if action == "disconnect":
                emit(t, key, EventKind.DISCONNECT)
                del connected[sid]
                push(t + float(rng_net.exponential(1 / sc.peer_arrival_rate)), "dial")
            elif action == "echo":
                emit(t, key, args[1], **args[2])
            elif action == "headers":
                emit(t, key, EventKind.HEADERS_HEIGHT, height=args[1])
            elif action == "handshake":
                emit(t, key, EventKind.BLOCK_HEIGHT, height=height - int(rng_peer.integers(0, 3)))
                emit(t, key, EventKind.HEADERS_HEIGHT, height=height)
                emit(t, key, EventKind.FEEFILTER, min_fee_rate=peer.fee_rate)
                push(t + float(rng_peer.exponential(sc.feefilter_interval_s)), "feefilter", sid)
            elif action == "ping":
                emit(t, key, EventKind.PING_RTT, rtt_ms=round(peer.rtt_base + jitter(), 3))
                push(t + sc.ping_interval_s, "ping", sid)
            elif action == "proto_ping":
                emit(t, key, EventKind.PROTO_PING_RTT, rtt_ms=round(peer.rtt_base * 1.1 + jitter(), 3))
                push(t + sc.proto_ping_interval_s, "proto_ping", sid)
            elif action == "addr":
                emit(t, key, EventKind.ADDR, count=int(rng_peer.integers(1, 1001)))
                push(t + float(rng_peer.exponential(1 / sc.addr_rate_per_s)), "addr", sid)
            elif action == "feefilter":
                peer.fee_rate = float(rng_peer.choice([1.0, 1.0, 2.0, 5.0, 10.0]))
                emit(t, key, EventKind.FEEFILTER, min_fee_rate=peer.fee_rate)
                push(t + float(rng_peer.exponential(sc.feefilter_interval_s)), "feefilter", sid)
            elif action == "msg":
                emit(t, key, EventKind.MSG, command=_COMMANDS[int(rng_peer.integers(len(_COMMANDS)))])
                push(t + float(rng_peer.exponential(1 / sc.msg_rate_per_s)), "msg", sid)

    for sid in sorted(connected):
        emit(t_end, session_keys[sid], EventKind.DISCONNECT)
    return out, truth


def expected_scores(
    ground_truth: GroundTruth | dict[str, float],
    scenario: Scenario,
    config: ScoreConfig,
    n_windows: int | None = None,
) -> dict[str, np.ndarray]:
    """Expected score after each window for a peer connected throughout.

    A peer of quality ``q`` is expected to first-deliver ``q * w / block_interval``
    blocks and ``q * tx_rate * w`` transactions of mean fee per window ``w``.
    """
    if config.decay_mode is not DecayMode.INCREMENT:
        raise ValueError("expected_scores is defined for increment mode only")
    quality = ground_truth.quality if isinstance(ground_truth, GroundTruth) else ground_truth
    w = config.window_seconds
    if n_windows is None:
        n_windows = int(scenario.duration_s // w)
    k = np.arange(1, n_windows + 1, dtype=float)
    out = {}
    for peer, q in quality.items():
        blocks = q * w / scenario.block_interval_s
        fees = q * scenario.tx_rate_per_s * w * scenario.mean_fee_sat / config.fee_scale
        out[peer] = k * config.gamma * (config.w_block * blocks + config.w_tx * fees)
    return out


_TUPLE_FIELDS = {"quality_weights", "rtt_base_ms"}


def _coerce(f: dataclasses.Field, raw: str) -> Any:
    name = f.name
    try:
        if name in _TUPLE_FIELDS:
            if raw.lower() in ("none", ""):
                return None
            return tuple(float(v) for v in raw.replace(",", " ").split())
        default = f.default
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ScenarioError(name, f"cannot parse value {raw!r}") from None


def load_scenario(path: str | os.PathLike, **overrides) -> Scenario:
    """Read a ``key = value`` scenario file (``#`` starts a comment).

    Unknown keys and unparsable values raise :class:`ScenarioError` naming the
    field. ``overrides`` replace file values.
    """
    fields = {f.name: f for f in dataclasses.fields(Scenario)}
    values: dict[str, Any] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep:
                raise ScenarioError(key or f"line {lineno}", "expected 'key = value'")
            if key not in fields:
                raise ScenarioError(key, "unknown scenario field")
            values[key] = _coerce(fields[key], raw.strip())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return Scenario(**values)


def dump_scenario(scenario: Scenario) -> str:
    lines = []
    for f in dataclasses.fields(Scenario):
        value = getattr(scenario, f.name)
        if value is None:
            text = "none"
        elif isinstance(value, tuple):
            text = " ".join(repr(float(v)) for v in value)
        else:
            text = repr(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
