"""Per-window behavioural features, one-hot encoding and MI feature ranking."""

from __future__ import annotations

import hashlib
import ipaddress
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .scoring import ScoreConfig, WindowRecord, iter_scored
from .trace import EventKind, ObservationEvent, PeerKey

__all__ = [
    "MISSING",
    "TOP_FEATURES",
    "MeasurementSample",
    "FeatureSchema",
    "Dataset",
    "MIRanking",
    "SchemaMismatch",
    "extract_windows",
    "fit_encoder",
    "encode",
    "quantile_codes",
    "mutual_information",
    "mutual_information_codes",
    "select_top_k",
]

#: Value used for a numeric signal that has not been observed yet.
MISSING = -1.0

#: The ten behavioural features every sample carries.
TOP_FEATURES = (
    "connection_count",
    "timestamp",
    "proto_ping_rtt_ms",
    "header_height_offset",
    "ping_rtt_ms",
    "connection_duration_s",
    "addr_accepted_count",
    "block_height_offset",
    "time_since_last_tx_ms",
    "min_fee_rate",
)

_COUNTED_KINDS = tuple(k for k in EventKind if k not in (EventKind.CONNECT, EventKind.DISCONNECT))
COUNT_FEATURES = tuple(f"count_{k.value.lower()}" for k in _COUNTED_KINDS)
NOVELTY_FEATURES = ("novel_block_count", "novel_fee")
THROUGHPUT_FEATURES = ("bytes_received", "window_bytes_received")
NUMERIC_FEATURES = TOP_FEATURES + COUNT_FEATURES + NOVELTY_FEATURES + THROUGHPUT_FEATURES
CATEGORICAL_FEATURES = ("direction", "last_msg_command", "address_family")

# Wire command implied by each event kind, for last_msg_command.
_KIND_COMMAND = {
    EventKind.BLOCK: "block",
    EventKind.TX: "tx",
    EventKind.ADDR: "addr",
    EventKind.HEADERS_HEIGHT: "headers",
    EventKind.BLOCK_HEIGHT: "version",
    EventKind.FEEFILTER: "feefilter",
    EventKind.PROTO_PING_RTT: "pong",
}


class SchemaMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MeasurementSample:
    peer: str
    window_end: float
    numeric: Mapping[str, float]
    categorical: Mapping[str, str]
    remembrance: float
    label: float
    partial: bool = False


def address_family(address: str) -> str:
    if address.endswith(".onion"):
        return "onion"
    if address.endswith(".i2p"):
        return "i2p"
    try:
        ip = ipaddress.ip_address(address)
    except ValueError:
        return "other"
    if ip.version == 4:
        return "ipv4"
    if ip in ipaddress.ip_network("fc00::/8"):
        return "cjdns"
    return "ipv6"


@dataclass
class _PeerFeatures:
    connect_ts: float
    direction: str
    family: str
    ping_rtt: float = MISSING
    proto_ping_rtt: float = MISSING
    headers_height: float | None = None
    block_height: float | None = None
    addr_total: int = 0
    last_tx_ts: float | None = None
    min_fee_rate: float = MISSING
    last_command: str = "none"
    bytes_total: int = 0
    bytes_window: int = 0
    counts: dict[str, int] = field(default_factory=lambda: dict.fromkeys(COUNT_FEATURES, 0))


def extract_windows(
    events: Iterable[ObservationEvent],
    config: ScoreConfig,
    exclude: Sequence[str] = (),
    end_ts: float | None = None,
) -> list[MeasurementSample]:
    """One sample per scored window, carrying label ``s_t`` and remembrance ``s_t'``.

    Signals not yet seen in the session are reported as :data:`MISSING`. Height
    offsets are the peer's latest report minus the running maximum height seen
    from any peer so far. Features named in ``exclude`` are dropped.
    """
    exclude = set(exclude)
    unknown = exclude - set(NUMERIC_FEATURES) - set(CATEGORICAL_FEATURES)
    if unknown:
        raise ValueError(f"unknown features to exclude: {sorted(unknown)}")
    state: dict[PeerKey, _PeerFeatures] = {}
    local_height: float | None = None
    samples = []

    for item in iter_scored(events, config, end_ts):
        if isinstance(item, WindowRecord):
            p = state[item.peer]
            t = item.window_end
            numeric = {
                "connection_count": float(len(state)),
                "timestamp": t,
                "proto_ping_rtt_ms": p.proto_ping_rtt,
                "header_height_offset": _offset(p.headers_height, local_height),
                "ping_rtt_ms": p.ping_rtt,
                "connection_duration_s": t - p.connect_ts,
                "addr_accepted_count": float(p.addr_total),
                "block_height_offset": _offset(p.block_height, local_height),
                "time_since_last_tx_ms": MISSING if p.last_tx_ts is None else (t - p.last_tx_ts) * 1000.0,
                "min_fee_rate": p.min_fee_rate,
            }
            numeric.update((k, float(v)) for k, v in p.counts.items())
            numeric["novel_block_count"] = float(item.f_block)
            numeric["novel_fee"] = item.f_fee
            numeric["bytes_received"] = float(p.bytes_total)
            numeric["window_bytes_received"] = float(p.bytes_window)
            categorical = {
                "direction": p.direction,
                "last_msg_command": p.last_command,
                "address_family": p.family,
            }
            if exclude:
                numeric = {k: v for k, v in numeric.items() if k not in exclude}
                categorical = {k: v for k, v in categorical.items() if k not in exclude}
            samples.append(MeasurementSample(
                item.identity, t, numeric, categorical, item.s_prev, item.s_curr, item.partial))
            for k in p.counts:
                p.counts[k] = 0
            p.bytes_window = 0
            continue

        ev = item
        kind = ev.kind
        if kind is EventKind.CONNECT:
            state[ev.peer] = _PeerFeatures(ev.ts, ev.peer.direction.value, address_family(ev.peer.address))
            continue
        if kind is EventKind.DISCONNECT:
            del state[ev.peer]
            continue
        p = state[ev.peer]
        p.counts["count_" + kind.value.lower()] += 1
        if kind is EventKind.MSG:
            p.last_command = ev.payload["command"]
        elif kind in _KIND_COMMAND:
            p.last_command = _KIND_COMMAND[kind]
        if kind is EventKind.TX:
            p.last_tx_ts = ev.ts
            p.bytes_total += ev.payload["size"]
            p.bytes_window += ev.payload["size"]
        elif kind is EventKind.PING_RTT:
            p.ping_rtt = float(ev.payload["rtt_ms"])
        elif kind is EventKind.PROTO_PING_RTT:
            p.proto_ping_rtt = float(ev.payload["rtt_ms"])
        elif kind is EventKind.ADDR:
            p.addr_total += ev.payload["count"]
        elif kind is EventKind.FEEFILTER:
            p.min_fee_rate = float(ev.payload["min_fee_rate"])
        if kind in (EventKind.HEADERS_HEIGHT, EventKind.BLOCK_HEIGHT, EventKind.BLOCK):
            height = float(ev.payload["height"])
            if kind is EventKind.HEADERS_HEIGHT:
                p.headers_height = height
            elif kind is EventKind.BLOCK_HEIGHT:
                p.block_height = height
            local_height = height if local_height is None else max(local_height, height)
    return samples


def _offset(height: float | None, local: float | None) -> float:
    if height is None or local is None:
        return MISSING
    return height - local


@dataclass(frozen=True)
class FeatureSchema:
    numeric: tuple[str, ...]
    categorical: tuple[tuple[str, tuple[str, ...]], ...]

    @property
    def columns(self) -> list[str]:
        cols = list(self.numeric)
        for name, vocab in self.categorical:
            cols.extend(f"{name}={tok}" for tok in vocab)
        return cols

    @property
    def width(self) -> int:
        return len(self.numeric) + sum(len(v) for _, v in self.categorical)


def fit_encoder(samples: Sequence[MeasurementSample]) -> FeatureSchema:
    """Freeze feature names and the sorted per-feature categorical vocabularies."""
    if not samples:
        raise ValueError("cannot fit an encoder on zero samples")
    numeric = tuple(samples[0].numeric)
    cat_names = tuple(samples[0].categorical)
    vocab: dict[str, set[str]] = {name: set() for name in cat_names}
    for s in samples:
        if tuple(s.numeric) != numeric or tuple(s.categorical) != cat_names:
            raise SchemaMismatch("samples disagree on feature names")
        for name, tok in s.categorical.items():
            if not tok:
                raise ValueError(f"empty token for categorical feature {name!r}")
            vocab[name].add(tok)
    if len(set(numeric) | set(cat_names)) != len(numeric) + len(cat_names):
        raise SchemaMismatch("duplicate feature names")
    return FeatureSchema(numeric, tuple((n, tuple(sorted(vocab[n]))) for n in cat_names))


@dataclass
class Dataset:
    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    window_end: np.ndarray
    peers: np.ndarray
    remembrance_included: bool

    @property
    def columns(self) -> list[str]:
        cols = self.schema.columns
        return cols + ["remembrance"] if self.remembrance_included else cols

    @property
    def binary_columns(self) -> np.ndarray:
        """Mask of one-hot columns."""
        mask = np.zeros(len(self.columns), dtype=bool)
        mask[len(self.schema.numeric):self.schema.width] = True
        return mask

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256("\x1f".join(self.columns).encode()).hexdigest()[:16]

    def __len__(self) -> int:
        return len(self.y)

    def take(self, index) -> "Dataset":
        return Dataset(self.schema, self.X[index], self.y[index], self.window_end[index],
                       self.peers[index], self.remembrance_included)


def encode(
    schema: FeatureSchema,
    samples: Sequence[MeasurementSample],
    include_remembrance: bool = True,
) -> Dataset:
    """Encode samples against a fitted schema.

    Unseen categorical tokens encode as an all-zero block. With
    ``include_remembrance`` the sample's previous score is the last column.
    Rows are ordered by ``window_end`` (stable).
    """
    n = len(samples)
    width = schema.width + int(include_remembrance)
    X = np.zeros((n, width))
    offsets = []
    col = len(schema.numeric)
    for name, vocab in schema.categorical:
        offsets.append((name, col, {tok: col + i for i, tok in enumerate(vocab)}))
        col += len(vocab)
    n_num = len(schema.numeric)
    for i, s in enumerate(samples):
        try:
            X[i, :n_num] = [s.numeric[name] for name in schema.numeric]
            for name, _, index in offsets:
                j = index.get(s.categorical[name])
                if j is not None:
                    X[i, j] = 1.0
        except KeyError as exc:
            raise SchemaMismatch(f"sample {i} lacks feature {exc.args[0]!r}") from None
        if len(s.numeric) != n_num or len(s.categorical) != len(offsets):
            raise SchemaMismatch(f"sample {i} has features outside the schema")
    if include_remembrance:
        X[:, -1] = [s.remembrance for s in samples]
    if not np.isfinite(X).all():
        raise ValueError("non-finite feature value")
    y = np.array([s.label for s in samples], dtype=float)
    ends = np.array([s.window_end for s in samples], dtype=float)
    peers = np.array([s.peer for s in samples], dtype=object)
    order = np.argsort(ends, kind="stable")
    if n and np.any(order != np.arange(n)):
        X, y, ends, peers = X[order], y[order], ends[order], peers[order]
    return Dataset(schema, X, y, ends, peers, include_remembrance)


@dataclass(frozen=True)
class MIRanking:
    entries: tuple[tuple[str, float], ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def to_text(self) -> str:
        return "".join(f"{name},{mi!r}\n" for name, mi in self.entries)


def quantile_codes(x: np.ndarray, bins: int) -> np.ndarray:
    """Equal-frequency discretisation; equal values always share a bin."""
    x = np.asarray(x, dtype=float)
    edges = np.quantile(x, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    codes = np.searchsorted(edges, x, side="right")
    return np.unique(codes, return_inverse=True)[1].reshape(-1)


def mutual_information_codes(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information in bits between two discrete code vectors."""
    a = np.unique(a, return_inverse=True)[1].reshape(-1)
    b = np.unique(b, return_inverse=True)[1].reshape(-1)
    n = len(a)
    ka, kb = a.max() + 1, b.max() + 1
    joint = np.bincount(a * kb + b, minlength=ka * kb).reshape(ka, kb) / n
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log2(joint[nz] / np.outer(pa, pb)[nz])))
    return max(mi, 0.0)


def mutual_information(dataset: Dataset, bins: int = 16) -> MIRanking:
    """Rank every column by MI with the label, highest first, ties by name.

    Continuous columns and the label use ``bins`` quantile bins; one-hot
    columns are used as binary variables directly.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    label = quantile_codes(dataset.y, bins)
    binary = dataset.binary_columns
    scores = []
    for j, name in enumerate(dataset.columns):
        col = dataset.X[:, j]
        codes = (col != 0).astype(np.int64) if binary[j] else quantile_codes(col, bins)
        scores.append((name, mutual_information_codes(codes, label)))
    scores.sort(key=lambda item: (-item[1], item[0]))
    return MIRanking(tuple(scores))


def select_top_k(ranking: MIRanking, k: int) -> list[str]:
    if not 1 <= k <= len(ranking):
        raise ValueError(f"k must be in [1, {len(ranking)}], got {k}")
    return ranking.names()[:k]
