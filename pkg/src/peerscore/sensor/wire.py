"""Bitcoin P2P message framing and the few payloads the sensor needs.

A frame is a 24-byte header (magic, zero-padded command, little-endian
payload length, checksum) followed by the payload. The checksum is the first
four bytes of SHA256(SHA256(payload)).
"""

from __future__ import annotations

import enum
import hashlib
import socket
import struct
import time
from dataclasses import dataclass
from ipaddress import IPv6Address, ip_address

MAINNET_MAGIC = bytes.fromhex("f9beb4d9")
HEADER_SIZE = 24
COMMAND_SIZE = 12
MAX_PAYLOAD = 32 * 1024 * 1024
PROTOCOL_VERSION = 70016

MSG_TX = 1
MSG_BLOCK = 2
MSG_WITNESS_FLAG = 1 << 30

_HEADER = struct.Struct("<4s12sI4s")


class CommandError(ValueError):
    pass


class PayloadError(ValueError):
    """A payload is truncated or malformed."""


def checksum(payload: bytes) -> bytes:
    return hashlib.sha256(hashlib.sha256(payload).digest()).digest()[:4]


def _command_bytes(command: str) -> bytes:
    try:
        raw = command.encode("ascii")
    except UnicodeEncodeError:
        raise CommandError(f"command {command!r} is not ASCII") from None
    if not raw or len(raw) > COMMAND_SIZE or b"\0" in raw:
        raise CommandError(f"command must be 1 to {COMMAND_SIZE} ASCII characters, got {command!r}")
    return raw.ljust(COMMAND_SIZE, b"\0")


@dataclass(frozen=True)
class WireMessage:
    command: str
    payload: bytes = b""
    magic: bytes = MAINNET_MAGIC

    @property
    def checksum(self) -> bytes:
        return checksum(self.payload)

    @property
    def length(self) -> int:
        return len(self.payload)


def encode_message(command: str, payload: bytes = b"", magic: bytes = MAINNET_MAGIC) -> bytes:
    """Serialize one frame. Commands longer than 12 characters raise :class:`CommandError`."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    payload = bytes(payload)
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return _HEADER.pack(magic, _command_bytes(command), len(payload), checksum(payload)) + payload


class Status(enum.Enum):
    MESSAGE = "message"
    NEED_MORE = "need_more"
    CORRUPT = "corrupt"


@dataclass(frozen=True)
class DecodeResult:
    """Outcome of one decode step.

    ``consumed`` is how many leading bytes of the buffer the caller should
    drop. For ``CORRUPT`` it skips to the next candidate magic so decoding
    can resume; for ``NEED_MORE`` it is zero.
    """

    status: Status
    message: WireMessage | None = None
    consumed: int = 0
    reason: str = ""


def _resync(buf: bytes, magic: bytes, start: int) -> int:
    """Offset of the next magic at or after ``start``; keeps a possible partial magic at the tail."""
    i = buf.find(magic, start)
    if i >= 0:
        return i
    return max(start, len(buf) - (len(magic) - 1))


def decode_message(buf: bytes | bytearray | memoryview, magic: bytes = MAINNET_MAGIC) -> DecodeResult:
    """Try to decode the frame at the start of ``buf``."""
    buf = bytes(buf)
    if len(buf) < len(magic):
        if magic.startswith(buf):
            return DecodeResult(Status.NEED_MORE)
        return DecodeResult(Status.CORRUPT, consumed=_resync(buf, magic, 1), reason="bad magic")
    if buf[:4] != magic:
        return DecodeResult(Status.CORRUPT, consumed=_resync(buf, magic, 1), reason="bad magic")
    if len(buf) < HEADER_SIZE:
        return DecodeResult(Status.NEED_MORE)
    _, raw_cmd, length, check = _HEADER.unpack_from(buf)
    command = raw_cmd.rstrip(b"\0")
    if (b"\0" in command or not command or not command.isascii()
            or not all(0x20 < c < 0x7f for c in command)):
        return DecodeResult(Status.CORRUPT, consumed=_resync(buf, magic, 1), reason="bad command")
    if length > MAX_PAYLOAD:
        return DecodeResult(Status.CORRUPT, consumed=_resync(buf, magic, 1), reason="oversize payload")
    end = HEADER_SIZE + length
    if len(buf) < end:
        return DecodeResult(Status.NEED_MORE)
    payload = buf[HEADER_SIZE:end]
    if checksum(payload) != check:
        return DecodeResult(Status.CORRUPT, consumed=_resync(buf, magic, 1), reason="checksum mismatch")
    return DecodeResult(Status.MESSAGE, WireMessage(command.decode("ascii"), payload, magic), end)


class FrameDecoder:
    """Incremental decoder for a byte stream; counts corrupt frames it skipped."""

    def __init__(self, magic: bytes = MAINNET_MAGIC):
        self.magic = magic
        self.buffer = bytearray()
        self.corrupt = 0

    def feed(self, data: bytes) -> list[WireMessage]:
        self.buffer += data
        out = []
        while self.buffer:
            res = decode_message(self.buffer, self.magic)
            if res.status is Status.NEED_MORE:
                break
            if res.status is Status.CORRUPT:
                self.corrupt += 1
            else:
                out.append(res.message)
            del self.buffer[:res.consumed]
        return out


# Payload helpers.

def pack_varint(n: int) -> bytes:
    if n < 0xFD:
        return bytes([n])
    if n <= 0xFFFF:
        return b"\xfd" + struct.pack("<H", n)
    if n <= 0xFFFFFFFF:
        return b"\xfe" + struct.pack("<I", n)
    return b"\xff" + struct.pack("<Q", n)


def read_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Return ``(value, new_offset)``."""
    if offset >= len(data):
        raise PayloadError("truncated varint")
    first = data[offset]
    size = {0xFD: 2, 0xFE: 4, 0xFF: 8}.get(first, 0)
    if size == 0:
        return first, offset + 1
    if offset + 1 + size > len(data):
        raise PayloadError("truncated varint")
    return int.from_bytes(data[offset + 1:offset + 1 + size], "little"), offset + 1 + size


def _net_addr(host: str, port: int) -> bytes:
    try:
        ip = ip_address(host)
    except ValueError:
        ip = IPv6Address(0)
    raw = ip.packed if ip.version == 6 else b"\0" * 10 + b"\xff\xff" + ip.packed
    return struct.pack("<Q", 0) + raw + struct.pack(">H", port)


def version_payload(
    peer_host: str,
    peer_port: int,
    nonce: int,
    user_agent: str = "/peerscore:0.1.0/",
    start_height: int = 0,
    version: int = PROTOCOL_VERSION,
    timestamp: int | None = None,
) -> bytes:
    """A version payload advertising no services and no relay."""
    ts = int(time.time()) if timestamp is None else timestamp
    ua = user_agent.encode()
    return (struct.pack("<iQq", version, 0, ts) + _net_addr(peer_host, peer_port)
            + _net_addr("::", 0) + struct.pack("<Q", nonce) + pack_varint(len(ua)) + ua
            + struct.pack("<i", start_height) + b"\0")


@dataclass(frozen=True)
class VersionInfo:
    version: int
    services: int
    user_agent: str
    start_height: int


def parse_version(payload: bytes) -> VersionInfo:
    if len(payload) < 80:
        raise PayloadError("version payload too short")
    version, services, _ = struct.unpack_from("<iQq", payload)
    ua_len, off = read_varint(payload, 80)
    if off + ua_len + 4 > len(payload):
        raise PayloadError("version payload truncated")
    ua = payload[off:off + ua_len].decode("utf-8", "replace")
    (height,) = struct.unpack_from("<i", payload, off + ua_len)
    return VersionInfo(version, services, ua, height)


def ping_payload(nonce: int) -> bytes:
    return struct.pack("<Q", nonce)


def parse_nonce(payload: bytes) -> int:
    if len(payload) < 8:
        raise PayloadError("nonce payload too short")
    return struct.unpack_from("<Q", payload)[0]


def parse_inv(payload: bytes) -> list[tuple[int, str]]:
    """Inventory entries as ``(type, hash hex in display byte order)``."""
    count, off = read_varint(payload)
    if off + 36 * count > len(payload):
        raise PayloadError("inv payload truncated")
    out = []
    for _ in range(count):
        (kind,) = struct.unpack_from("<I", payload, off)
        out.append((kind & ~MSG_WITNESS_FLAG, payload[off + 4:off + 36][::-1].hex()))
        off += 36
    return out


def inv_payload(entries: list[tuple[int, str]]) -> bytes:
    body = b"".join(struct.pack("<I", k) + bytes.fromhex(h)[::-1] for k, h in entries)
    return pack_varint(len(entries)) + body


def parse_count(payload: bytes) -> int:
    """Leading varint count of an addr, addrv2 or headers payload."""
    return read_varint(payload)[0]


def parse_feefilter(payload: bytes) -> int:
    """Minimum fee rate in satoshi per kilo-vbyte."""
    if len(payload) < 8:
        raise PayloadError("feefilter payload too short")
    return struct.unpack_from("<q", payload)[0]


def resolve_host(host: str) -> str:
    """Numeric address for ``host``, resolving names with the system resolver."""
    try:
        return str(ip_address(host))
    except ValueError:
        return socket.getaddrinfo(host, None)[0][4][0]
