import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import sha256_reference
from peerscore.sensor import wire
from peerscore.sensor.wire import (
    MAINNET_MAGIC,
    CommandError,
    FrameDecoder,
    Status,
    checksum,
    decode_message,
    encode_message,
)


def test_reference_sha256_matches_known_vector():
    assert sha256_reference(b"abc").hex() == \
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_empty_payload_checksum():
    expected = sha256_reference(sha256_reference(b""))[:4]
    assert expected.hex() == "5df6e0e2"
    assert checksum(b"") == expected
    frame = encode_message("verack")
    assert len(frame) == 24 and frame[20:24] == expected
    assert frame[:4] == MAINNET_MAGIC and frame[4:16] == b"verack\0\0\0\0\0\0"


def test_ping_round_trip():
    payload = wire.ping_payload(0x0123456789ABCDEF)
    frame = encode_message("ping", payload)
    res = decode_message(frame)
    assert res.status is Status.MESSAGE and res.consumed == len(frame)
    assert res.message.payload == payload
    assert encode_message(res.message.command, res.message.payload) == frame
    assert wire.parse_nonce(res.message.payload) == 0x0123456789ABCDEF


@pytest.mark.parametrize("cmd", ["thirteenchars", "", "café"])
def test_bad_command(cmd):
    with pytest.raises(CommandError):
        encode_message(cmd)


def test_partial_header_needs_more():
    frame = encode_message("ping", b"\0" * 8)
    for cut in (0, 2, 10, 23, 30):
        assert decode_message(frame[:cut]).status is Status.NEED_MORE


def test_flipped_payload_bit_is_corrupt():
    frame = bytearray(encode_message("ping", b"\x01" * 8))
    frame[-1] ^= 0x10
    res = decode_message(frame)
    assert res.status is Status.CORRUPT and res.reason == "checksum mismatch"


def test_two_frames_no_residue():
    d = FrameDecoder()
    msgs = d.feed(encode_message("ping", b"a" * 8) + encode_message("pong", b"b" * 8))
    assert [m.command for m in msgs] == ["ping", "pong"]
    assert d.buffer == bytearray() and d.corrupt == 0


def test_resync_after_garbage_and_split_delivery():
    good = encode_message("inv", wire.inv_payload([(wire.MSG_TX, "ab" * 32)]))
    bad = bytearray(encode_message("tx", b"xyz"))
    bad[-1] ^= 1
    stream = b"\x00junk\xf9\xbe" + bytes(bad) + good
    d = FrameDecoder()
    got = []
    for i in range(0, len(stream), 7):
        got += d.feed(stream[i:i + 7])
    assert [m.command for m in got] == ["inv"]
    assert wire.parse_inv(got[0].payload) == [(wire.MSG_TX, "ab" * 32)]
    assert d.corrupt >= 2 and not d.buffer


def test_oversize_length_is_corrupt():
    frame = bytearray(encode_message("tx"))
    frame[16:20] = (wire.MAX_PAYLOAD + 1).to_bytes(4, "little")
    assert decode_message(frame).reason == "oversize payload"


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=2000), st.text("abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=12))
def test_round_trip_property(payload, cmd):
    frame = encode_message(cmd, payload)
    res = decode_message(frame + b"\xf9")
    assert res.status is Status.MESSAGE and res.consumed == len(frame)
    assert (res.message.command, res.message.payload) == (cmd, payload)
    assert res.message.checksum == hashlib.sha256(hashlib.sha256(payload).digest()).digest()[:4]


class TestPayloads:
    def test_varint(self):
        for n in (0, 0xFC, 0xFD, 0xFFFF, 0x10000, 2**32, 2**64 - 1):
            assert wire.read_varint(wire.pack_varint(n)) == (n, len(wire.pack_varint(n)))
        with pytest.raises(wire.PayloadError):
            wire.read_varint(b"\xfd\x01")

    def test_version(self):
        p = wire.version_payload("1.2.3.4", 8333, 7, "/x:1/", start_height=812345, timestamp=0)
        info = wire.parse_version(p)
        assert (info.version, info.services, info.user_agent, info.start_height) == (70016, 0, "/x:1/", 812345)
        assert p[-1] == 0  # relay flag off

    def test_feefilter_and_count(self):
        assert wire.parse_feefilter((1000).to_bytes(8, "little")) == 1000
        assert wire.parse_count(wire.pack_varint(300) + b"\0" * 10) == 300
        with pytest.raises(wire.PayloadError):
            wire.parse_inv(wire.pack_varint(2) + b"\0" * 36)
