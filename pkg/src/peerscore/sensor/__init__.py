"""Live collection from Bitcoin peers: wire codec and outbound session manager."""

from .node import Sensor, SensorConfig, SensorConfigError, SensorStats, run_sensor
from .wire import (
    MAINNET_MAGIC,
    CommandError,
    DecodeResult,
    FrameDecoder,
    Status,
    WireMessage,
    checksum,
    decode_message,
    encode_message,
)

__all__ = [
    "MAINNET_MAGIC",
    "CommandError",
    "DecodeResult",
    "FrameDecoder",
    "Sensor",
    "SensorConfig",
    "SensorConfigError",
    "SensorStats",
    "Status",
    "WireMessage",
    "checksum",
    "decode_message",
    "encode_message",
    "run_sensor",
]
