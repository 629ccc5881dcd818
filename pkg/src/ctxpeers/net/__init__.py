"""Wire codec, deterministic simulator and TCP transport."""

from .codec import (
    DEFAULT_TTL, MAX_FRAME, FrameError, FrameReader, Message, MessageType, PAYLOAD_FIELDS,
    decode, encode, validate_payload,
)
from .sim import SimConfig, Simulator

__all__ = [
    "DEFAULT_TTL", "MAX_FRAME", "FrameError", "FrameReader", "Message", "MessageType",
    "PAYLOAD_FIELDS", "decode", "encode", "validate_payload", "SimConfig", "Simulator",
]
