"""Wire messages and their length-prefixed JSON framing.

A frame is a 4-byte big-endian length followed by a UTF-8 JSON object with
the fields ``type, src, dst, msgId, ttl, payload``.  Unknown fields are
ignored on decode.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field

MAX_FRAME = 4 * 1024 * 1024
HEADER = struct.Struct("!I")
DEFAULT_TTL = 64


class FrameError(ValueError):
    """A frame is truncated, oversize or does not decode to a message."""


class MessageType(str, enum.Enum):
    # ring maintenance
    GET_SUCCESSOR = "GET_SUCCESSOR"
    SUCCESSOR_IS = "SUCCESSOR_IS"
    GET_PREDECESSOR = "GET_PREDECESSOR"
    PREDECESSOR_IS = "PREDECESSOR_IS"
    NOTIFY = "NOTIFY"
    PING = "PING"
    PONG = "PONG"
    JOIN_REQ = "JOIN_REQ"
    JOIN_ACK = "JOIN_ACK"
    LEAVE_HANDOFF = "LEAVE_HANDOFF"
    # semantic layer
    SUBQUERY = "SUBQUERY"
    SUBQUERY_RESULT = "SUBQUERY_RESULT"
    REGISTER = "REGISTER"
    REGISTER_ACK = "REGISTER_ACK"
    RENEW = "RENEW"
    DEREGISTER = "DEREGISTER"
    # push service
    SUBSCRIBE = "SUBSCRIBE"
    SUB_ACK = "SUB_ACK"
    UNSUBSCRIBE = "UNSUBSCRIBE"
    RENEW_SUB = "RENEW_SUB"
    NOTIFY_EVENT = "NOTIFY_EVENT"
    NOTIFY_ACK = "NOTIFY_ACK"
    # application clients (CLI)
    CLIENT_QUERY = "CLIENT_QUERY"
    CLIENT_PUT = "CLIENT_PUT"
    CLIENT_RM = "CLIENT_RM"
    CLIENT_SUBSCRIBE = "CLIENT_SUBSCRIBE"
    CLIENT_REPLY = "CLIENT_REPLY"
    CLIENT_EVENT = "CLIENT_EVENT"

    def __str__(self):
        return self.value


# Payload keys each kind must carry; used by dispatch validation and fuzzing.
PAYLOAD_FIELDS = {
    MessageType.GET_SUCCESSOR: {"target": int, "exclude": list},
    MessageType.SUCCESSOR_IS: {"re": int, "done": bool, "node": dict},
    MessageType.GET_PREDECESSOR: {},
    MessageType.PREDECESSOR_IS: {"re": int, "successors": list},
    MessageType.NOTIFY: {"node": dict},
    MessageType.PING: {},
    MessageType.PONG: {"re": int},
    MessageType.JOIN_REQ: {"node": dict},
    MessageType.JOIN_ACK: {"re": int},
    MessageType.LEAVE_HANDOFF: {"role": str, "node": dict},
    MessageType.SUBQUERY: {"corr": str, "origin": str, "head": dict, "mode": str,
                           "label": str, "prefix": int, "body": dict},
    MessageType.SUBQUERY_RESULT: {"corr": str, "from": str, "forwarded": list, "body": dict},
    MessageType.REGISTER: {"label": str, "node": dict, "lease": int},
    MessageType.REGISTER_ACK: {"re": int},
    MessageType.RENEW: {"label": str, "node": dict, "lease": int},
    MessageType.DEREGISTER: {"label": str, "node": dict},
    MessageType.SUBSCRIBE: {"corr": str, "origin": str, "head": dict, "mode": str,
                            "label": str, "prefix": int, "body": dict},
    MessageType.SUB_ACK: {"corr": str, "from": str, "forwarded": list, "body": dict},
    MessageType.UNSUBSCRIBE: {"corr": str, "origin": str, "head": dict, "mode": str,
                              "label": str, "prefix": int, "body": dict},
    MessageType.RENEW_SUB: {"corr": str, "origin": str, "head": dict, "mode": str,
                            "label": str, "prefix": int, "body": dict},
    MessageType.NOTIFY_EVENT: {"sub": str, "kind": str, "triple": str, "producer": str,
                               "seq": int},
    MessageType.NOTIFY_ACK: {"re": int, "sub": str, "seq": int, "producer": str},
    MessageType.CLIENT_QUERY: {"text": str},
    MessageType.CLIENT_PUT: {"triple": str},
    MessageType.CLIENT_RM: {"triple": str},
    MessageType.CLIENT_SUBSCRIBE: {"pattern": str, "filters": list, "lease": int},
    MessageType.CLIENT_REPLY: {"re": int, "ok": bool},
    MessageType.CLIENT_EVENT: {"sub": str, "kind": str, "triple": str, "producer": str},
}

REPLY_TYPES = frozenset({
    MessageType.SUCCESSOR_IS, MessageType.PREDECESSOR_IS, MessageType.PONG,
    MessageType.JOIN_ACK, MessageType.REGISTER_ACK, MessageType.NOTIFY_ACK,
    MessageType.CLIENT_REPLY,
})


@dataclass
class Message:
    type: MessageType
    src: str
    dst: str
    msg_id: int
    ttl: int = DEFAULT_TTL
    payload: dict = field(default_factory=dict)

    def to_json(self):
        return {"type": self.type.value, "src": self.src, "dst": self.dst,
                "msgId": self.msg_id, "ttl": self.ttl, "payload": self.payload}

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict):
            raise FrameError("frame is not a JSON object")
        try:
            kind = MessageType(obj["type"])
        except KeyError:
            raise FrameError("missing field 'type'") from None
        except ValueError:
            raise FrameError(f"unknown message type {obj.get('type')!r}") from None
        for key, typ in (("src", str), ("dst", str), ("msgId", int), ("ttl", int),
                         ("payload", dict)):
            if key not in obj:
                raise FrameError(f"missing field {key!r}")
            if not isinstance(obj[key], typ) or isinstance(obj[key], bool) and typ is int:
                raise FrameError(f"field {key!r} has wrong type")
        if not 0 <= obj["msgId"] < 2 ** 64:
            raise FrameError("msgId out of range")
        return cls(kind, obj["src"], obj["dst"], obj["msgId"], obj["ttl"], obj["payload"])


def validate_payload(m: Message) -> None:
    """Raise FrameError unless the payload carries its kind's required fields."""
    for key, typ in PAYLOAD_FIELDS[m.type].items():
        if key not in m.payload:
            raise FrameError(f"{m.type} payload lacks {key!r}")
        value = m.payload[key]
        if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
            raise FrameError(f"{m.type} payload field {key!r} must be int")
        if not isinstance(value, typ):
            raise FrameError(f"{m.type} payload field {key!r} must be {typ.__name__}")


def encode(m: Message) -> bytes:
    body = json.dumps(m.to_json(), separators=(",", ":"), ensure_ascii=False,
                      sort_keys=True).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise FrameError(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def _decode_body(body: bytes) -> Message:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FrameError(f"bad JSON frame: {exc}") from None
    return Message.from_json(obj)


def decode(buf: bytes) -> Message:
    """Decode exactly one frame."""
    if len(buf) < HEADER.size:
        raise FrameError("truncated frame header")
    (n,) = HEADER.unpack_from(buf)
    if n > MAX_FRAME:
        raise FrameError(f"frame length {n} exceeds {MAX_FRAME}")
    if len(buf) - HEADER.size < n:
        raise FrameError(f"truncated frame: need {n} bytes, have {len(buf) - HEADER.size}")
    if len(buf) - HEADER.size > n:
        raise FrameError("trailing bytes after frame")
    return _decode_body(bytes(buf[HEADER.size:]))


class FrameReader:
    """Incremental decoder for a byte stream carrying consecutive frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        self._buf.extend(data)
        out = []
        while len(self._buf) >= HEADER.size:
            (n,) = HEADER.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise FrameError(f"frame length {n} exceeds {MAX_FRAME}")
            if len(self._buf) < HEADER.size + n:
                break
            body = bytes(self._buf[HEADER.size:HEADER.size + n])
            del self._buf[:HEADER.size + n]
            out.append(_decode_body(body))
        return out

    @property
    def pending(self):
        return len(self._buf)
