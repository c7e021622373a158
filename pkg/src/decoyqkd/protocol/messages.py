"""Classical messages exchanged after transmission, and their wire format.

Each message is one JSON object with a ``type`` key, sent as a frame: a
4-byte big-endian length followed by that many bytes of UTF-8 JSON.
Bases are 0 (HV) / 1 (PM); classes are 0 signal, 1 decoy, 2 vacuum.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields

from ..errors import TransportError

HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 30


@dataclass(frozen=True)
class BobAnnouncement:
    indices: list[int]
    bases: list[int]


@dataclass(frozen=True)
class AliceReveal:
    indices: list[int]
    classes: list[int]
    bases: list[int]


@dataclass(frozen=True)
class TestDisclosure:
    indices: list[int]
    bits: list[int]


@dataclass(frozen=True)
class StatisticsAnnouncement:
    statistics: dict


@dataclass(frozen=True)
class Abort:
    reason: str


MESSAGE_TYPES = {
    cls.__name__: cls
    for cls in (BobAnnouncement, AliceReveal, TestDisclosure, StatisticsAnnouncement, Abort)
}


def encode(message) -> bytes:
    name = type(message).__name__
    if name not in MESSAGE_TYPES:
        raise TypeError(f"not a protocol message: {message!r}")
    body = json.dumps({"type": name, **asdict(message)}, separators=(",", ":")).encode()
    return HEADER.pack(len(body)) + body


def decode_body(body: bytes):
    try:
        doc = json.loads(body)
        cls = MESSAGE_TYPES[doc.pop("type")]
        expected = {f.name for f in fields(cls)}
        if set(doc) != expected:
            raise KeyError(sorted(set(doc) ^ expected))
        return cls(**doc)
    except (ValueError, KeyError, TypeError) as exc:
        raise TransportError(f"malformed frame: {exc}") from exc


class FrameDecoder:
    """Incremental splitter for a byte stream of frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while len(self._buf) >= HEADER.size:
            (length,) = HEADER.unpack_from(self._buf)
            if length > MAX_FRAME:
                raise TransportError(f"frame of {length} bytes exceeds limit")
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            out.append(decode_body(bytes(self._buf[HEADER.size:end])))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
