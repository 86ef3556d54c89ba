"""RTP header parsing with RFC 8285 header extensions.

Extension elements are kept in wire order. Runs of zero padding bytes that sit
between elements become a single padding element, so a block can be
re-serialized byte for byte.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

from .errors import DepthExceeded, FieldOverflow, MalformedExtension, TruncatedHeader

DEFAULT_MAX_DEPTH = 27

ONE_BYTE_PROFILE = 0xBEDE
TWO_BYTE_PROFILE = 0x1000
TWO_BYTE_MASK = 0xFFF0

# static payload types for audio (RFC 3551) plus the usual dynamic Opus slot
AUDIO_PAYLOAD_TYPES = frozenset({0, 3, 4, 8, 9, 10, 11, 13, 18, 63, 111})

_HEADER = struct.Struct("!BBHII")
_EXT_HEADER = struct.Struct("!HH")


class Profile(enum.Enum):
    ONE_BYTE = "one_byte"
    TWO_BYTE = "two_byte"


class MediaKind(enum.Enum):
    AUDIO = "audio"
    VIDEO = "video"


@dataclass(frozen=True)
class ExtensionElement:
    profile: Profile
    id: Optional[int]
    length: int
    data: bytes = b""
    is_padding: bool = False

    @classmethod
    def padding(cls, profile: Profile, length: int) -> "ExtensionElement":
        return cls(profile, None, length, bytes(length), True)

    def validate(self) -> None:
        if self.is_padding:
            if self.id is not None or self.length < 1 or self.data != bytes(self.length):
                raise FieldOverflow("padding element must be id-less and all zero")
            return
        if len(self.data) != self.length:
            raise FieldOverflow("extension data length mismatch")
        if self.profile is Profile.ONE_BYTE:
            if not (self.id is not None and 1 <= self.id <= 14):
                raise FieldOverflow(f"one-byte extension id out of range: {self.id}")
            if not 1 <= self.length <= 16:
                raise FieldOverflow(f"one-byte extension length out of range: {self.length}")
        else:
            if not (self.id is not None and 1 <= self.id <= 255):
                raise FieldOverflow(f"two-byte extension id out of range: {self.id}")
            if not 0 <= self.length <= 255:
                raise FieldOverflow(f"two-byte extension length out of range: {self.length}")


@dataclass(frozen=True)
class RtpPacket:
    payload_type: int
    seq: int
    timestamp: int
    ssrc: int
    marker: bool = False
    csrcs: Tuple[int, ...] = ()
    extension_flag: bool = False
    extension_profile: Profile = Profile.ONE_BYTE
    extension_appbits: int = 0
    extensions: Tuple[ExtensionElement, ...] = ()
    # bytes after an id-15 terminator in a one-byte block, kept verbatim
    extension_tail: bytes = b""
    payload: bytes = b""
    padding: bytes = b""
    media_kind: MediaKind = MediaKind.VIDEO
    version: int = 2

    @property
    def padding_flag(self) -> bool:
        return bool(self.padding)

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def extension(self, ext_id: int) -> Optional[ExtensionElement]:
        for ext in self.extensions:
            if not ext.is_padding and ext.id == ext_id:
                return ext
        return None

    def with_seq(self, seq: int) -> "RtpPacket":
        return replace(self, seq=seq & 0xFFFF)

    def __bytes__(self) -> bytes:
        return serialize_rtp(self)


def media_kind_for(payload_type: int, audio_types=AUDIO_PAYLOAD_TYPES) -> MediaKind:
    return MediaKind.AUDIO if payload_type in audio_types else MediaKind.VIDEO


def _parse_elements(profile: Profile, block: bytes, max_depth: int):
    elements: List[ExtensionElement] = []
    tail = b""
    pos = 0
    n = len(block)
    last_data_end = 0

    def push(el):
        elements.append(el)
        # one spare slot: a trailing alignment run is dropped below
        if len(elements) > max_depth + 1:
            raise DepthExceeded(f"more than {max_depth} extension elements")

    while pos < n:
        if block[pos] == 0:
            start = pos
            while pos < n and block[pos] == 0:
                pos += 1
            push(ExtensionElement.padding(profile, pos - start))
            continue
        if profile is Profile.ONE_BYTE:
            ext_id = block[pos] >> 4
            length = (block[pos] & 0x0F) + 1
            if ext_id == 15:
                tail = block[pos:]
                break
            if ext_id == 0:
                raise MalformedExtension("one-byte element with id 0 and nonzero length")
            pos += 1
        else:
            if pos + 2 > n:
                raise MalformedExtension("two-byte element header runs past the block")
            ext_id = block[pos]
            length = block[pos + 1]
            pos += 2
        if pos + length > n:
            raise MalformedExtension(f"extension id {ext_id} overruns the block")
        push(ExtensionElement(profile, ext_id, length, bytes(block[pos : pos + length])))
        pos += length
        last_data_end = pos

    # trailing zeros up to the word boundary are alignment, not an element
    if not tail and elements and elements[-1].is_padding:
        align = (4 - last_data_end % 4) % 4
        run = elements.pop().length
        if run > align:
            elements.append(ExtensionElement.padding(profile, run - align))
    if len(elements) > max_depth:
        raise DepthExceeded(f"{len(elements)} extension elements, limit {max_depth}")
    return tuple(elements), tail


def parse_rtp(
    data: bytes,
    max_depth: int = DEFAULT_MAX_DEPTH,
    audio_payload_types=AUDIO_PAYLOAD_TYPES,
) -> RtpPacket:
    """Parse one RTP packet.

    Raises DepthExceeded when the extension block holds more than
    ``max_depth`` elements (padding runs included).
    """
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    if len(data) < _HEADER.size:
        raise TruncatedHeader(f"RTP header needs 12 bytes, got {len(data)}")
    b0, b1, seq, ts, ssrc = _HEADER.unpack_from(data)
    version = b0 >> 6
    if version != 2:
        raise TruncatedHeader(f"unsupported RTP version {version}")
    has_padding = bool(b0 & 0x20)
    has_ext = bool(b0 & 0x10)
    cc = b0 & 0x0F
    pos = _HEADER.size
    if len(data) < pos + 4 * cc:
        raise TruncatedHeader("CSRC list truncated")
    csrcs = struct.unpack_from(f"!{cc}I", data, pos)
    pos += 4 * cc

    profile = Profile.ONE_BYTE
    appbits = 0
    extensions: Tuple[ExtensionElement, ...] = ()
    tail = b""
    if has_ext:
        if len(data) < pos + 4:
            raise TruncatedHeader("extension header truncated")
        raw_profile, words = _EXT_HEADER.unpack_from(data, pos)
        pos += 4
        end = pos + 4 * words
        if len(data) < end:
            raise TruncatedHeader("extension block truncated")
        if raw_profile == ONE_BYTE_PROFILE:
            profile = Profile.ONE_BYTE
        elif raw_profile & TWO_BYTE_MASK == TWO_BYTE_PROFILE:
            profile = Profile.TWO_BYTE
            appbits = raw_profile & 0x0F
        else:
            raise MalformedExtension(f"unknown extension profile 0x{raw_profile:04x}")
        extensions, tail = _parse_elements(profile, data[pos:end], max_depth)
        pos = end

    body = data[pos:]
    padding = b""
    if has_padding:
        if not body or body[-1] == 0 or body[-1] > len(body):
            raise TruncatedHeader("invalid RTP padding count")
        padding = bytes(body[-body[-1] :])
        body = body[: -body[-1]]

    return RtpPacket(
        payload_type=b1 & 0x7F,
        seq=seq,
        timestamp=ts,
        ssrc=ssrc,
        marker=bool(b1 & 0x80),
        csrcs=tuple(csrcs),
        extension_flag=has_ext,
        extension_profile=profile,
        extension_appbits=appbits,
        extensions=extensions,
        extension_tail=tail,
        payload=bytes(body),
        padding=padding,
        media_kind=media_kind_for(b1 & 0x7F, audio_payload_types),
        version=version,
    )


def _serialize_block(p: RtpPacket) -> bytes:
    out = bytearray()
    for ext in p.extensions:
        ext.validate()
        if ext.profile is not p.extension_profile:
            raise FieldOverflow("mixed extension profiles in one block")
        if ext.is_padding:
            out += ext.data
        elif ext.profile is Profile.ONE_BYTE:
            out.append((ext.id << 4) | (ext.length - 1))
            out += ext.data
        else:
            out += bytes((ext.id, ext.length))
            out += ext.data
    out += p.extension_tail
    out += bytes((4 - len(out) % 4) % 4)
    if len(out) // 4 > 0xFFFF:
        raise FieldOverflow("extension block too long")
    if p.extension_profile is Profile.ONE_BYTE:
        raw_profile = ONE_BYTE_PROFILE
    else:
        if not 0 <= p.extension_appbits <= 15:
            raise FieldOverflow("appbits out of range")
        raw_profile = TWO_BYTE_PROFILE | p.extension_appbits
    return _EXT_HEADER.pack(raw_profile, len(out) // 4) + bytes(out)


def serialize_rtp(p: RtpPacket) -> bytes:
    if p.version != 2:
        raise FieldOverflow("version must be 2")
    for name, value, bits in (
        ("payload_type", p.payload_type, 7),
        ("seq", p.seq, 16),
        ("timestamp", p.timestamp, 32),
        ("ssrc", p.ssrc, 32),
    ):
        if not 0 <= value < (1 << bits):
            raise FieldOverflow(f"{name}={value} does not fit in {bits} bits")
    if len(p.csrcs) > 15:
        raise FieldOverflow("at most 15 CSRCs")
    if p.extensions and not p.extension_flag:
        raise FieldOverflow("extensions present but extension_flag is clear")
    if p.padding and (p.padding[-1] != len(p.padding)):
        raise FieldOverflow("last padding byte must equal the padding length")

    b0 = 0x80 | (0x20 if p.padding else 0) | (0x10 if p.extension_flag else 0) | len(p.csrcs)
    b1 = (0x80 if p.marker else 0) | p.payload_type
    out = bytearray(_HEADER.pack(b0, b1, p.seq, p.timestamp, p.ssrc))
    for c in p.csrcs:
        if not 0 <= c <= 0xFFFFFFFF:
            raise FieldOverflow("CSRC does not fit in 32 bits")
        out += struct.pack("!I", c)
    if p.extension_flag:
        out += _serialize_block(p)
    out += p.payload
    out += p.padding
    return bytes(out)


def rewrite_seq(data: bytes, seq: int) -> bytes:
    """Patch the sequence number in place without a full re-parse."""
    out = bytearray(data)
    struct.pack_into("!H", out, 2, seq & 0xFFFF)
    return bytes(out)


def build_rtp(
    *,
    payload_type: int,
    seq: int,
    timestamp: int,
    ssrc: int,
    payload: bytes = b"",
    marker: bool = False,
    extensions=(),
    profile: Profile = Profile.ONE_BYTE,
    audio_payload_types=AUDIO_PAYLOAD_TYPES,
) -> RtpPacket:
    """Convenience constructor; ``extensions`` is a sequence of (id, data)."""
    els = tuple(
        e if isinstance(e, ExtensionElement) else ExtensionElement(profile, e[0], len(e[1]), bytes(e[1]))
        for e in extensions
    )
    return RtpPacket(
        payload_type=payload_type,
        seq=seq & 0xFFFF,
        timestamp=timestamp & 0xFFFFFFFF,
        ssrc=ssrc,
        marker=marker,
        extension_flag=bool(els),
        extension_profile=profile,
        extensions=els,
        payload=payload,
        media_kind=media_kind_for(payload_type, audio_payload_types),
    )
