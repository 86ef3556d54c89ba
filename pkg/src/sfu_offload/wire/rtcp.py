"""Compound RTCP: SR, RR, SDES (RFC 3550), NACK and PLI (RFC 4585), REMB.

Common header::

     0                   1                   2                   3
     0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |V=2|P| RC/FMT  |      PT       |   length (words - 1)          |
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
"""

from __future__ import annotations

import enum
import struct
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .errors import FieldOverflow, TruncatedCompound, UnknownPacketType

PT_SR = 200
PT_RR = 201
PT_SDES = 202
PT_BYE = 203
PT_APP = 204
PT_RTPFB = 205
PT_PSFB = 206

FMT_NACK = 1
FMT_PLI = 1
FMT_ALFB = 15

_HDR = struct.Struct("!BBH")
_SSRC = struct.Struct("!I")
_SENDER_INFO = struct.Struct("!IIIII")
_BLOCK = struct.Struct("!IB3sIIII")
_NACK_FCI = struct.Struct("!HH")


class RtcpKind(enum.Enum):
    SR = "SR"
    RR = "RR"
    SDES = "SDES"
    REMB = "REMB"
    NACK = "NACK"
    PLI = "PLI"


@dataclass(frozen=True)
class ReportBlock:
    ssrc: int
    fraction_lost: float = 0.0
    cumulative_lost: int = 0
    highest_seq: int = 0
    jitter: int = 0
    lsr: int = 0
    dlsr: int = 0

    def pack(self) -> bytes:
        frac = max(0, min(255, int(round(self.fraction_lost * 256))))
        lost = self.cumulative_lost & 0xFFFFFF
        return _BLOCK.pack(self.ssrc, frac, lost.to_bytes(3, "big"), self.highest_seq,
                           self.jitter, self.lsr, self.dlsr)

    @classmethod
    def unpack(cls, buf: bytes, pos: int) -> "ReportBlock":
        ssrc, frac, lost, hs, jitter, lsr, dlsr = _BLOCK.unpack_from(buf, pos)
        cum = int.from_bytes(lost, "big")
        if cum & 0x800000:
            cum -= 1 << 24
        return cls(ssrc, frac / 256.0, cum, hs, jitter, lsr, dlsr)


@dataclass(frozen=True)
class SenderInfo:
    ntp_timestamp: int = 0
    rtp_timestamp: int = 0
    packet_count: int = 0
    octet_count: int = 0


@dataclass(frozen=True)
class RtcpMessage:
    kind: RtcpKind
    sender_ssrc: int
    media_ssrc: Optional[int] = None
    remb_bps: Optional[int] = None
    remb_ssrcs: Tuple[int, ...] = ()
    nack_seqs: Tuple[int, ...] = ()
    report_blocks: Tuple[ReportBlock, ...] = ()
    sender_info: Optional[SenderInfo] = None
    # SDES chunks as (ssrc, ((item_type, value), ...))
    sdes_chunks: Tuple[Tuple[int, Tuple[Tuple[int, bytes], ...]], ...] = ()
    raw: bytes = field(default=b"", compare=False, repr=False)

    def __bytes__(self) -> bytes:
        return serialize_rtcp(self)


def _header(count: int, pt: int, body: bytes) -> bytes:
    if len(body) % 4:
        body += bytes(4 - len(body) % 4)
    return _HDR.pack(0x80 | count, pt, len(body) // 4) + body


def encode_remb_bitrate(bps: int) -> Tuple[int, int]:
    """Return (exponent, mantissa) with mantissa < 2**18; rounds down."""
    if bps < 0:
        raise FieldOverflow("negative bitrate")
    exp = 0
    while (bps >> exp) >= (1 << 18):
        exp += 1
    if exp >= 64:
        raise FieldOverflow("bitrate too large for REMB")
    return exp, bps >> exp


def nack_fci(seqs) -> List[Tuple[int, int]]:
    """Pack sequence numbers into (PID, BLP) pairs, preserving wrap order."""
    pairs: List[Tuple[int, int]] = []
    for s in seqs:
        s &= 0xFFFF
        if pairs:
            pid, blp = pairs[-1]
            d = (s - pid) & 0xFFFF
            if d == 0:
                continue
            if 1 <= d <= 16:
                pairs[-1] = (pid, blp | (1 << (d - 1)))
                continue
        pairs.append((s, 0))
    return pairs


def nack_seqs_from_fci(pairs) -> List[int]:
    out = []
    for pid, blp in pairs:
        out.append(pid)
        for bit in range(16):
            if blp & (1 << bit):
                out.append((pid + bit + 1) & 0xFFFF)
    return out


def serialize_rtcp(m: RtcpMessage) -> bytes:
    if m.kind is RtcpKind.SR:
        si = m.sender_info or SenderInfo()
        body = _SSRC.pack(m.sender_ssrc) + _SENDER_INFO.pack(
            (si.ntp_timestamp >> 32) & 0xFFFFFFFF, si.ntp_timestamp & 0xFFFFFFFF,
            si.rtp_timestamp, si.packet_count, si.octet_count)
        body += b"".join(b.pack() for b in m.report_blocks)
        return _header(len(m.report_blocks), PT_SR, body)
    if m.kind is RtcpKind.RR:
        body = _SSRC.pack(m.sender_ssrc) + b"".join(b.pack() for b in m.report_blocks)
        return _header(len(m.report_blocks), PT_RR, body)
    if m.kind is RtcpKind.SDES:
        chunks = m.sdes_chunks or ((m.sender_ssrc, ()),)
        body = bytearray()
        for ssrc, items in chunks:
            chunk = bytearray(_SSRC.pack(ssrc))
            for item_type, value in items:
                if len(value) > 255:
                    raise FieldOverflow("SDES item too long")
                chunk += bytes((item_type, len(value))) + value
            # null terminator, then pad the chunk to a word boundary
            chunk += bytes(4 - len(chunk) % 4)
            body += chunk
        return _header(len(chunks), PT_SDES, bytes(body))
    if m.kind is RtcpKind.REMB:
        if not m.remb_bps or m.remb_bps <= 0:
            raise FieldOverflow("REMB needs a positive bitrate")
        exp, mant = encode_remb_bitrate(m.remb_bps)
        body = _SSRC.pack(m.sender_ssrc) + _SSRC.pack(0) + b"REMB"
        body += struct.pack("!I", (len(m.remb_ssrcs) << 24) | (exp << 18) | mant)
        body += b"".join(_SSRC.pack(s) for s in m.remb_ssrcs)
        return _header(FMT_ALFB, PT_PSFB, body)
    if m.kind is RtcpKind.NACK:
        if not m.nack_seqs:
            raise FieldOverflow("NACK needs at least one sequence number")
        body = _SSRC.pack(m.sender_ssrc) + _SSRC.pack(m.media_ssrc or 0)
        body += b"".join(_NACK_FCI.pack(p, b) for p, b in nack_fci(m.nack_seqs))
        return _header(FMT_NACK, PT_RTPFB, body)
    if m.kind is RtcpKind.PLI:
        body = _SSRC.pack(m.sender_ssrc) + _SSRC.pack(m.media_ssrc or 0)
        return _header(FMT_PLI, PT_PSFB, body)
    raise FieldOverflow(f"cannot serialize {m.kind}")


def serialize_compound(messages) -> bytes:
    return b"".join(serialize_rtcp(m) for m in messages)


def _parse_one(count: int, pt: int, body: bytes, raw: bytes) -> Optional[RtcpMessage]:
    if pt in (PT_SR, PT_RR):
        need = 4 + (20 if pt == PT_SR else 0) + 24 * count
        if len(body) < need:
            raise TruncatedCompound(f"RTCP PT {pt} body shorter than {need} bytes")
        ssrc = _SSRC.unpack_from(body)[0]
        pos = 4
        info = None
        if pt == PT_SR:
            hi, lo, rtp_ts, pkts, octets = _SENDER_INFO.unpack_from(body, 4)
            info = SenderInfo((hi << 32) | lo, rtp_ts, pkts, octets)
            pos = 24
        blocks = tuple(ReportBlock.unpack(body, pos + 24 * i) for i in range(count))
        kind = RtcpKind.SR if pt == PT_SR else RtcpKind.RR
        return RtcpMessage(kind, ssrc, report_blocks=blocks, sender_info=info, raw=raw)

    if pt == PT_SDES:
        chunks = []
        pos = 0
        for _ in range(count):
            if pos + 4 > len(body):
                raise TruncatedCompound("SDES chunk truncated")
            ssrc = _SSRC.unpack_from(body, pos)[0]
            pos += 4
            items = []
            while True:
                if pos >= len(body):
                    raise TruncatedCompound("SDES items truncated")
                item_type = body[pos]
                if item_type == 0:
                    pos += 1
                    pos += (4 - pos % 4) % 4
                    break
                if pos + 2 > len(body) or pos + 2 + body[pos + 1] > len(body):
                    raise TruncatedCompound("SDES item truncated")
                ln = body[pos + 1]
                items.append((item_type, bytes(body[pos + 2 : pos + 2 + ln])))
                pos += 2 + ln
            chunks.append((ssrc, tuple(items)))
        first = chunks[0][0] if chunks else 0
        return RtcpMessage(RtcpKind.SDES, first, sdes_chunks=tuple(chunks), raw=raw)

    if pt == PT_RTPFB and count == FMT_NACK:
        if len(body) < 8:
            raise TruncatedCompound("NACK truncated")
        sender, media = struct.unpack_from("!II", body)
        pairs = [_NACK_FCI.unpack_from(body, p) for p in range(8, len(body) - 3, 4)]
        return RtcpMessage(RtcpKind.NACK, sender, media_ssrc=media,
                           nack_seqs=tuple(nack_seqs_from_fci(pairs)), raw=raw)

    if pt == PT_PSFB and count == FMT_PLI:
        if len(body) < 8:
            raise TruncatedCompound("PLI truncated")
        sender, media = struct.unpack_from("!II", body)
        return RtcpMessage(RtcpKind.PLI, sender, media_ssrc=media, raw=raw)

    if pt == PT_PSFB and count == FMT_ALFB and len(body) >= 16 and body[8:12] == b"REMB":
        sender, media = struct.unpack_from("!II", body)
        word = struct.unpack_from("!I", body, 12)[0]
        num = word >> 24
        exp = (word >> 18) & 0x3F
        mant = word & 0x3FFFF
        if len(body) < 16 + 4 * num:
            raise TruncatedCompound("REMB SSRC list truncated")
        ssrcs = struct.unpack_from(f"!{num}I", body, 16)
        return RtcpMessage(RtcpKind.REMB, sender, media_ssrc=media, remb_bps=mant << exp,
                           remb_ssrcs=tuple(ssrcs), raw=raw)
    return None


def parse_rtcp_compound(data: bytes) -> List[RtcpMessage]:
    """Split a compound packet. Unknown types are skipped with a warning."""
    if len(data) % 4:
        raise TruncatedCompound(f"compound length {len(data)} is not a multiple of 4")
    out: List[RtcpMessage] = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise TruncatedCompound("RTCP header truncated")
        b0, pt, words = _HDR.unpack_from(data, pos)
        if b0 >> 6 != 2:
            raise TruncatedCompound(f"bad RTCP version at offset {pos}")
        end = pos + 4 * (words + 1)
        if end > len(data):
            raise TruncatedCompound(f"RTCP PT {pt} claims {end - pos} bytes past the end")
        body = data[pos + 4 : end]
        if b0 & 0x20 and body:
            body = body[: len(body) - body[-1]]
        msg = _parse_one(b0 & 0x1F, pt, body, bytes(data[pos:end]))
        if msg is None:
            warnings.warn(f"skipping RTCP PT={pt} FMT={b0 & 0x1F}", UnknownPacketType, stacklevel=2)
        else:
            out.append(msg)
        pos = end
    return out


def is_rtcp(data: bytes) -> bool:
    # RFC 5761 demultiplexing on the second byte
    return len(data) >= 4 and data[0] >> 6 == 2 and 192 <= data[1] <= 223
