"""STUN binding request/response (RFC 5389)."""

from __future__ import annotations

import enum
import hashlib
import hmac
import ipaddress
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Optional, Tuple

from .errors import MalformedStun

MAGIC_COOKIE = 0x2112A442

BINDING_REQUEST = 0x0001
BINDING_RESPONSE = 0x0101

ATTR_USERNAME = 0x0006
ATTR_MESSAGE_INTEGRITY = 0x0008
ATTR_XOR_MAPPED_ADDRESS = 0x0020
ATTR_FINGERPRINT = 0x8028

_HDR = struct.Struct("!HHI12s")
_ATTR = struct.Struct("!HH")
_FINGERPRINT_XOR = 0x5354554E


class StunKind(enum.Enum):
    BINDING_REQUEST = "binding_request"
    BINDING_RESPONSE = "binding_response"


_TYPE_CODES = {StunKind.BINDING_REQUEST: BINDING_REQUEST, StunKind.BINDING_RESPONSE: BINDING_RESPONSE}
_KINDS = {v: k for k, v in _TYPE_CODES.items()}


@dataclass(frozen=True)
class StunMessage:
    kind: StunKind
    transaction_id: bytes
    xor_mapped_address: Optional[Tuple[str, int]] = None
    username: Optional[str] = None
    message_integrity_present: bool = False
    integrity_ok: Optional[bool] = None


def new_transaction_id() -> bytes:
    return os.urandom(12)


def is_stun(data: bytes) -> bool:
    return len(data) >= 20 and data[0] & 0xC0 == 0 and struct.unpack_from("!I", data, 4)[0] == MAGIC_COOKIE


def _xor_address(ip: str, port: int, tid: bytes) -> bytes:
    addr = ipaddress.ip_address(ip)
    xport = port ^ (MAGIC_COOKIE >> 16)
    key = struct.pack("!I", MAGIC_COOKIE) + tid
    packed = addr.packed
    xaddr = bytes(a ^ k for a, k in zip(packed, key))
    family = 0x01 if addr.version == 4 else 0x02
    return struct.pack("!BBH", 0, family, xport) + xaddr


def _unxor_address(value: bytes, tid: bytes) -> Tuple[str, int]:
    if len(value) < 8:
        raise MalformedStun("XOR-MAPPED-ADDRESS too short")
    _, family, xport = struct.unpack_from("!BBH", value)
    size = 4 if family == 0x01 else 16
    if family not in (0x01, 0x02) or len(value) < 4 + size:
        raise MalformedStun(f"bad address family {family}")
    key = struct.pack("!I", MAGIC_COOKIE) + tid
    raw = bytes(a ^ k for a, k in zip(value[4 : 4 + size], key))
    return str(ipaddress.ip_address(raw)), xport ^ (MAGIC_COOKIE >> 16)


def _attr(attr_type: int, value: bytes) -> bytes:
    return _ATTR.pack(attr_type, len(value)) + value + bytes((4 - len(value) % 4) % 4)


def serialize_stun(m: StunMessage, password: Optional[bytes] = None, fingerprint: bool = False) -> bytes:
    """Encode; MESSAGE-INTEGRITY is added iff ``password`` is given."""
    if len(m.transaction_id) != 12:
        raise MalformedStun("transaction id must be 96 bits")
    body = bytearray()
    if m.username is not None:
        body += _attr(ATTR_USERNAME, m.username.encode())
    if m.xor_mapped_address is not None:
        body += _attr(ATTR_XOR_MAPPED_ADDRESS, _xor_address(*m.xor_mapped_address, m.transaction_id))
    code = _TYPE_CODES[m.kind]
    if password is not None:
        # length field covers everything up to and including the MI attribute
        hdr = _HDR.pack(code, len(body) + 24, MAGIC_COOKIE, m.transaction_id)
        mac = hmac.new(password, hdr + body, hashlib.sha1).digest()
        body += _attr(ATTR_MESSAGE_INTEGRITY, mac)
    if fingerprint:
        hdr = _HDR.pack(code, len(body) + 8, MAGIC_COOKIE, m.transaction_id)
        crc = (zlib.crc32(hdr + body) ^ _FINGERPRINT_XOR) & 0xFFFFFFFF
        body += _attr(ATTR_FINGERPRINT, struct.pack("!I", crc))
    return _HDR.pack(code, len(body), MAGIC_COOKIE, m.transaction_id) + bytes(body)


def parse_stun(data: bytes, password: Optional[bytes] = None) -> StunMessage:
    """Decode a binding message. With ``password`` the integrity is checked."""
    if len(data) < 20:
        raise MalformedStun("STUN header needs 20 bytes")
    msg_type, length, cookie, tid = _HDR.unpack_from(data)
    if cookie != MAGIC_COOKIE:
        raise MalformedStun("missing magic cookie")
    if msg_type not in _KINDS:
        raise MalformedStun(f"unsupported STUN type 0x{msg_type:04x}")
    if len(data) < 20 + length or length % 4:
        raise MalformedStun("STUN length field inconsistent")
    pos = 20
    end = 20 + length
    mapped = None
    username = None
    mi_present = False
    ok = None
    while pos < end:
        if pos + 4 > end:
            raise MalformedStun("attribute header truncated")
        atype, alen = _ATTR.unpack_from(data, pos)
        value = data[pos + 4 : pos + 4 + alen]
        if len(value) < alen:
            raise MalformedStun("attribute truncated")
        if atype == ATTR_XOR_MAPPED_ADDRESS:
            mapped = _unxor_address(value, tid)
        elif atype == ATTR_USERNAME:
            username = value.decode("utf-8", "replace")
        elif atype == ATTR_MESSAGE_INTEGRITY:
            mi_present = True
            if password is not None:
                hdr = _HDR.pack(msg_type, pos - 20 + 24, MAGIC_COOKIE, tid)
                expect = hmac.new(password, hdr + data[20:pos], hashlib.sha1).digest()
                ok = hmac.compare_digest(expect, bytes(value))
        pos += 4 + alen + (4 - alen % 4) % 4
    return StunMessage(_KINDS[msg_type], bytes(tid), mapped, username, mi_present, ok)


def binding_response(request: StunMessage, source: Tuple[str, int]) -> StunMessage:
    """Answer a binding request by reflecting the observed source address."""
    return StunMessage(StunKind.BINDING_RESPONSE, request.transaction_id, xor_mapped_address=source)
