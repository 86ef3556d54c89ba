import json
import struct
import warnings
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfu_offload import wire
from sfu_offload.wire import (
    Av1Descriptor,
    DepthExceeded,
    ExtensionElement,
    MalformedDescriptor,
    NotAv1Extension,
    PlaneRoute,
    Profile,
    RtcpKind,
    RtcpMessage,
    RtpPacket,
    StunKind,
    StunMessage,
    TruncatedCompound,
    TruncatedHeader,
    UnknownPacketType,
)

FIXTURES = Path(__file__).parent / "fixtures" / "wire"


def reference_extensions(block: bytes, one_byte: bool):
    """Straight RFC 8285 walk, written independently of the library.

    Returns the non-padding (id, data) pairs and the number of padding
    bytes that precede each of them.
    """
    out = []
    i = 0
    pad = 0
    while i < len(block):
        b = block[i]
        if b == 0:
            pad += 1
            i += 1
            continue
        if one_byte:
            ident, ln = b >> 4, (b & 15) + 1
            if ident == 15:
                break
            i += 1
        else:
            ident, ln = b, block[i + 1]
            i += 2
        out.append((pad, ident, block[i : i + ln]))
        pad = 0
        i += ln
    return out


def _ext_block(pkt_bytes: bytes):
    cc = pkt_bytes[0] & 15
    off = 12 + 4 * cc
    profile, words = struct.unpack_from("!HH", pkt_bytes, off)
    return profile, pkt_bytes[off + 4 : off + 4 + 4 * words]


# -- parse_rtp -------------------------------------------------------------

def test_plain_header_has_no_extensions():
    data = bytes.fromhex("80600001000000050000000768")
    p = wire.parse_rtp(data)
    assert p.version == 2
    assert p.extensions == ()
    assert p.seq == 1 and p.timestamp == 5 and p.ssrc == 7
    assert p.payload_len == 1


def test_one_byte_block_with_interleaved_padding():
    # [id=1 len=3 "abc"] [pad] [id=5 len=1 "x"] then one alignment byte
    block = bytes([0x12]) + b"abc" + b"\x00" + bytes([0x50]) + b"x" + b"\x00"
    data = struct.pack("!BBHII", 0x90, 96, 2, 5, 7) + struct.pack("!HH", 0xBEDE, 2) + block
    p = wire.parse_rtp(data)
    assert len(p.extensions) == 3
    assert [e.is_padding for e in p.extensions] == [False, True, False]
    assert (p.extensions[0].id, p.extensions[0].data) == (1, b"abc")
    assert (p.extensions[2].id, p.extensions[2].data) == (5, b"x")
    ref = reference_extensions(block, one_byte=True)
    assert [(i, d) for _, i, d in ref] == [(e.id, e.data) for e in p.extensions if not e.is_padding]
    assert ref[1][0] == 1  # one padding byte before the second element
    assert wire.serialize_rtp(p) == data


def _many_elements(k: int) -> bytes:
    block = bytes([0x10, 0xAA]) * k
    block += bytes((4 - len(block) % 4) % 4)
    return struct.pack("!BBHII", 0x90, 96, 9, 0, 1) + struct.pack("!HH", 0xBEDE, len(block) // 4) + block


def test_depth_budget_rejects_28_elements():
    with pytest.raises(DepthExceeded):
        wire.parse_rtp(_many_elements(28), max_depth=27)
    assert len(wire.parse_rtp(_many_elements(27), max_depth=27).extensions) == 27


@pytest.mark.parametrize("k", range(1, 40))
def test_depth_budget_iff(k):
    data = _many_elements(k)
    if k <= 27:
        assert len(wire.parse_rtp(data).extensions) == k
    else:
        with pytest.raises(DepthExceeded):
            wire.parse_rtp(data)


def test_truncated_header():
    with pytest.raises(TruncatedHeader):
        wire.parse_rtp(b"\x80\x60\x00")


def test_malformed_extension_overrun():
    block = bytes([0x1F, 1, 2, 3])  # claims 16 bytes, only 3 present
    data = struct.pack("!BBHII", 0x90, 96, 1, 0, 1) + struct.pack("!HH", 0xBEDE, 1) + block
    with pytest.raises(wire.MalformedExtension):
        wire.parse_rtp(data)


def test_two_byte_profile_zero_length_element():
    block = bytes([7, 0, 200, 1, 0xFF, 0, 0, 0])
    data = struct.pack("!BBHII", 0x90, 96, 3, 0, 1) + struct.pack("!HH", 0x1000, 2) + block
    p = wire.parse_rtp(data)
    assert p.extension_profile is Profile.TWO_BYTE
    assert [(e.id, e.length) for e in p.extensions] == [(7, 0), (200, 1)]
    assert wire.serialize_rtp(p) == data


# -- serialize_rtp ---------------------------------------------------------

def test_seq_boundary_round_trip():
    p = wire.build_rtp(payload_type=96, seq=65535, timestamp=1, ssrc=2, payload=b"z")
    assert wire.parse_rtp(bytes(p)).seq == 65535


def test_seq_rewrite_changes_exactly_two_bytes_at_offset_2():
    p = wire.build_rtp(payload_type=96, seq=0x1234, timestamp=1, ssrc=2, payload=b"payload",
                       extensions=[(3, b"abc")])
    original = bytes(p)
    rewritten = bytes(p.with_seq(0x4321))
    diff = [i for i, (a, b) in enumerate(zip(original, rewritten)) if a != b]
    assert diff == [2, 3]
    assert wire.rewrite_seq(original, 0x4321) == rewritten


def test_field_overflow():
    with pytest.raises(wire.FieldOverflow):
        wire.serialize_rtp(RtpPacket(payload_type=200, seq=1, timestamp=0, ssrc=0))
    bad = ExtensionElement(Profile.ONE_BYTE, 15, 1, b"x")
    with pytest.raises(wire.FieldOverflow):
        wire.serialize_rtp(RtpPacket(payload_type=96, seq=1, timestamp=0, ssrc=0,
                                     extension_flag=True, extensions=(bad,)))


def _element(profile, draw):
    if profile is Profile.ONE_BYTE:
        ident = draw(st.integers(1, 14))
        data = draw(st.binary(min_size=1, max_size=16))
    else:
        ident = draw(st.integers(1, 255))
        data = draw(st.binary(min_size=0, max_size=40))
    return ExtensionElement(profile, ident, len(data), data)


@st.composite
def rtp_packets(draw):
    has_ext = draw(st.booleans())
    # the profile only exists on the wire when an extension block does
    profile = draw(st.sampled_from(list(Profile))) if has_ext else Profile.ONE_BYTE
    exts = []
    if has_ext:
        n = draw(st.integers(0, 12))
        for i in range(n):
            if exts and not exts[-1].is_padding and draw(st.booleans()):
                exts.append(ExtensionElement.padding(profile, draw(st.integers(1, 3))))
            exts.append(_element(profile, draw))
    padding = b""
    if draw(st.booleans()):
        n = draw(st.integers(1, 8))
        padding = bytes(n - 1) + bytes([n])
    pt = draw(st.integers(0, 127))
    return RtpPacket(
        payload_type=pt,
        seq=draw(st.integers(0, 65535)),
        timestamp=draw(st.integers(0, 2**32 - 1)),
        ssrc=draw(st.integers(0, 2**32 - 1)),
        marker=draw(st.booleans()),
        csrcs=tuple(draw(st.lists(st.integers(0, 2**32 - 1), max_size=3))),
        extension_flag=has_ext,
        extension_profile=profile,
        extension_appbits=draw(st.integers(0, 15)) if profile is Profile.TWO_BYTE else 0,
        extensions=tuple(exts),
        payload=draw(st.binary(max_size=64)),
        padding=padding,
        media_kind=wire.rtp.media_kind_for(pt),
    )


@settings(max_examples=10_000, deadline=None)
@given(rtp_packets())
def test_round_trip_property(p):
    data = wire.serialize_rtp(p)
    q = wire.parse_rtp(data, max_depth=64)
    assert q == p
    assert wire.serialize_rtp(q) == data
    if p.extension_flag:
        prof, block = _ext_block(data)
        ref = reference_extensions(block, one_byte=prof == 0xBEDE)
        assert [(i, d) for _, i, d in ref] == [(e.id, e.data) for e in p.extensions if not e.is_padding]


# -- AV1 descriptor --------------------------------------------------------

def test_av1_mandatory_fields():
    # S=1 E=1 template 3 frame 7, packed by hand
    raw = bytes([0b11000011, 0x00, 0x07])
    ext = ExtensionElement(Profile.ONE_BYTE, 12, 3, raw)
    d = wire.parse_av1_descriptor(ext)
    assert d == Av1Descriptor(template_id=3, frame_number=7, start_of_frame=True, end_of_frame=True)
    assert not d.has_extended_structure
    assert wire.encode_av1_descriptor(d) == raw


def test_av1_extended_structure():
    d = Av1Descriptor(0, 1, extended=wire.L1T3)
    ext = wire.av1_extension(d)
    got = wire.parse_av1_descriptor(ext)
    assert got.has_extended_structure
    assert got.extended.template_to_layer == {0: 0, 1: 0, 2: 1, 3: 2, 4: 2}


def test_av1_errors():
    with pytest.raises(MalformedDescriptor):
        wire.parse_av1_descriptor(ExtensionElement(Profile.TWO_BYTE, 12, 0, b""))
    with pytest.raises(NotAv1Extension):
        wire.parse_av1_descriptor(ExtensionElement(Profile.ONE_BYTE, 3, 3, b"\x00\x00\x00"))
    # configurable id
    d = wire.parse_av1_descriptor(ExtensionElement(Profile.ONE_BYTE, 3, 3, b"\x02\x00\x09"), ext_id=3)
    assert (d.template_id, d.frame_number) == (2, 9)


# -- RTCP ------------------------------------------------------------------

def test_single_rr():
    rr = RtcpMessage(RtcpKind.RR, 1, report_blocks=(wire.ReportBlock(2, 0.25, 4, 100, 10),))
    msgs = wire.parse_rtcp_compound(bytes(rr))
    assert [m.kind for m in msgs] == [RtcpKind.RR]
    assert msgs[0].report_blocks[0].fraction_lost == 0.25


def test_rr_then_remb_round_trip():
    rr = RtcpMessage(RtcpKind.RR, 1)
    remb = RtcpMessage(RtcpKind.REMB, 1, remb_bps=1_500_000, remb_ssrcs=(9,))
    data = wire.serialize_compound([rr, remb])
    msgs = wire.parse_rtcp_compound(data)
    assert [m.kind for m in msgs] == [RtcpKind.RR, RtcpKind.REMB]
    # 1.5e6 fits after a shift of 3 with no precision loss
    assert msgs[1].remb_bps == 1_500_000
    assert wire.serialize_compound(msgs) == data


def test_remb_mantissa_rounds_down():
    exp, mant = wire.rtcp.encode_remb_bitrate(1_000_003)
    assert mant < 2**18 and (mant << exp) <= 1_000_003 < ((mant + 1) << exp)


def test_sr_sdes_compound():
    sr = RtcpMessage(RtcpKind.SR, 5, sender_info=wire.SenderInfo(1 << 40, 3, 4, 5))
    sdes = RtcpMessage(RtcpKind.SDES, 5, sdes_chunks=((5, ((1, b"cname"),)),))
    msgs = wire.parse_rtcp_compound(wire.serialize_compound([sr, sdes]))
    assert [m.kind for m in msgs] == [RtcpKind.SR, RtcpKind.SDES]
    assert msgs[0].sender_info.ntp_timestamp == 1 << 40
    assert msgs[1].sdes_chunks == ((5, ((1, b"cname"),)),)


def test_nack_fci_round_trip_across_wrap():
    seqs = (65534, 65535, 0, 3, 40)
    msg = RtcpMessage(RtcpKind.NACK, 1, media_ssrc=2, nack_seqs=seqs)
    got = wire.parse_rtcp_compound(bytes(msg))[0]
    assert got.nack_seqs == seqs


def test_compound_length_errors():
    with pytest.raises(TruncatedCompound):
        wire.parse_rtcp_compound(b"\x81\xc9\x00")
    with pytest.raises(TruncatedCompound):
        wire.parse_rtcp_compound(b"\x81\xc9\x00\x07\x00\x00\x00\x01")


def test_unknown_type_skipped_with_warning():
    app = b"\x80\xcc\x00\x02" + b"\x00\x00\x00\x01" + b"name"
    data = app + bytes(RtcpMessage(RtcpKind.PLI, 1, media_ssrc=2))
    with pytest.warns(UnknownPacketType):
        msgs = wire.parse_rtcp_compound(data)
    assert [m.kind for m in msgs] == [RtcpKind.PLI]


# -- STUN ------------------------------------------------------------------

def test_stun_request_response():
    req = StunMessage(StunKind.BINDING_REQUEST, bytes(range(12)), username="a:b")
    req2 = wire.parse_stun(wire.serialize_stun(req))
    assert req2.kind is StunKind.BINDING_REQUEST and req2.username == "a:b"
    resp = wire.binding_response(req2, ("10.0.0.5", 5000))
    got = wire.parse_stun(wire.serialize_stun(resp))
    assert got.transaction_id == req.transaction_id
    assert got.xor_mapped_address == ("10.0.0.5", 5000)


def test_stun_ipv6_and_integrity():
    msg = StunMessage(StunKind.BINDING_RESPONSE, b"\x01" * 12, xor_mapped_address=("2001:db8::1", 443))
    data = wire.serialize_stun(msg, password=b"secret", fingerprint=True)
    ok = wire.parse_stun(data, password=b"secret")
    assert ok.message_integrity_present and ok.integrity_ok
    assert ok.xor_mapped_address == ("2001:db8::1", 443)
    assert wire.parse_stun(data, password=b"wrong").integrity_ok is False
    assert wire.parse_stun(data).integrity_ok is None


def test_stun_integrity_matches_rfc5769_vector():
    # RFC 5769 section 2.2 sample response (IPv4), fingerprint included
    vector = bytes.fromhex(
        "0101003c2112a442b7e7a701bc34d686fa87dfae"
        "8022000b7465737420766563746f7220"
        "002000080001a147e112a643"
        "000800142b91f599fd9e90c38c7489f92af9ba53f06be7d7"
        "80280004c07d4c96"
    )
    got = wire.parse_stun(vector, password=b"VOkJxbRl1RmTxUk/WvJxBt")
    assert got.xor_mapped_address == ("192.0.2.1", 32853)
    assert got.integrity_ok is True


# -- classify --------------------------------------------------------------

def test_classify_rules():
    video = wire.build_rtp(payload_type=96, seq=1, timestamp=0, ssrc=1,
                           extensions=[wire.av1_extension(Av1Descriptor(3, 7))])
    key = wire.build_rtp(payload_type=96, seq=1, timestamp=0, ssrc=1,
                         extensions=[wire.av1_extension(Av1Descriptor(0, 7, extended=wire.L1T3))])
    audio = wire.build_rtp(payload_type=111, seq=1, timestamp=0, ssrc=2)
    assert wire.classify(video) is PlaneRoute.DATA_PLANE
    assert wire.classify(audio) is PlaneRoute.DATA_PLANE
    assert wire.classify(key) is PlaneRoute.DATA_PLANE_WITH_COPY_TO_AGENT
    assert wire.classify(StunMessage(StunKind.BINDING_REQUEST, bytes(12))) is PlaneRoute.CONTROL_PLANE_ONLY
    for kind, route in [
        (RtcpKind.SR, PlaneRoute.DATA_PLANE),
        (RtcpKind.SDES, PlaneRoute.DATA_PLANE),
        (RtcpKind.RR, PlaneRoute.DATA_PLANE_WITH_COPY_TO_AGENT),
        (RtcpKind.REMB, PlaneRoute.DATA_PLANE_WITH_COPY_TO_AGENT),
        (RtcpKind.NACK, PlaneRoute.DATA_PLANE_WITH_COPY_TO_AGENT),
        (RtcpKind.PLI, PlaneRoute.DATA_PLANE_WITH_COPY_TO_AGENT),
    ]:
        assert wire.classify([RtcpMessage(kind, 1)]) is route
    assert wire.classify(object()) is PlaneRoute.CONTROL_PLANE_ONLY


# -- fixture corpus --------------------------------------------------------

def _subset(expected, actual, path="$"):
    if isinstance(expected, dict):
        assert isinstance(actual, dict), path
        for k, v in expected.items():
            assert k in actual, f"{path}.{k} missing"
            _subset(v, actual[k], f"{path}.{k}")
    elif isinstance(expected, list):
        assert isinstance(actual, list) and len(actual) == len(expected), path
        for i, (e, a) in enumerate(zip(expected, actual)):
            _subset(e, a, f"{path}[{i}]")
    else:
        assert expected == actual, f"{path}: {expected!r} != {actual!r}"


@pytest.mark.parametrize("name", sorted(p.stem for p in FIXTURES.glob("*.hex")))
def test_fixture_corpus(name):
    data = bytes.fromhex((FIXTURES / f"{name}.hex").read_text().strip())
    expected = json.loads((FIXTURES / f"{name}.json").read_text())
    _subset(expected, wire.describe_bytes(data))
    if expected["type"] == "rtp":
        assert wire.serialize_rtp(wire.parse_rtp(data)) == data
    elif expected["type"] == "rtcp":
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert wire.serialize_compound(wire.parse_rtcp_compound(data)) == data
