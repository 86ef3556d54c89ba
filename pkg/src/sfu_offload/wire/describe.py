"""JSON-friendly views of parsed packets (used by fixtures and the CLI)."""

from __future__ import annotations

from typing import Any, Dict

from .av1 import parse_av1_descriptor
from .classify import PlaneRoute, StreamRegistry, classify, parse_packet
from .errors import WireError
from .rtcp import RtcpMessage
from .rtp import RtpPacket
from .stun import StunMessage


def _rtp(p: RtpPacket, ctx: StreamRegistry) -> Dict[str, Any]:
    out: Dict[str, Any] = {
        "type": "rtp",
        "payload_type": p.payload_type,
        "seq": p.seq,
        "timestamp": p.timestamp,
        "ssrc": p.ssrc,
        "marker": p.marker,
        "media_kind": p.media_kind.value,
        "payload_len": p.payload_len,
        "padding_len": len(p.padding),
        "extensions": [
            {"padding": e.length} if e.is_padding else {"id": e.id, "len": e.length, "data": e.data.hex()}
            for e in p.extensions
        ],
    }
    ext = p.extension(ctx.av1_ext_id)
    if ext is not None:
        try:
            d = parse_av1_descriptor(ext, ctx.av1_ext_id)
            out["av1"] = {
                "template_id": d.template_id,
                "frame_number": d.frame_number,
                "start": d.start_of_frame,
                "end": d.end_of_frame,
                "extended": d.has_extended_structure,
            }
            if d.extended is not None:
                out["av1"]["template_to_layer"] = {str(k): v for k, v in sorted(d.extended.template_to_layer.items())}
        except WireError as exc:
            out["av1_error"] = str(exc)
    return out


def _rtcp(m: RtcpMessage) -> Dict[str, Any]:
    out: Dict[str, Any] = {"kind": m.kind.value, "sender_ssrc": m.sender_ssrc}
    if m.media_ssrc is not None:
        out["media_ssrc"] = m.media_ssrc
    if m.remb_bps is not None:
        out["remb_bps"] = m.remb_bps
        out["remb_ssrcs"] = list(m.remb_ssrcs)
    if m.nack_seqs:
        out["nack_seqs"] = list(m.nack_seqs)
    if m.report_blocks:
        out["report_blocks"] = [
            {"ssrc": b.ssrc, "fraction_lost": b.fraction_lost, "cumulative_lost": b.cumulative_lost,
             "highest_seq": b.highest_seq, "jitter": b.jitter}
            for b in m.report_blocks
        ]
    return out


def describe(parsed, ctx: StreamRegistry | None = None) -> Dict[str, Any]:
    ctx = ctx or StreamRegistry()
    if isinstance(parsed, RtpPacket):
        out = _rtp(parsed, ctx)
    elif isinstance(parsed, StunMessage):
        out = {
            "type": "stun",
            "kind": parsed.kind.value,
            "transaction_id": parsed.transaction_id.hex(),
            "xor_mapped_address": list(parsed.xor_mapped_address) if parsed.xor_mapped_address else None,
            "message_integrity": parsed.message_integrity_present,
        }
    else:
        out = {"type": "rtcp", "messages": [_rtcp(m) for m in parsed]}
    out["route"] = classify(parsed, ctx).value
    return out


def describe_bytes(data: bytes, ctx: StreamRegistry | None = None) -> Dict[str, Any]:
    """Parse and describe; parse failures become an error record."""
    try:
        return describe(parse_packet(data, ctx), ctx)
    except WireError as exc:
        return {"type": "error", "error": type(exc).__name__, "detail": str(exc),
                "route": PlaneRoute.CONTROL_PLANE_ONLY.value}
