"""Assign each received packet to a processing plane."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Sequence, Union

from .av1 import DEFAULT_AV1_EXT_ID, parse_av1_descriptor
from .errors import WireError
from .rtcp import RtcpKind, RtcpMessage, is_rtcp, parse_rtcp_compound
from .rtp import AUDIO_PAYLOAD_TYPES, DEFAULT_MAX_DEPTH, RtpPacket, parse_rtp
from .stun import StunMessage, is_stun, parse_stun

log = logging.getLogger(__name__)


class PlaneRoute(enum.Enum):
    DATA_PLANE = "data_plane"
    DATA_PLANE_WITH_COPY_TO_AGENT = "data_plane_with_copy_to_agent"
    CONTROL_PLANE_ONLY = "control_plane_only"

    @property
    def reaches_agent(self) -> bool:
        return self is not PlaneRoute.DATA_PLANE


@dataclass
class StreamRegistry:
    """What the switch knows about negotiated streams."""

    av1_ext_id: int = DEFAULT_AV1_EXT_ID
    audio_payload_types: FrozenSet[int] = AUDIO_PAYLOAD_TYPES
    max_depth: int = DEFAULT_MAX_DEPTH
    # ssrc -> "audio" | "video", overrides the payload-type guess
    ssrc_kinds: Dict[int, str] = field(default_factory=dict)


_COPY_KINDS = frozenset({RtcpKind.RR, RtcpKind.REMB, RtcpKind.NACK, RtcpKind.PLI})

Parsed = Union[RtpPacket, RtcpMessage, Sequence[RtcpMessage], StunMessage]


def classify(packet: Parsed, ctx: StreamRegistry | None = None) -> PlaneRoute:
    ctx = ctx or StreamRegistry()
    if isinstance(packet, RtpPacket):
        ext = packet.extension(ctx.av1_ext_id)
        if ext is not None:
            try:
                if parse_av1_descriptor(ext, ctx.av1_ext_id).has_extended_structure:
                    return PlaneRoute.DATA_PLANE_WITH_COPY_TO_AGENT
            except WireError:
                log.warning("unparseable AV1 descriptor on ssrc %08x", packet.ssrc)
        return PlaneRoute.DATA_PLANE
    if isinstance(packet, RtcpMessage):
        packet = [packet]
    if isinstance(packet, StunMessage):
        return PlaneRoute.CONTROL_PLANE_ONLY
    if isinstance(packet, (list, tuple)) and packet and all(isinstance(m, RtcpMessage) for m in packet):
        # a compound packet needs an agent copy if any part of it does
        if any(m.kind in _COPY_KINDS for m in packet):
            return PlaneRoute.DATA_PLANE_WITH_COPY_TO_AGENT
        return PlaneRoute.DATA_PLANE
    log.warning("unclassifiable packet %r, sending to control plane", type(packet).__name__)
    return PlaneRoute.CONTROL_PLANE_ONLY


def parse_packet(data: bytes, ctx: StreamRegistry | None = None) -> Parsed:
    """Demultiplex raw UDP payload into STUN, RTCP or RTP and parse it."""
    ctx = ctx or StreamRegistry()
    if is_stun(data):
        return parse_stun(data)
    if is_rtcp(data):
        return parse_rtcp_compound(data)
    return parse_rtp(data, ctx.max_depth, ctx.audio_payload_types)


def classify_bytes(data: bytes, ctx: StreamRegistry | None = None) -> PlaneRoute:
    try:
        return classify(parse_packet(data, ctx), ctx)
    except WireError as exc:
        log.warning("unparseable packet (%s), sending to control plane", exc)
        return PlaneRoute.CONTROL_PLANE_ONLY
