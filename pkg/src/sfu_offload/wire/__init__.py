"""Wire formats: RTP with header extensions, AV1 descriptor, RTCP, STUN."""

from .av1 import (
    DEFAULT_AV1_EXT_ID,
    L1T3,
    L1T3_TEMPLATE_TO_LAYER,
    Av1Descriptor,
    TemplateStructure,
    av1_extension,
    encode_av1_descriptor,
    parse_av1_descriptor,
)
from .classify import PlaneRoute, StreamRegistry, classify, classify_bytes, parse_packet
from .errors import (
    DepthExceeded,
    FieldOverflow,
    MalformedDescriptor,
    MalformedExtension,
    MalformedStun,
    NotAv1Extension,
    TruncatedCompound,
    TruncatedHeader,
    UnknownPacketType,
    WireError,
)
from .rtcp import (
    ReportBlock,
    RtcpKind,
    RtcpMessage,
    SenderInfo,
    parse_rtcp_compound,
    serialize_compound,
    serialize_rtcp,
)
from .rtp import (
    DEFAULT_MAX_DEPTH,
    ExtensionElement,
    MediaKind,
    Profile,
    RtpPacket,
    build_rtp,
    parse_rtp,
    rewrite_seq,
    serialize_rtp,
)
from .describe import describe, describe_bytes
from .stun import StunKind, StunMessage, binding_response, parse_stun, serialize_stun

__all__ = [name for name in dir() if not name.startswith("_")]
