"""AV1 dependency descriptor (mandatory fields plus a reduced structure).

Mandatory part, always the first three bytes::

     0                   1                   2
     0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3
    +-+-+-----------+-------------------------------+
    |S|E|template_id|         frame_number          |
    +-+-+-----------+-------------------------------+

Extended part. Full chain/DTI decoding is not modelled; when the structure
flag is set we carry only the template -> temporal layer table::

    +-+-------------+-----------+---+---------------+---------------+
    |T|  reserved   |tmpl_offset|res|  dt_count     | tmpl_count    |
    +-+-------------+-----------+---+---------------+---------------+
    | tid |  res    |  ... one byte per template, ids offset+i ...
    +-----+---------+
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Optional

from .errors import MalformedDescriptor, NotAv1Extension
from .rtp import ExtensionElement, Profile

DEFAULT_AV1_EXT_ID = 12

# the L1T3 structure used throughout: templates 0,1 base; 2 middle; 3,4 top
L1T3_TEMPLATE_TO_LAYER = {0: 0, 1: 0, 2: 1, 3: 2, 4: 2}

_MANDATORY = struct.Struct("!BH")


@dataclass(frozen=True)
class TemplateStructure:
    template_to_layer: Dict[int, int]
    decode_target_count: int = 3

    def layer_of(self, template_id: int) -> int:
        try:
            return self.template_to_layer[template_id]
        except KeyError:
            raise MalformedDescriptor(f"template {template_id} not in structure") from None


L1T3 = TemplateStructure(dict(L1T3_TEMPLATE_TO_LAYER), 3)


@dataclass(frozen=True)
class Av1Descriptor:
    template_id: int
    frame_number: int
    start_of_frame: bool = True
    end_of_frame: bool = True
    extended: Optional[TemplateStructure] = None

    @property
    def has_extended_structure(self) -> bool:
        return self.extended is not None


def encode_av1_descriptor(d: Av1Descriptor) -> bytes:
    if not 0 <= d.template_id < 64:
        raise MalformedDescriptor("template_id must fit in 6 bits")
    first = (0x80 if d.start_of_frame else 0) | (0x40 if d.end_of_frame else 0) | d.template_id
    out = bytearray(_MANDATORY.pack(first, d.frame_number & 0xFFFF))
    if d.extended is not None:
        ids = sorted(d.extended.template_to_layer)
        offset = ids[0] if ids else 0
        if ids != list(range(offset, offset + len(ids))):
            raise MalformedDescriptor("template ids must be contiguous")
        if offset >= 64 or len(ids) > 64:
            raise MalformedDescriptor("template table too large")
        out.append(0x80)
        out.append(offset << 2)
        out.append(d.extended.decode_target_count & 0xFF)
        out.append(len(ids))
        for tid in ids:
            layer = d.extended.template_to_layer[tid]
            if not 0 <= layer <= 3:
                raise MalformedDescriptor("temporal layer must fit in 2 bits")
            out.append(layer << 6)
    return bytes(out)


def parse_av1_descriptor(ext: ExtensionElement, ext_id: int = DEFAULT_AV1_EXT_ID) -> Av1Descriptor:
    if ext.is_padding or ext.id != ext_id:
        raise NotAv1Extension(f"extension id {ext.id} is not the AV1 descriptor id {ext_id}")
    data = ext.data
    if len(data) < 3:
        raise MalformedDescriptor(f"descriptor needs 3 bytes, got {len(data)}")
    first, frame_number = _MANDATORY.unpack_from(data)
    extended = None
    if len(data) > 3 and data[3] & 0x80:
        if len(data) < 7:
            raise MalformedDescriptor("structure header truncated")
        offset = data[4] >> 2
        dt_count = data[5]
        count = data[6]
        if len(data) < 7 + count:
            raise MalformedDescriptor("template table truncated")
        table = {offset + i: data[7 + i] >> 6 for i in range(count)}
        extended = TemplateStructure(table, dt_count)
    return Av1Descriptor(
        template_id=first & 0x3F,
        frame_number=frame_number,
        start_of_frame=bool(first & 0x80),
        end_of_frame=bool(first & 0x40),
        extended=extended,
    )


def av1_extension(d: Av1Descriptor, ext_id: int = DEFAULT_AV1_EXT_ID,
                  profile: Profile = Profile.ONE_BYTE) -> ExtensionElement:
    data = encode_av1_descriptor(d)
    return ExtensionElement(profile, ext_id, len(data), data)
