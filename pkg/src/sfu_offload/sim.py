"""Deterministic discrete-event simulation of offloaded meetings.

Traffic is synthetic but sized to a measured per-participant trace: about 232
video and 50 audio packets per second, plus SR/SDES, RR, RR+REMB and STUN at
fixed cadences. Every packet reaching the SFU is serialized and classified
from bytes. Media then goes through the replication engine, the per-stream
sequence rewriter and a lossy, reordering downlink before a receiver model
counts complete frames and NACKs.

Time is an integer microsecond clock and a run is a pure function of its
config. Retransmissions are not modelled: a NACK is counted, never answered.
"""

from __future__ import annotations

import bisect
import csv
import heapq
import io
import json
import logging
import zlib
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .control import Agent, Controller, make_offer, select_decode_target
from .feedback import DEFAULT_ALPHA, DEFAULT_PERIOD_US, route_rtcp
from .planner import CapacityParams, Mode, Quality, capacity
from .rewrite import DropRule, MediaPkt, StreamRewriter, receiver_nacks, unwrap
from .wire.av1 import L1T3, Av1Descriptor, TemplateStructure, av1_extension, parse_av1_descriptor
from .wire.classify import PlaneRoute, StreamRegistry, classify, parse_packet
from .wire.errors import WireError
from .wire.rtcp import ReportBlock, RtcpKind, RtcpMessage, SenderInfo, serialize_compound
from .wire.rtp import RtpPacket, build_rtp, serialize_rtp
from .wire.stun import StunKind, StunMessage, serialize_stun

log = logging.getLogger(__name__)

US = 1_000_000
VIDEO_PT = 45
AUDIO_PT = 111
METRICS_VERSION = 1


class ConfigError(ValueError):
    pass


def stream_seed(seed: int, *names: str) -> np.random.Generator:
    """Independent generator per named component, stable across runs."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF] + [zlib.crc32(n.encode()) for n in names])


# -- traffic pattern -----------------------------------------------------------

@dataclass
class SvcPattern:
    """L1T3 video plus audio.

    Packet counts per frame are not published; the defaults put about 232
    video packets per second on the wire, in line with the measured trace.
    """

    fps: int = 30
    cycle: Tuple[int, ...] = (0, 2, 1, 2)
    layer_templates: Dict[int, Tuple[int, ...]] = field(
        default_factory=lambda: {0: (0, 1), 1: (2,), 2: (3, 4)})
    # inclusive packet-count range per temporal layer
    packets_per_frame: Dict[int, Tuple[int, int]] = field(
        default_factory=lambda: {0: (10, 12), 1: (7, 9), 2: (5, 7)})
    video_bytes: Tuple[int, int] = (800, 1400)
    keyframe_interval_s: float = 120.0
    audio_ptime_ms: int = 20
    audio_bytes: Tuple[int, int] = (100, 160)

    def __post_init__(self):
        self.cycle = tuple(int(x) for x in self.cycle)
        if not self.cycle or 65536 % len(self.cycle):
            raise ConfigError("cycle length must divide 65536")
        if self.fps <= 0 or self.audio_ptime_ms <= 0:
            raise ConfigError("fps and audio_ptime_ms must be positive")
        for layer in set(self.cycle):
            if layer not in self.layer_templates or layer not in self.packets_per_frame:
                raise ConfigError(f"layer {layer} needs templates and a packet count range")
        for lo, hi in self.packets_per_frame.values():
            if not 1 <= lo <= hi:
                raise ConfigError("packet count ranges must satisfy 1 <= lo <= hi")
        for lo, hi in (self.video_bytes, self.audio_bytes):
            if not 0 < lo <= hi:
                raise ConfigError("byte ranges must satisfy 0 < lo <= hi")

    @property
    def frame_interval_us(self) -> int:
        return US // self.fps

    @property
    def keyframe_every(self) -> int:
        return max(1, int(round(self.keyframe_interval_s * self.fps)))

    def layer_of(self, idx: int) -> int:
        return self.cycle[idx % len(self.cycle)]

    def is_keyframe(self, idx: int) -> bool:
        return idx % self.keyframe_every == 0

    def template_of(self, idx: int) -> int:
        layer = self.layer_of(idx)
        templates = self.layer_templates[layer]
        if layer == 0:
            # first base template marks key frames
            return templates[0] if self.is_keyframe(idx) or len(templates) == 1 else templates[1]
        pos = idx % len(self.cycle)
        occurrence = sum(1 for j in range(pos) if self.cycle[j] == layer)
        return templates[occurrence % len(templates)]

    def structure(self) -> TemplateStructure:
        return TemplateStructure({t: layer for layer, ts in self.layer_templates.items() for t in ts}, 3)

    def dependency(self, idx: int) -> Optional[int]:
        """The frame this one references: the previous base frame for a base
        frame, else the latest earlier frame of a lower layer. None for key frames."""
        if self.is_keyframe(idx):
            return None
        layer = self.layer_of(idx)
        for j in range(idx - 1, max(-1, idx - 1 - 2 * len(self.cycle)), -1):
            lj = self.layer_of(j)
            if (layer == 0 and lj == 0) or (layer > 0 and lj < layer):
                return j
        return None

    def delivered_fps(self, dropped_layers: Iterable[int] = ()) -> float:
        dropped = set(dropped_layers)
        kept = sum(1 for layer in self.cycle if layer not in dropped)
        return self.fps * kept / len(self.cycle)

    def mean_packets_per_frame(self) -> float:
        return sum(sum(self.packets_per_frame[l]) / 2 for l in self.cycle) / len(self.cycle)

    def min_packets(self, layers: Iterable[int]) -> int:
        """Fewest packets any frame of these layers can have (1 if none)."""
        lows = [self.packets_per_frame[l][0] for l in set(layers) if l in self.packets_per_frame]
        return min(lows) if lows else 1

    def drop_rule(self, dropped_layers: Iterable[int] = (), frame0: int = 0) -> DropRule:
        dropped = frozenset(dropped_layers)
        return DropRule(self.cycle, dropped, self.min_packets(dropped), frame0 & 0xFFFF)

    def to_dict(self) -> dict:
        return {
            "fps": self.fps, "cycle": list(self.cycle),
            "layer_templates": {str(k): list(v) for k, v in sorted(self.layer_templates.items())},
            "packets_per_frame": {str(k): list(v) for k, v in sorted(self.packets_per_frame.items())},
            "video_bytes": list(self.video_bytes), "keyframe_interval_s": self.keyframe_interval_s,
            "audio_ptime_ms": self.audio_ptime_ms, "audio_bytes": list(self.audio_bytes),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SvcPattern":
        kw = dict(d)
        try:
            if "layer_templates" in kw:
                kw["layer_templates"] = {int(k): tuple(v) for k, v in kw["layer_templates"].items()}
            if "packets_per_frame" in kw:
                kw["packets_per_frame"] = {int(k): tuple(v) for k, v in kw["packets_per_frame"].items()}
            for key in ("video_bytes", "audio_bytes"):
                if key in kw:
                    kw[key] = tuple(kw[key])
            return cls(**kw)
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"bad pattern: {exc}") from None


@dataclass(frozen=True)
class Cadences:
    """Per-participant control traffic, packets per second."""

    sr_sdes: float = 5.75
    rr: float = 0.13
    rr_remb: float = 9.07
    stun: float = 1.15


@dataclass
class SimPacket:
    time_us: int
    kind: str  # video | audio | sr_sdes | rr | rr_remb | stun
    sender: str
    size: int
    ssrc: int = 0
    seq: int = 0
    index: int = 0  # position in this sender's stream of this kind
    frame_index: int = -1
    frame_number: int = 0
    template_id: Optional[int] = None
    layer: int = 0
    start: bool = True
    end: bool = True
    frame_size: int = 1
    extended: bool = False
    about: Optional[str] = None  # peer whose video an RR/REMB reports on
    remb_bps: int = 0


def _rate_times(rate: float, duration_us: int, rng: np.random.Generator) -> List[int]:
    """Periodic send times with a random phase and +-20% jitter."""
    if rate <= 0:
        return []
    period = US / rate
    n = int(duration_us / period) + 1
    phase = rng.uniform(0, period)
    jitter = rng.uniform(-0.2, 0.2, n) * period
    times = (phase + np.arange(n) * period + jitter).astype(np.int64)
    return sorted(int(t) for t in times if 0 <= t < duration_us)


def generate_stream(pattern: Optional[SvcPattern] = None, duration_s: float = 10.0, seed: int = 0,
                    pid: str = "p1", peers: Sequence[str] = (), cadences: Cadences = Cadences(),
                    ssrcs: Optional[Tuple[int, int]] = None) -> List[SimPacket]:
    """One participant's packets toward the SFU in send order.

    ``ssrcs`` is (video, audio). RR/REMB reports rotate over ``peers``.
    """
    pattern = pattern or SvcPattern()
    if duration_s <= 0:
        raise ConfigError("duration must be positive")
    rng = stream_seed(seed, "stream", pid)
    duration_us = int(round(duration_s * US))
    video_ssrc, audio_ssrc = ssrcs or (int(rng.integers(1, 2**31)), int(rng.integers(1, 2**31)))
    out: List[SimPacket] = []

    frame0 = int(rng.integers(0, 65536))
    seq = int(rng.integers(0, 65536))
    n_frames = -(-duration_us // pattern.frame_interval_us)
    vlo, vhi = pattern.video_bytes
    i = 0
    for k in range(n_frames):
        layer = pattern.layer_of(k)
        lo, hi = pattern.packets_per_frame[layer]
        size = int(rng.integers(lo, hi + 1))
        sizes = rng.integers(vlo, vhi + 1, size)
        t0 = k * pattern.frame_interval_us
        key = pattern.is_keyframe(k)
        tid = pattern.template_of(k)
        for j in range(size):
            out.append(SimPacket(
                t0 + 100 * j, "video", pid, int(sizes[j]), video_ssrc, seq & 0xFFFF, i, k, (frame0 + k) & 0xFFFF,
                tid, layer, j == 0, j == size - 1, size, extended=key and j == 0))
            seq += 1
            i += 1

    aseq = int(rng.integers(0, 65536))
    alo, ahi = pattern.audio_bytes
    step = pattern.audio_ptime_ms * 1000
    asizes = rng.integers(alo, ahi + 1, -(-duration_us // step))
    for i, t in enumerate(range(0, duration_us, step)):
        out.append(SimPacket(t + 50, "audio", pid, int(asizes[i]), audio_ssrc, (aseq + i) & 0xFFFF, i))

    for kind, rate in (("sr_sdes", cadences.sr_sdes), ("rr", cadences.rr), ("rr_remb", cadences.rr_remb),
                       ("stun", cadences.stun)):
        for i, t in enumerate(_rate_times(rate, duration_us, rng)):
            about = peers[i % len(peers)] if peers and kind in ("rr", "rr_remb") else None
            out.append(SimPacket(t, kind, pid, 0, video_ssrc, index=i, about=about))
    order = {"video": 0, "audio": 1, "sr_sdes": 2, "rr": 3, "rr_remb": 4, "stun": 5}
    out.sort(key=lambda p: (p.time_us, order[p.kind], p.index))
    return out


def _cname(pid: str) -> bytes:
    return f"{pid}@sim".encode()


def encode_packet(p: SimPacket, peer_ssrcs: Mapping[str, int] = {}) -> bytes:
    """Wire bytes for a generated packet; media is padded out to ``p.size``."""
    if p.kind == "video":
        ext = av1_extension(Av1Descriptor(p.template_id, p.frame_number, p.start, p.end,
                                          L1T3 if p.extended else None))
        hdr = 12 + 4 + (1 + ext.length + 3) // 4 * 4
        pkt = build_rtp(payload_type=VIDEO_PT, seq=p.seq, timestamp=p.frame_index * 3000, ssrc=p.ssrc,
                        marker=p.end, extensions=(ext,), payload=bytes(max(0, p.size - hdr)))
        return serialize_rtp(pkt)
    if p.kind == "audio":
        pkt = build_rtp(payload_type=AUDIO_PT, seq=p.seq, timestamp=p.index * 960, ssrc=p.ssrc,
                        payload=bytes(max(0, p.size - 12)))
        return serialize_rtp(pkt)
    sdes = RtcpMessage(RtcpKind.SDES, p.ssrc, sdes_chunks=((p.ssrc, ((1, _cname(p.sender)),)),))
    if p.kind == "sr_sdes":
        blocks = tuple(ReportBlock(s) for _, s in sorted(peer_ssrcs.items()))
        return serialize_compound([
            RtcpMessage(RtcpKind.SR, p.ssrc, report_blocks=blocks,
                        sender_info=SenderInfo(p.time_us, p.time_us // 11, p.index, 0)),
            sdes])
    target = peer_ssrcs.get(p.about, 0) if p.about else 0
    if p.kind == "rr":
        return serialize_compound([RtcpMessage(RtcpKind.RR, p.ssrc, report_blocks=(ReportBlock(target),))])
    if p.kind == "rr_remb":
        return serialize_compound([
            RtcpMessage(RtcpKind.RR, p.ssrc, report_blocks=(ReportBlock(target),)),
            sdes,
            RtcpMessage(RtcpKind.REMB, p.ssrc, remb_bps=max(1, int(p.remb_bps)), remb_ssrcs=(target,)),
        ])
    if p.kind == "stun":
        tid = zlib.crc32(f"{p.sender}/{p.index}".encode()).to_bytes(4, "big") * 3
        return serialize_stun(StunMessage(StunKind.BINDING_REQUEST, tid, username=f"sfu:{p.sender}"),
                              password=b"sim-ice-password", fingerprint=True)
    raise ValueError(f"unknown packet kind {p.kind!r}")


# -- channels ------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelModel:
    """Loss and reordering by packet count; ``capacity_bps`` is informational."""

    loss_rate: float = 0.0
    reorder_prob: float = 0.0
    reorder_depth: int = 0
    base_delay_us: int = 20_000
    capacity_bps: Optional[float] = None

    def __post_init__(self):
        if not 0 <= self.loss_rate <= 1 or not 0 <= self.reorder_prob <= 1:
            raise ConfigError("loss_rate and reorder_prob must be in [0, 1]")
        if self.reorder_depth < 0 or self.base_delay_us < 0:
            raise ConfigError("reorder_depth and base_delay_us must be >= 0")

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "ChannelModel":
        try:
            return cls(**(d or {}))
        except TypeError as exc:
            raise ConfigError(f"bad channel: {exc}") from None


class Link:
    """One-way channel. A reordered packet is held back behind 1..depth later
    survivors, so no packet is ever passed by more than ``depth`` others."""

    _BATCH = 4096

    def __init__(self, model: ChannelModel, rng: np.random.Generator):
        self.model = model
        self.rng = rng
        self._u = np.empty(0)
        self._pos = 0
        self._held: List[tuple] = []  # heap of (release key, tiebreak, item)
        self._n = 0  # survivors so far
        self.lost = 0

    def _draw(self) -> float:
        if self._pos >= len(self._u):
            self._u = self.rng.random(self._BATCH)
            self._pos = 0
        self._pos += 1
        return float(self._u[self._pos - 1])

    def send(self, item) -> list:
        """Items leaving the link now, oldest first; possibly none."""
        m = self.model
        if m.loss_rate and self._draw() < m.loss_rate:
            self.lost += 1
            return []
        n = self._n
        self._n += 1
        if m.reorder_prob and m.reorder_depth and self._draw() < m.reorder_prob:
            key = n + 1 + int(self._draw() * m.reorder_depth) + 0.5
            heapq.heappush(self._held, (key, n, item))
            now = []
        else:
            now = [item]
        out = []
        while self._held and self._held[0][0] < n:
            out.append(heapq.heappop(self._held)[2])
        return out + now

    def flush(self) -> list:
        out = [h[2] for h in sorted(self._held)]
        self._held = []
        return out


def apply_channel(channel: ChannelModel, packets: Sequence, seed: int = 0) -> List[int]:
    """Arrival schedule as indices into ``packets``, after loss and reordering."""
    link = Link(channel, stream_seed(seed, "channel"))
    order: List[int] = []
    for i in range(len(packets)):
        order.extend(link.send(i))
    order.extend(link.flush())
    return order


# -- decodability --------------------------------------------------------------

def undecodable_frames(delivered: Iterable[int], pattern: Optional[SvcPattern] = None) -> List[int]:
    """Delivered frames that cannot be decoded: their reference was not
    delivered or is itself undecodable. Only a key frame ends the damage."""
    pattern = pattern or SvcPattern()
    have = set(delivered)
    bad: List[int] = []
    broken = set()
    for f in sorted(have):
        d = pattern.dependency(f)
        if d is not None and d >= 0 and (d not in have or d in broken):
            bad.append(f)
            broken.add(f)
    return bad


def decodability_check(delivered, pattern: Optional[SvcPattern] = None) -> bool:
    """True iff no delivered frame references a frame that was not delivered.

    ``delivered`` is an iterable of frame indices, or a mapping from receiver
    (or stream) to such iterables. A frame suppressed together with everything
    that depends on it leaves nothing dangling, so layer suppression passes.
    """
    if isinstance(delivered, Mapping):
        return all(decodability_check(v, pattern) for v in delivered.values())
    return not undecodable_frames(delivered, pattern)


# -- configuration -------------------------------------------------------------

@dataclass
class ParticipantConfig:
    pid: str
    capacity_schedule: List[Tuple[float, float]] = field(default_factory=lambda: [(0.0, 5e6)])
    uplink: ChannelModel = field(default_factory=ChannelModel)
    downlink: ChannelModel = field(default_factory=ChannelModel)
    sends_video: bool = True
    sends_audio: bool = True

    def capacity_at(self, t_us: int) -> float:
        cap = self.capacity_schedule[0][1]
        for start_s, bps in self.capacity_schedule:
            if t_us >= start_s * US:
                cap = bps
        return cap


@dataclass
class MeetingConfig:
    meeting_id: str
    mode: Mode
    participants: List[ParticipantConfig]


@dataclass
class SimConfig:
    meetings: List[MeetingConfig]
    duration_s: float = 10.0
    seed: int = 0
    heuristic: str = "slr"
    filter_feedback: bool = True
    selection_period_ms: int = DEFAULT_PERIOD_US // 1000
    alpha: float = DEFAULT_ALPHA
    pattern: SvcPattern = field(default_factory=SvcPattern)
    cadences: Cadences = field(default_factory=Cadences)
    theta_low_bps: float = 500e3
    theta_high_bps: float = 1.5e6
    hysteresis: int = 3

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("scenario must be a JSON object")
        try:
            meetings = []
            seen = set()
            for m in d["meetings"]:
                parts = []
                for p in m["participants"]:
                    pid = str(p["id"])
                    if pid in seen:
                        raise ConfigError(f"participant id {pid} used twice")
                    seen.add(pid)
                    if "capacity_schedule" in p:
                        sched = sorted((float(a), float(b)) for a, b in p["capacity_schedule"])
                    else:
                        sched = [(0.0, float(p.get("capacity_bps", 5e6)))]
                    if not sched or any(b <= 0 for _, b in sched):
                        raise ConfigError(f"{pid}: capacities must be positive")
                    parts.append(ParticipantConfig(
                        pid, sched, ChannelModel.from_dict(p.get("uplink")), ChannelModel.from_dict(p.get("downlink")),
                        bool(p.get("sends_video", True)), bool(p.get("sends_audio", True))))
                if not parts:
                    raise ConfigError(f"meeting {m.get('id')} has no participants")
                meetings.append(MeetingConfig(str(m["id"]), Mode(m.get("mode", "nra")), parts))
            if not meetings:
                raise ConfigError("scenario has no meetings")
            if len({m.meeting_id for m in meetings}) != len(meetings):
                raise ConfigError("meeting ids must be unique")
            cfg = cls(
                meetings=meetings,
                duration_s=float(d.get("duration_s", 10.0)),
                seed=int(d.get("seed", 0)),
                heuristic=str(d.get("heuristic", "slr")),
                filter_feedback=bool(d.get("filter_feedback", True)),
                selection_period_ms=int(d.get("selection_period_ms", DEFAULT_PERIOD_US // 1000)),
                alpha=float(d.get("alpha", DEFAULT_ALPHA)),
                pattern=SvcPattern.from_dict(d.get("pattern", {})),
                cadences=Cadences(**d.get("cadences", {})),
                theta_low_bps=float(d.get("theta_low_bps", 500e3)),
                theta_high_bps=float(d.get("theta_high_bps", 1.5e6)),
                hysteresis=int(d.get("hysteresis", 3)),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad scenario: {exc!r}") from None
        if cfg.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if cfg.heuristic not in ("slm", "slr"):
            raise ConfigError("heuristic must be slm or slr")
        if cfg.selection_period_ms <= 0:
            raise ConfigError("selection_period_ms must be positive")
        if not 0 < cfg.alpha <= 1:
            raise ConfigError("alpha must be in (0, 1]")
        if not 0 < cfg.theta_low_bps <= cfg.theta_high_bps or cfg.hysteresis < 1:
            raise ConfigError("need 0 < theta_low <= theta_high and hysteresis >= 1")
        return cfg

    @classmethod
    def load(cls, path) -> "SimConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)


def bundled_scenario(name: str = "three_party") -> dict:
    """A scenario shipped with the package, as a dict."""
    res = resources.files("sfu_offload").joinpath("scenarios", f"{name}.json")
    if not res.is_file():
        raise ConfigError(f"no bundled scenario {name!r}")
    return json.loads(res.read_text())


# -- the run -------------------------------------------------------------------

_BOUNDARY, _SELECT, _PACKET = 0, 1, 2


@dataclass
class StreamStats:
    """One (sender, receiver) video stream."""

    sender: str
    receiver: str
    rewriter: StreamRewriter
    # (first frame index, dropped layers) in force from then on
    history: List[Tuple[int, frozenset]] = field(default_factory=lambda: [(0, frozenset())])
    level: Quality = Quality.HIGH
    suppressed: int = 0
    rewriter_dropped: int = 0
    downlink_lost: int = 0
    forwarded: int = 0
    arrivals: List[Tuple[int, int]] = field(default_factory=list)  # (time, rewritten seq)
    oracle_arrivals: List[int] = field(default_factory=list)  # packet indices
    frame_packets: Dict[int, int] = field(default_factory=dict)
    complete: Dict[int, int] = field(default_factory=dict)  # frame index -> completion time

    def dropped_at(self, frame_index: int) -> frozenset:
        starts = [s for s, _ in self.history]
        return self.history[bisect.bisect_right(starts, frame_index) - 1][1]


class _Run:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.pattern = cfg.pattern
        self.end_us = int(round(cfg.duration_s * US))
        self.registry = StreamRegistry()
        self.agent = Agent(alpha=cfg.alpha, policy=self._policy)
        self.controller = Controller()
        self.parts: Dict[str, ParticipantConfig] = {}
        self.meeting_of: Dict[str, str] = {}
        self.members: Dict[str, List[str]] = {}
        self.ssrcs: Dict[str, Tuple[int, int]] = {}
        self.owner_of_video: Dict[int, str] = {}
        self.frame0: Dict[str, int] = {}
        self.video_frames: Dict[str, np.ndarray] = {}  # per sender: frame index of each video packet
        self.uplink_lost_video: Dict[str, int] = {}
        self.sent_video: Dict[str, int] = {}
        self.streams: Dict[Tuple[str, str], StreamStats] = {}
        self.by_sender: Dict[str, List[StreamStats]] = {}
        self.downlinks: Dict[str, Link] = {}
        self.ghost_rng: Dict[str, np.random.Generator] = {}
        self.audio_delivered: Dict[Tuple[str, str], int] = {}
        self.plane_packets = {r.value: 0 for r in PlaneRoute}
        self.plane_bytes = {r.value: 0 for r in PlaneRoute}
        self.kind_packets: Dict[str, int] = {}
        self.kind_bytes: Dict[str, int] = {}
        self.parse_errors = 0
        self.dd_ingested = 0
        self.remb_seen: List[Tuple[int, str, int, float]] = []  # time, origin, stream ssrc, bps
        self.remb_delivered: List[Tuple[int, str, str, int, float]] = []  # time, origin, sender, ssrc, bps
        self.sr_delivered = 0
        self.sender_targets: Dict[str, List[Tuple[int, Optional[float]]]] = {}
        self.pending: Dict[str, Quality] = {}
        self.target_changes: List[dict] = []

    def _policy(self, curr, hist, new):
        c = self.cfg
        return select_decode_target(curr, hist, new, c.theta_low_bps, c.theta_high_bps, c.hysteresis)

    # -- setup --
    def setup(self) -> list:
        cfg = self.cfg
        events = []
        host = 0
        for m in cfg.meetings:
            pids = [p.pid for p in m.participants]
            self.members[m.meeting_id] = pids
            for p in m.participants:
                host += 1
                self.parts[p.pid] = p
                self.meeting_of[p.pid] = m.meeting_id
                rng = stream_seed(cfg.seed, "ssrc", p.pid)
                self.ssrcs[p.pid] = (int(rng.integers(1, 2**31)), int(rng.integers(1, 2**31)))
                self.owner_of_video[self.ssrcs[p.pid][0]] = p.pid
                v, a = self.ssrcs[p.pid]
                self.registry.ssrc_kinds[v] = "video"
                self.registry.ssrc_kinds[a] = "audio"
                address = (f"10.{host >> 16 & 255}.{host >> 8 & 255}.{host & 255}", 5000)
                offer = make_offer(p.pid, address, a if p.sends_audio else None, v if p.sends_video else None)
                self.controller.handle_join(m.meeting_id, p.pid, offer, mode=m.mode)
            for rank, p in enumerate(m.participants):
                events += self._uplink_events(p, [q for q in pids if q != p.pid], rank)
            for s in pids:
                if not self.parts[s].sends_video:
                    continue
                for r in pids:
                    if r != s:
                        st = StreamStats(s, r, StreamRewriter(self.pattern.drop_rule((), self.frame0[s]),
                                                              cfg.heuristic))
                        self.streams[(s, r)] = st
                        self.by_sender.setdefault(s, []).append(st)
        self.agent.drain(self.controller.channel)

        period = cfg.selection_period_ms * 1000
        events += [(t, _SELECT, 0, 0, None) for t in range(period, self.end_us + period, period)]
        # rule switches happen between frames, when no frame is in flight
        interval = self.pattern.frame_interval_us
        delay = max(p.uplink.base_delay_us for p in self.parts.values())
        for k in range(-(-self.end_us // interval)):
            events.append((k * interval + delay + interval // 2, _BOUNDARY, 0, k, None))
        events.sort(key=lambda e: e[:4])
        return events

    def _uplink_events(self, p: ParticipantConfig, peers: List[str], rank: int) -> list:
        cfg = self.cfg
        stream = generate_stream(cfg.pattern, cfg.duration_s, cfg.seed, p.pid, peers, cfg.cadences, self.ssrcs[p.pid])
        stream = [s for s in stream if (s.kind != "video" or p.sends_video) and (s.kind != "audio" or p.sends_audio)]
        video = [s for s in stream if s.kind == "video"]
        self.frame0[p.pid] = video[0].frame_number if video else 0
        self.video_frames[p.pid] = np.array([s.frame_index for s in video], dtype=np.int64)
        self.sent_video[p.pid] = len(video)
        for s in stream:
            if s.kind == "rr_remb":
                s.remb_bps = int(p.capacity_at(s.time_us))
        up = Link(p.uplink, stream_seed(cfg.seed, "uplink", p.pid))
        self.downlinks[p.pid] = Link(p.downlink, stream_seed(cfg.seed, "downlink", p.pid))
        self.ghost_rng[p.pid] = stream_seed(cfg.seed, "oracle-downlink", p.pid)
        events = []
        n = 0
        arrived_video = 0
        for s in stream:
            for item in up.send(s):
                events.append((s.time_us + p.uplink.base_delay_us, _PACKET, rank, n, item))
                arrived_video += item.kind == "video"
                n += 1
        for item in up.flush():
            events.append((self.end_us + p.uplink.base_delay_us, _PACKET, rank, n, item))
            arrived_video += item.kind == "video"
            n += 1
        self.uplink_lost_video[p.pid] = len(video) - arrived_video
        return events

    # -- per packet --
    def ingress(self, now: int, p: SimPacket) -> None:
        mid = self.meeting_of[p.sender]
        peers = {q: self.ssrcs[q][0] for q in self.members[mid] if q != p.sender}
        data = encode_packet(p, peers)
        try:
            parsed = parse_packet(data, self.registry)
            route = classify(parsed, self.registry)
        except WireError as exc:
            log.warning("unparseable %s packet from %s: %s", p.kind, p.sender, exc)
            self.parse_errors += 1
            parsed, route = None, PlaneRoute.CONTROL_PLANE_ONLY
        self.plane_packets[route.value] += 1
        self.plane_bytes[route.value] += len(data)
        self.kind_packets[p.kind] = self.kind_packets.get(p.kind, 0) + 1
        self.kind_bytes[p.kind] = self.kind_bytes.get(p.kind, 0) + len(data)
        if parsed is None:
            return
        if isinstance(parsed, RtpPacket):
            self._media(now, p, parsed, route)
        elif isinstance(parsed, StunMessage):
            self.agent.stun_respond(parsed, ("10.0.0.0", 0))
        else:
            self._rtcp(now, p, parsed)

    def _media(self, now: int, p: SimPacket, pkt: RtpPacket, route: PlaneRoute) -> None:
        mid = self.meeting_of[p.sender]
        if mid not in self.controller.planner.meetings:
            return
        if p.kind == "audio":
            for r in self.controller.planner.deliver(mid, p.sender, None):
                self._egress(now + self.parts[r].downlink.base_delay_us, r, self.downlinks[r].send(p))
            return
        dd = parse_av1_descriptor(pkt.extension(self.registry.av1_ext_id), self.registry.av1_ext_id)
        if route is PlaneRoute.DATA_PLANE_WITH_COPY_TO_AGENT and dd.has_extended_structure:
            self.agent.ingest_dependency_descriptor(pkt.ssrc, dd)
            self.dd_ingested += 1
        receivers = set(self.controller.planner.deliver(mid, p.sender, dd.template_id))
        mp = MediaPkt(pkt.seq, dd.frame_number, self.agent.structure_for(pkt.ssrc).layer_of(dd.template_id),
                      dd.start_of_frame, dd.end_of_frame)
        for st in self.by_sender.get(p.sender, ()):
            if st.receiver not in receivers:
                st.suppressed += 1
                continue
            action = st.rewriter.process(mp)
            down = self.parts[st.receiver].downlink
            if not action.forward:
                st.rewriter_dropped += 1
                # the ideal rewriter would have sent it; charge the drop
                if self.ghost_rng[st.receiver].random() >= down.loss_rate:
                    st.oracle_arrivals.append(p.index)
                continue
            link = self.downlinks[st.receiver]
            before = link.lost
            self._egress(now + down.base_delay_us, st.receiver, link.send((p, action.new_seq)))
            st.downlink_lost += link.lost - before

    def _egress(self, t: int, r: str, items: list) -> None:
        """Hand whatever left receiver r's downlink to the receiver model."""
        for item in items:
            if isinstance(item, tuple):
                self._arrive(t, self.streams[(item[0].sender, r)], item)
            else:
                self.audio_delivered[(item.sender, r)] = self.audio_delivered.get((item.sender, r), 0) + 1

    def _arrive(self, t: int, st: StreamStats, item) -> None:
        p, new_seq = item
        st.forwarded += 1
        st.arrivals.append((t, new_seq))
        st.oracle_arrivals.append(p.index)
        got = st.frame_packets.get(p.frame_index, 0) + 1
        st.frame_packets[p.frame_index] = got
        if got == p.frame_size:
            st.complete[p.frame_index] = t

    def _rtcp(self, now: int, p: SimPacket, msgs) -> None:
        mid = self.meeting_of[p.sender]
        state = self.controller.meetings[mid]
        fb = self.agent.feedback
        for m in msgs:
            route = route_rtcp(m, p.sender, fb, state.directory, self.cfg.filter_feedback)
            if m.kind is RtcpKind.REMB and m.remb_ssrcs:
                ssrc = m.remb_ssrcs[0]
                if ssrc in self.owner_of_video and self.owner_of_video[ssrc] != p.sender:
                    self.remb_seen.append((now, p.sender, ssrc, float(m.remb_bps)))
                    est = fb.update_estimate(ssrc, p.sender, m.remb_bps, now)
                    self._estimate(mid, p.sender, est)
                for dest in route.destinations:
                    self.remb_delivered.append((now, p.sender, dest, ssrc, float(m.remb_bps)))
            elif m.kind is RtcpKind.SR:
                self.sr_delivered += len(route.destinations)

    def _estimate(self, mid: str, receiver: str, bps: float) -> None:
        new = self.agent.observe_estimate(receiver, bps)
        if new is None:
            return
        plan = self.controller.meetings[mid].plan()
        if plan is not None and plan.mode is not Mode.NRA:
            self.pending[receiver] = new

    # -- timers --
    def boundary(self, now: int, k: int) -> None:
        """Apply pending decode targets before frame k + 1 goes out."""
        if not self.pending:
            return
        nxt = k + 1
        base_next = self.pattern.layer_of(nxt) == 0
        for receiver in sorted(self.pending):
            level = self.pending[receiver]
            mid = self.meeting_of[receiver]
            cur = self.controller.meetings[mid].qualities.get(receiver, Quality.HIGH)
            if level == cur:
                del self.pending[receiver]
            elif level < cur or base_next:
                # going up waits for a base frame so every kept frame has its reference
                self._set_level(now, mid, receiver, level, nxt)
                del self.pending[receiver]

    def _set_level(self, now: int, mid: str, receiver: str, level: Quality, first_frame: int) -> None:
        self.controller.set_quality(mid, receiver, level)
        self.agent.drain(self.controller.channel)
        self.target_changes.append({"time_us": now, "receiver": receiver, "level": level.name.lower(),
                                    "first_frame": first_frame})
        for (s, r), st in self.streams.items():
            if r != receiver:
                continue
            vssrc = self.ssrcs[s][0]
            structure = self.agent.structure_for(vssrc)
            layers = frozenset(structure.layer_of(t) for t in self.agent.dropped_for(vssrc, level))
            old = st.history[-1][1]
            st.rewriter.set_rule(st.rewriter.rule.switch_to(
                layers, self.frame0[s] + first_frame, self.pattern.min_packets(layers | old)))
            st.history.append((first_frame, layers))
            st.level = level

    def select(self, now: int) -> None:
        self.agent.feedback.reselect_all(now)
        # sender-side congestion target: min over the freshest REMB per origin
        latest: Dict[str, Dict[str, float]] = {}
        lo = bisect.bisect_left(self.remb_delivered, (now - US,))
        for _, origin, sender, _, bps in self.remb_delivered[lo:]:
            latest.setdefault(sender, {})[origin] = bps
        for s in self.parts:
            seen = latest.get(s)
            self.sender_targets.setdefault(s, []).append((now, min(seen.values()) if seen else None))

    def finish(self) -> None:
        for r, link in self.downlinks.items():
            self._egress(self.end_us + 2 * self.parts[r].downlink.base_delay_us, r, link.flush())

    def run(self) -> "SimMetrics":
        for now, kind, _, n, item in self.setup():
            if kind == _PACKET:
                self.ingress(now, item)
            elif kind == _SELECT:
                self.select(now)
            else:
                self.boundary(now, n)
        self.finish()
        return _collect(self)


def run_meeting(config, seed: Optional[int] = None, return_run: bool = False):
    """Run a scenario (dict, path or SimConfig) and return its SimMetrics.

    With ``return_run`` the run object comes back too, for checks that need
    the per-event logs.
    """
    if isinstance(config, SimConfig):
        cfg = config
    elif isinstance(config, Mapping):
        cfg = SimConfig.from_dict(config)
    else:
        cfg = SimConfig.load(config)
    if seed is not None:
        cfg = SimConfig(**{**cfg.__dict__, "seed": int(seed)})
    run = _Run(cfg)
    metrics = run.run()
    return (metrics, run) if return_run else metrics


# -- metrics -------------------------------------------------------------------

def _rounded(x, nd: int = 6):
    if isinstance(x, float):
        return round(x, nd)
    if isinstance(x, dict):
        return {k: _rounded(v, nd) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_rounded(v, nd) for v in x]
    return x


def _pct(counts: Mapping[str, int]) -> Dict[str, float]:
    total = sum(counts.values())
    return {k: (100.0 * v / total if total else 0.0) for k, v in counts.items()}


def nack_times(arrivals: Sequence[Tuple[int, int]]) -> List[int]:
    """When each receiver NACK fires: at the first arrival above the hole.

    One entry per element of ``receiver_nacks`` on the same sequence numbers.
    """
    if not arrivals:
        return []
    ext = unwrap([s for _, s in arrivals])
    times = [t for t, _ in arrivals]
    order = sorted(range(len(ext)), key=lambda i: ext[i])
    sorted_ext = [ext[i] for i in order]
    suffix_min = [0] * len(order)
    best = None
    for j in range(len(order) - 1, -1, -1):
        t = times[order[j]]
        best = t if best is None else min(best, t)
        suffix_min[j] = best
    seen = set(ext)
    return [suffix_min[bisect.bisect_right(sorted_ext, s)]
            for s in range(sorted_ext[0] + 1, sorted_ext[-1]) if s not in seen]


@dataclass
class SimMetrics:
    data: dict

    @property
    def data_plane_packet_pct(self) -> float:
        return self.data["plane_split"]["data_plane_packet_pct"]

    @property
    def data_plane_byte_pct(self) -> float:
        return self.data["plane_split"]["data_plane_byte_pct"]

    def fps(self, receiver: str, sender: str) -> List[int]:
        return self.data["receivers"][receiver][sender]["fps_series"]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Per-second time series: fps and NACKs per (receiver, sender)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_s", "receiver", "sender", "fps", "nacks"])
        for r in sorted(self.data["receivers"]):
            for s in sorted(self.data["receivers"][r]):
                row = self.data["receivers"][r][s]
                for t, (fps, nacks) in enumerate(zip(row["fps_series"], row["nack_series"])):
                    w.writerow([t, r, s, fps, nacks])
        return buf.getvalue()

    def selection_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_us", "stream", "old", "new"])
        for c in self.data["feedback"]["selection_changes"]:
            w.writerow([c["time_us"], c["stream"], c["old"] or "", c["new"]])
        return buf.getvalue()


def _series(times: Iterable[int], bins: int) -> List[int]:
    out = [0] * bins
    for t in times:
        b = int(t // US)
        if 0 <= b < bins:
            out[b] += 1
    return out


def _collect(run: _Run) -> SimMetrics:
    cfg = run.cfg
    bins = int(np.ceil(cfg.duration_s))
    receivers: Dict[str, Dict[str, dict]] = {}
    streams = []
    total_h = total_o = total_fwd = 0
    all_decodable = True
    for (s, r), st in sorted(run.streams.items()):
        frames = run.video_frames[s]
        supp = np.fromiter((run.pattern.layer_of(int(f)) in st.dropped_at(int(f)) for f in frames),
                           dtype=bool, count=len(frames))
        ideal = (np.arange(len(frames)) - np.concatenate(([0], np.cumsum(supp)[:-1]))) & 0xFFFF
        nh = len(receiver_nacks([v for _, v in st.arrivals]))
        no = len(receiver_nacks([int(ideal[i]) for i in st.oracle_arrivals]))
        total_h += nh
        total_o += no
        total_fwd += st.forwarded
        series = _series(st.complete.values(), bins)
        bad = undecodable_frames(st.complete, run.pattern)
        all_decodable &= not bad
        inner = series[1:-1] if len(series) > 2 else series
        receivers.setdefault(r, {})[s] = {
            "fps_series": series,
            "nack_series": _series(nack_times(st.arrivals), bins),
            "mean_fps": float(np.mean(inner)) if inner else 0.0,
            "frames_complete": len(st.complete),
            "forwarded": st.forwarded,
            "nacks": nh,
            "oracle_nacks": no,
            "extra_retransmission_fraction": (nh - no) / st.forwarded if st.forwarded else 0.0,
            "final_level": st.level.name.lower(),
            "decodable": not bad,
            "undecodable_frames": len(bad),
            "audio_delivered": run.audio_delivered.get((s, r), 0),
        }
        sent = run.sent_video[s]
        up_lost = run.uplink_lost_video[s]
        streams.append({
            "sender": s, "receiver": r, "packets_in": sent, "uplink_lost": up_lost,
            "downlink_lost": st.downlink_lost, "suppressed": st.suppressed,
            "rewriter_dropped": st.rewriter_dropped, "forwarded": st.forwarded,
            "conserved": sent == st.forwarded + up_lost + st.downlink_lost + st.suppressed + st.rewriter_dropped,
        })
    plane_pkt = _pct(run.plane_packets)
    plane_byte = _pct(run.plane_bytes)
    total_packets = sum(run.kind_packets.values())
    total_bytes = sum(run.kind_bytes.values())
    rtp = run.kind_packets.get("video", 0) + run.kind_packets.get("audio", 0)
    fb = run.agent.feedback
    targets = {}
    for s, series in sorted(run.sender_targets.items()):
        vals = [v for _, v in series if v is not None]
        targets[s] = {
            "series": [[t / US, v] for t, v in series],
            "min_bps": min(vals) if vals else None,
            "final_bps": vals[-1] if vals else None,
        }
    n_parts = {m.meeting_id: len(m.participants) for m in cfg.meetings}
    data = {
        "version": METRICS_VERSION,
        "config": {"duration_s": cfg.duration_s, "seed": cfg.seed, "heuristic": cfg.heuristic,
                   "filter_feedback": cfg.filter_feedback, "selection_period_ms": cfg.selection_period_ms,
                   "alpha": cfg.alpha, "meetings": {m.meeting_id: m.mode.value for m in cfg.meetings}},
        "plane_split": {
            "packets": dict(run.plane_packets), "bytes": dict(run.plane_bytes),
            "packet_pct": plane_pkt, "byte_pct": plane_byte,
            "data_plane_packet_pct": plane_pkt[PlaneRoute.DATA_PLANE.value],
            "data_plane_byte_pct": plane_byte[PlaneRoute.DATA_PLANE.value],
        },
        "traffic": {
            "packets_by_kind": dict(sorted(run.kind_packets.items())),
            "bytes_by_kind": dict(sorted(run.kind_bytes.items())),
            "rtp_packet_pct": 100.0 * rtp / total_packets if total_packets else 0.0,
            "video_byte_pct": 100.0 * run.kind_bytes.get("video", 0) / total_bytes if total_bytes else 0.0,
            "rtp_pps_per_participant": rtp / cfg.duration_s / max(1, len(run.parts)),
        },
        "receivers": receivers,
        "streams": streams,
        "conservation_ok": all(x["conserved"] for x in streams),
        "decodable": all_decodable,
        "retransmission": {
            "nacks": total_h, "oracle_nacks": total_o, "forwarded": total_fwd,
            "extra_fraction": (total_h - total_o) / total_fwd if total_fwd else 0.0,
        },
        "feedback": {
            "filtered": cfg.filter_feedback,
            "remb_received": len(run.remb_seen),
            "remb_delivered": len(run.remb_delivered),
            "sr_copies_delivered": run.sr_delivered,
            "churn": fb.churn,
            "selection_changes": [c.to_dict() for c in fb.changes],
            "sender_target_bps": targets,
        },
        "rate_adaptation": {"target_changes": run.target_changes},
        "control": {
            "stun_answered": run.agent.stun_answered,
            "dd_structures_ingested": run.dd_ingested,
            "agent_rule_installs": run.agent.rule_installs,
            "parse_errors": run.parse_errors,
        },
        "capacity": {
            mid: {mode.value: capacity(mode, CapacityParams(participants=n))
                  for mode in (Mode.NRA, Mode.RA_R, Mode.RA_SR)}
            for mid, n in sorted(n_parts.items())
        },
    }
    return SimMetrics(_rounded(data))


# -- rewrite benchmark ---------------------------------------------------------

@dataclass(frozen=True)
class BenchResult:
    heuristic: str
    loss: float
    reorder: float
    seed: int
    packets: int
    forwarded: int
    nacks: int
    oracle_nacks: int

    @property
    def overhead(self) -> float:
        return (self.nacks - self.oracle_nacks) / self.forwarded if self.forwarded else 0.0


def rewrite_bench(seed: int = 0, loss: float = 0.1, heuristic: str = "slr", packets: int = 100_000,
                  reorder: float = 0.0, depth: int = 4, dropped_layers: Iterable[int] = (2,),
                  pattern: Optional[SvcPattern] = None) -> BenchResult:
    """Extra NACKs of a rewriter against the ideal one, on a single stream.

    ``packets`` counts the sender's packets before suppression. Surviving
    packets are lost with probability ``loss`` and, with probability
    ``reorder``, pushed back behind 1..depth later ones. Packets the rewriter
    drops still count as arrivals for the ideal receiver.
    """
    if not 0 <= loss <= 1 or not 0 <= reorder <= 1 or depth < 0 or packets < 0:
        raise ValueError("need loss and reorder in [0, 1], depth >= 0, packets >= 0")
    if heuristic not in ("slm", "slr"):
        raise ValueError("heuristic must be slm or slr")
    pattern = pattern or SvcPattern()
    rng = stream_seed(seed, "bench")
    dropped = frozenset(dropped_layers)
    frame0 = int(rng.integers(0, 65536))
    seq0 = int(rng.integers(0, 65536))
    rule = pattern.drop_rule(dropped, frame0)

    pkts: List[MediaPkt] = []
    k = 0
    while len(pkts) < packets:
        layer = pattern.layer_of(k)
        lo, hi = pattern.packets_per_frame[layer]
        size = int(rng.integers(lo, hi + 1))
        f = (frame0 + k) & 0xFFFF
        for j in range(size):
            pkts.append(MediaPkt((seq0 + len(pkts)) & 0xFFFF, f, layer, j == 0, j == size - 1))
        k += 1
    del pkts[packets:]

    supp = np.array([p.layer in dropped for p in pkts], dtype=bool)
    survivors = np.flatnonzero(~supp & (rng.random(len(pkts)) >= loss))
    keys = np.arange(len(survivors), dtype=float)
    if reorder and depth:
        moved = rng.random(len(survivors)) < reorder
        keys[moved] += rng.integers(1, depth + 1, int(moved.sum())) + 0.5
    arrivals = survivors[np.argsort(keys, kind="stable")].tolist()

    ideal = (np.arange(len(pkts)) - np.concatenate(([0], np.cumsum(supp)[:-1]))) & 0xFFFF
    rw = StreamRewriter(rule, heuristic)
    out = []
    for i in arrivals:
        a = rw.process(pkts[i])
        if a.forward:
            out.append(a.new_seq)
    oracle = [int(ideal[i]) for i in arrivals]
    return BenchResult(heuristic, loss, reorder, seed, packets, len(out), len(receiver_nacks(out)),
                       len(receiver_nacks(oracle)))
