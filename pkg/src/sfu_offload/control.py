"""Two-tier control plane: a central controller and a per-switch agent.

The controller owns signaling and meeting state. It rewrites SDP candidates so
every participant sees the SFU as its only peer, plans replication trees and
hands rule updates to the agent. The agent answers STUN, ingests dependency
descriptor structures, tracks bandwidth feedback and picks decode targets.
The two talk over :class:`Channel`, which carries plain JSON-able dicts.
"""

from __future__ import annotations

import collections
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

from .feedback import DEFAULT_ALPHA, Directory, FeedbackState
from .planner import MeetingPlan, Mode, Participant, Planner, PlanError, Quality, dropped_templates
from .pre import PreError
from .rewrite import IndexExhausted, RewriteTable, StreamKey
from .wire.av1 import L1T3, Av1Descriptor, TemplateStructure
from .wire.errors import MalformedDescriptor, MalformedStun
from .wire.stun import StunKind, StunMessage, binding_response

log = logging.getLogger(__name__)

Address = Tuple[str, int]

THETA_LOW_BPS = 500e3
THETA_HIGH_BPS = 1.5e6
HYSTERESIS = 3


class ControlError(Exception):
    pass


class DuplicateParticipant(ControlError):
    pass


class UnknownParticipant(ControlError, KeyError):
    pass


class UnknownMeeting(ControlError, KeyError):
    pass


class CapacityExceeded(ControlError):
    pass


# -- SDP -----------------------------------------------------------------------

@dataclass(frozen=True)
class MediaSection:
    kind: str
    ssrc: int
    codec: str
    candidates: Tuple[Address, ...]

    def __post_init__(self):
        if not self.candidates:
            raise ValueError(f"{self.kind} section for ssrc {self.ssrc} has no candidates")


@dataclass(frozen=True)
class SdpMessage:
    """The subset of an SDP offer/answer the SFU has to rewrite."""

    session_id: str
    media_sections: Tuple[MediaSection, ...]

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "media": [{"kind": m.kind, "ssrc": m.ssrc, "codec": m.codec,
                       "candidates": [list(c) for c in m.candidates]} for m in self.media_sections],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SdpMessage":
        return cls(d["session_id"], tuple(
            MediaSection(m["kind"], int(m["ssrc"]), m.get("codec", ""),
                         tuple((str(ip), int(port)) for ip, port in m["candidates"]))
            for m in d["media"]))

    @classmethod
    def from_json(cls, text: str) -> "SdpMessage":
        return cls.from_dict(json.loads(text))

    def with_candidates(self, candidates: Sequence[Address]) -> "SdpMessage":
        return SdpMessage(self.session_id, tuple(
            MediaSection(m.kind, m.ssrc, m.codec, tuple(candidates)) for m in self.media_sections))

    @property
    def address(self) -> Address:
        return self.media_sections[0].candidates[0]


def make_offer(session_id: str, address: Address, audio_ssrc: Optional[int], video_ssrc: Optional[int]) -> SdpMessage:
    sections = []
    if audio_ssrc is not None:
        sections.append(MediaSection("audio", audio_ssrc, "opus", (address,)))
    if video_ssrc is not None:
        sections.append(MediaSection("video", video_ssrc, "AV1", (address,)))
    return SdpMessage(session_id, tuple(sections))


# -- controller <-> agent channel ---------------------------------------------

class Channel:
    """In-process message queue; messages are JSON-able dicts."""

    def __init__(self):
        self._queue: Deque[dict] = collections.deque()
        self.sent = 0

    def send(self, msg: dict) -> None:
        json.dumps(msg)  # the schema must survive a real transport
        self._queue.append(msg)
        self.sent += 1

    def drain(self) -> List[dict]:
        out = list(self._queue)
        self._queue.clear()
        return out

    def __len__(self) -> int:
        return len(self._queue)


# -- decode target policy ------------------------------------------------------

def select_decode_target(curr: Quality, est_hist: Sequence[float], new_est: float,
                         theta_low: float = THETA_LOW_BPS, theta_high: float = THETA_HIGH_BPS,
                         h: int = HYSTERESIS) -> Quality:
    """Fixed thresholds; downgrades are immediate, upgrades need h clear estimates.

    ``est_hist`` holds earlier estimates, oldest first, without ``new_est``.
    """
    if new_est <= 0:
        raise ValueError("estimate must be positive")
    curr = Quality.parse(curr)

    def level(x: float) -> Quality:
        if x < theta_low:
            return Quality.LOW
        if x < theta_high:
            return Quality.MID
        return Quality.HIGH

    want = level(new_est)
    if want <= curr:
        return want
    recent = list(est_hist)[-(h - 1):] if h > 1 else []
    if len(recent) < h - 1:
        return curr
    # move up only as far as every one of the last h estimates allows
    return max(curr, min(level(x) for x in recent + [new_est]))


DecodeTargetPolicy = Callable[[Quality, Sequence[float], float], Quality]


# -- agent ---------------------------------------------------------------------

@dataclass
class Agent:
    """Switch agent: everything that needs software but must not block media."""

    alpha: float = DEFAULT_ALPHA
    policy: DecodeTargetPolicy = select_decode_target
    history: int = 8
    feedback: FeedbackState = field(init=False)
    structures: Dict[int, TemplateStructure] = field(default_factory=dict)
    targets: Dict[str, Quality] = field(default_factory=dict)
    estimates: Dict[str, Deque[float]] = field(default_factory=dict)
    rules: Dict[str, dict] = field(default_factory=dict)
    rule_installs: int = 0
    stun_answered: int = 0

    def __post_init__(self):
        self.feedback = FeedbackState(alpha=self.alpha)

    def stun_respond(self, req: StunMessage, src: Address) -> StunMessage:
        if req.kind is not StunKind.BINDING_REQUEST:
            raise MalformedStun("only binding requests are answered")
        self.stun_answered += 1
        return binding_response(req, src)

    def ingest_dependency_descriptor(self, stream: int, dd: Av1Descriptor) -> Tuple[TemplateStructure, bool]:
        """Store a stream's template structure; returns (structure, changed)."""
        if not dd.has_extended_structure:
            raise MalformedDescriptor("descriptor carries no template structure")
        new = dd.extended
        old = self.structures.get(stream)
        if old is not None and old.template_to_layer == new.template_to_layer:
            return old, False
        self.structures[stream] = new
        self.rule_installs += 1
        return new, True

    def structure_for(self, stream: int) -> TemplateStructure:
        return self.structures.get(stream, L1T3)

    def dropped_for(self, stream: int, level: Quality) -> frozenset:
        return dropped_templates(level, self.structure_for(stream))

    def observe_estimate(self, receiver: str, bps: float) -> Optional[Quality]:
        """Feed one receiver estimate; returns the new target if it changed."""
        hist = self.estimates.setdefault(receiver, collections.deque(maxlen=self.history))
        curr = self.targets.get(receiver, Quality.HIGH)
        new = Quality.parse(self.policy(curr, list(hist), bps))
        hist.append(bps)
        if new != curr:
            self.targets[receiver] = new
            return new
        self.targets.setdefault(receiver, curr)
        return None

    def apply(self, msg: dict) -> None:
        """Consume a rule update from the controller."""
        kind = msg.get("type")
        if kind == "rules":
            self.rules[msg["meeting_id"]] = msg
            self.rule_installs += 1
        elif kind == "meeting_removed":
            self.rules.pop(msg["meeting_id"], None)
        elif kind == "participant_left":
            self.feedback.forget_receiver(msg["pid"])
            self.targets.pop(msg["pid"], None)
            self.estimates.pop(msg["pid"], None)
        else:
            log.warning("agent ignoring message type %r", kind)

    def drain(self, channel: Channel) -> int:
        msgs = channel.drain()
        for m in msgs:
            self.apply(m)
        return len(msgs)


# -- controller ----------------------------------------------------------------

@dataclass
class ParticipantInfo:
    pid: str
    address: Address
    egress_port: int
    ssrcs: Dict[str, int]


@dataclass
class MeetingState:
    meeting_id: str
    mode: Mode = Mode.NRA
    participants: Dict[str, ParticipantInfo] = field(default_factory=dict)
    qualities: Dict[str, Quality] = field(default_factory=dict)
    streams: Dict[StreamKey, int] = field(default_factory=dict)
    directory: Directory = field(default_factory=Directory)

    def plan(self) -> Optional[MeetingPlan]:
        n = len(self.participants)
        if n < 2:
            return None
        parts = [Participant(p.pid, p.egress_port, "video" in p.ssrcs, "audio" in p.ssrcs)
                 for p in self.participants.values()]
        if n == 2:
            mode = Mode.TWO_PARTY
        else:
            mode = self.mode
        rq = {}
        if mode in (Mode.RA_R, Mode.TWO_PARTY):
            rq = {pid: self.qualities.get(pid, Quality.HIGH) for pid in self.participants}
        elif mode is Mode.RA_SR:
            rq = {(r, s): self.qualities.get(r, Quality.HIGH)
                  for r in self.participants for s in self.participants if r != s}
        return MeetingPlan(self.meeting_id, parts, mode, 3, rq)


class Controller:
    """Signaling front end; owns the planner and the rewrite index table."""

    def __init__(self, planner: Optional[Planner] = None, channel: Optional[Channel] = None,
                 sfu_address: Address = ("192.0.2.1", 3478), rewrite_slots: int = 1 << 16,
                 default_mode: Mode = Mode.NRA):
        self.planner = planner or Planner()
        self.channel = channel or Channel()
        self.sfu_address = sfu_address
        self.rewrite = RewriteTable(rewrite_slots)
        self.default_mode = Mode(default_mode)
        self.meetings: Dict[str, MeetingState] = {}
        self._busy = False
        self._deferred: List[Tuple[Callable, tuple]] = []
        self._next_port = 1

    # serialize operations that arrive while a migration is running
    def _serialized(self, fn, *args):
        if self._busy:
            self._deferred.append((fn, args))
            return None
        self._busy = True
        try:
            result = fn(*args)
        finally:
            self._busy = False
        while self._deferred:
            dfn, dargs = self._deferred.pop(0)
            self._serialized(dfn, *dargs)
        return result

    def meeting(self, meeting_id: str) -> MeetingState:
        try:
            return self.meetings[meeting_id]
        except KeyError:
            raise UnknownMeeting(meeting_id) from None

    def _replan(self, state: MeetingState, on_step=None) -> None:
        """Bring the planner in line with the meeting; atomic on failure."""
        plan = state.plan()
        mid = state.meeting_id
        installed = mid in self.planner.meetings
        try:
            if plan is None:
                if installed:
                    self.planner.remove(mid)
            elif not installed:
                self.planner.install(plan)
            else:
                self.planner.migrate(mid, new_plan=plan, on_step=on_step)
        except (PreError, PlanError) as exc:
            raise CapacityExceeded(str(exc)) from exc

    def _stream_keys(self, state: MeetingState, pid: str) -> List[StreamKey]:
        me = state.participants[pid]
        keys = []
        for other in state.participants.values():
            if other.pid == pid:
                continue
            keys += [StreamKey(me.address, other.address, s) for s in me.ssrcs.values()]
            keys += [StreamKey(other.address, me.address, s) for s in other.ssrcs.values()]
        return keys

    def handle_join(self, meeting_id: str, pid: str, offer: SdpMessage, egress_port: Optional[int] = None,
                    mode: Optional[Mode] = None, on_step=None) -> Optional[SdpMessage]:
        return self._serialized(self._join, meeting_id, pid, offer, egress_port, mode, on_step)

    def _join(self, meeting_id, pid, offer, egress_port, mode, on_step):
        created = meeting_id not in self.meetings
        state = self.meetings.get(meeting_id) or MeetingState(meeting_id, Mode(mode or self.default_mode))
        if pid in state.participants:
            raise DuplicateParticipant(f"{pid} already in {meeting_id}")
        if egress_port is None:
            egress_port = self._next_port
            self._next_port += 1
        info = ParticipantInfo(pid, offer.address, egress_port, {m.kind: m.ssrc for m in offer.media_sections})
        state.participants[pid] = info
        try:
            self._replan(state, on_step)
        except CapacityExceeded:
            del state.participants[pid]
            raise
        allocated = []
        try:
            for key in self._stream_keys(state, pid):
                state.streams[key] = self.rewrite.allocate(key)
                allocated.append(key)
        except IndexExhausted as exc:
            for key in allocated:
                self.rewrite.free(key)
                state.streams.pop(key, None)
            del state.participants[pid]
            self._replan(state)
            raise CapacityExceeded(str(exc)) from exc
        if created:
            self.meetings[meeting_id] = state
        state.directory.add(pid, info.ssrcs.values())
        self._publish(state)
        # the proxy illusion: peers only ever see the SFU
        return offer.with_candidates([self.sfu_address])

    def handle_leave(self, meeting_id: str, pid: str) -> None:
        return self._serialized(self._leave, meeting_id, pid)

    def _leave(self, meeting_id, pid):
        state = self.meeting(meeting_id)
        if pid not in state.participants:
            raise UnknownParticipant(f"{pid} not in {meeting_id}")
        for key in self._stream_keys(state, pid):
            self.rewrite.free(key)
            state.streams.pop(key, None)
        del state.participants[pid]
        state.qualities.pop(pid, None)
        state.directory.remove(pid)
        self._replan(state)
        self.channel.send({"type": "participant_left", "meeting_id": meeting_id, "pid": pid})
        if not state.participants:
            del self.meetings[meeting_id]
            self.channel.send({"type": "meeting_removed", "meeting_id": meeting_id})
        else:
            self._publish(state)

    def set_quality(self, meeting_id: str, receiver: str, level: Quality) -> None:
        """Re-plan after the agent picked a new decode target for a receiver."""
        self._serialized(self._set_quality, meeting_id, receiver, level)

    def _set_quality(self, meeting_id, receiver, level):
        state = self.meeting(meeting_id)
        if receiver not in state.participants:
            raise UnknownParticipant(receiver)
        old = state.qualities.get(receiver, Quality.HIGH)
        state.qualities[receiver] = Quality.parse(level)
        try:
            self._replan(state)
        except CapacityExceeded:
            state.qualities[receiver] = old
            raise
        self._publish(state)

    def _publish(self, state: MeetingState) -> None:
        self.channel.send(self.rule_dump(state.meeting_id))

    def rule_dump(self, meeting_id: str) -> dict:
        state = self.meeting(meeting_id)
        placement = self.planner.meetings.get(meeting_id)
        return {
            "type": "rules",
            "meeting_id": meeting_id,
            "classifier": [{"address": list(p.address), "pid": p.pid, "ssrcs": p.ssrcs, "port": p.egress_port}
                           for p in state.participants.values()],
            "replication": placement.to_dict() if placement else None,
            "rewrite": [{"sender": list(k.sender_addr), "receiver": list(k.receiver_addr), "ssrc": k.ssrc,
                         "index": i} for k, i in sorted(state.streams.items())],
        }

    def dumps(self) -> str:
        return json.dumps({mid: self.rule_dump(mid) for mid in sorted(self.meetings)}, indent=2, sort_keys=True)
