"""Replication-tree planning per meeting mode, migration, and capacity bounds.

Every mode is expressed as a set of receiver *groups*. A group occupies one
slot of a shared tree; a tree has ``meetings_per_tree`` slots told apart by
their L1 exclusion id, so a packet from slot 1 carries xid 2 and prunes the
other occupant. The modes differ only in how groups are cut:

    nra     one group per meeting, every participant
    ra_r    one group per quality level, receivers at or above that level
    ra_sr   one group per (sender, quality level)

two_party uses unicast rules and no tree at all.
"""

from __future__ import annotations

import enum
import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

from .pre import L1Node, PacketReplicationMeta, PreError, ReplicationEngine
from .wire.av1 import L1T3, TemplateStructure


class Mode(str, enum.Enum):
    TWO_PARTY = "two_party"
    NRA = "nra"
    RA_R = "ra_r"
    RA_SR = "ra_sr"


class Quality(enum.IntEnum):
    LOW = 0
    MID = 1
    HIGH = 2

    @classmethod
    def parse(cls, value) -> "Quality":
        if isinstance(value, Quality):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(value)


class PlanError(ValueError):
    pass


def dropped_templates(level: Quality, structure: TemplateStructure = L1T3) -> FrozenSet[int]:
    """Templates whose temporal layer is above what ``level`` keeps."""
    return frozenset(t for t, layer in structure.template_to_layer.items() if layer > int(level))


@dataclass(frozen=True)
class DecodeTarget:
    level: Quality
    dropped_template_ids: FrozenSet[int]

    @classmethod
    def of(cls, level, structure: TemplateStructure = L1T3) -> "DecodeTarget":
        level = Quality.parse(level)
        return cls(level, dropped_templates(level, structure))

    def forwards(self, template_id: Optional[int]) -> bool:
        return template_id is None or template_id not in self.dropped_template_ids


@dataclass(frozen=True)
class Participant:
    pid: str
    egress_port: int
    sends_video: bool = True
    sends_audio: bool = True

    @property
    def sends(self) -> bool:
        return self.sends_video or self.sends_audio


QualityKey = Union[str, Tuple[str, str]]


@dataclass
class MeetingPlan:
    meeting_id: str
    participants: List[Participant]
    mode: Mode = Mode.NRA
    q: int = 3
    # ra_r: receiver -> level; ra_sr: (receiver, sender) -> level
    receiver_quality: Dict[QualityKey, Quality] = field(default_factory=dict)
    structure: TemplateStructure = L1T3

    def __post_init__(self):
        self.mode = Mode(self.mode)

    def participant(self, pid: str) -> Participant:
        for p in self.participants:
            if p.pid == pid:
                return p
        raise PlanError(f"{pid} is not in meeting {self.meeting_id}")

    @property
    def pids(self) -> List[str]:
        return [p.pid for p in self.participants]

    def quality_of(self, receiver: str, sender: Optional[str] = None) -> Quality:
        if self.mode is Mode.NRA:
            return Quality.HIGH
        if sender is not None and (receiver, sender) in self.receiver_quality:
            return Quality.parse(self.receiver_quality[(receiver, sender)])
        return Quality.parse(self.receiver_quality.get(receiver, Quality.HIGH))

    def target(self, receiver: str, sender: Optional[str] = None) -> DecodeTarget:
        return DecodeTarget.of(self.quality_of(receiver, sender), self.structure)

    def level_for(self, template_id: Optional[int]) -> Quality:
        """Lowest quality level whose decode target still forwards the template."""
        if template_id is None:
            return Quality.LOW
        for level in Quality:
            if template_id not in dropped_templates(level, self.structure):
                return level
        return Quality.HIGH

    def validate(self) -> None:
        if self.q != 3:
            raise PlanError("plans model exactly three quality levels")
        if len(set(self.pids)) != len(self.pids):
            raise PlanError("duplicate participant id")
        if self.mode is Mode.TWO_PARTY and len(self.participants) != 2:
            raise PlanError("two_party needs exactly 2 participants")
        if self.mode is Mode.RA_R and any(not isinstance(k, str) for k in self.receiver_quality):
            raise PlanError("ra_r qualities are keyed by receiver only")
        if self.mode is Mode.RA_SR and any(not isinstance(k, tuple) for k in self.receiver_quality):
            raise PlanError("ra_sr qualities are keyed by (receiver, sender)")

    def with_mode(self, mode: Mode) -> "MeetingPlan":
        """Copy under another mode, converting the quality map's key shape."""
        mode = Mode(mode)
        rq: Dict[QualityKey, Quality] = {}
        if mode is Mode.RA_SR:
            for r in self.pids:
                for s in self.pids:
                    if r != s:
                        rq[(r, s)] = self.quality_of(r, s) if self.mode is not Mode.NRA else Quality.HIGH
        elif mode in (Mode.RA_R, Mode.TWO_PARTY):
            for r in self.pids:
                others = [s for s in self.pids if s != r]
                # conservative: a receiver keyed once gets its worst per-sender level
                levels = [self.quality_of(r, s) for s in others] or [Quality.HIGH]
                rq[r] = min(levels)
        return MeetingPlan(self.meeting_id, list(self.participants), mode, self.q, rq, self.structure)

    def to_dict(self) -> dict:
        return {
            "meeting_id": self.meeting_id,
            "mode": self.mode.value,
            "q": self.q,
            "participants": [
                {"pid": p.pid, "egress_port": p.egress_port, "sends_video": p.sends_video,
                 "sends_audio": p.sends_audio}
                for p in self.participants
            ],
            "receiver_quality": [
                {"receiver": k[0], "sender": k[1], "level": Quality.parse(v).name.lower()}
                if isinstance(k, tuple) else {"receiver": k, "level": Quality.parse(v).name.lower()}
                for k, v in sorted(self.receiver_quality.items(), key=lambda kv: str(kv[0]))
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeetingPlan":
        rq: Dict[QualityKey, Quality] = {}
        for item in d.get("receiver_quality", []):
            key = (item["receiver"], item["sender"]) if "sender" in item else item["receiver"]
            rq[key] = Quality.parse(item["level"])
        parts = [Participant(p["pid"], p["egress_port"], p.get("sends_video", True), p.get("sends_audio", True))
                 for p in d["participants"]]
        return cls(d["meeting_id"], parts, Mode(d.get("mode", "nra")), d.get("q", 3), rq)


GroupKey = Tuple


@dataclass
class GroupPlacement:
    key: GroupKey
    mgid: int
    slot: int
    nodes: Dict[str, L1Node]


@dataclass(frozen=True)
class UnicastRule:
    sender: str
    receiver: str
    egress_port: int


@dataclass
class MeetingPlacement:
    plan: MeetingPlan
    groups: Dict[GroupKey, GroupPlacement] = field(default_factory=dict)
    unicast: List[UnicastRule] = field(default_factory=list)

    @property
    def node_count(self) -> int:
        return sum(len(g.nodes) for g in self.groups.values())

    @property
    def mgids(self) -> FrozenSet[int]:
        return frozenset(g.mgid for g in self.groups.values())

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "groups": [
                {"key": list(map(_json_key, g.key)), "mgid": g.mgid, "l1_xid": g.slot,
                 "nodes": {pid: {"rid": n.rid, "port": n.egress_port} for pid, n in sorted(g.nodes.items())}}
                for g in self.groups.values()
            ],
            "unicast": [{"sender": u.sender, "receiver": u.receiver, "port": u.egress_port} for u in self.unicast],
        }


def _json_key(part):
    return part.name.lower() if isinstance(part, Quality) else part


class _SlotPool:
    """Trees with a fixed number of slots; fills the lowest open tree first."""

    def __init__(self, engine: ReplicationEngine, slots: int):
        self.engine = engine
        self.slots = slots
        self.occupancy: Dict[int, List[bool]] = {}
        self._open: List[int] = []
        self._rids: Dict[int, List[int]] = {}
        self._next_rid: Dict[int, int] = {}

    def acquire(self) -> Tuple[int, int]:
        while self._open:
            mgid = self._open[0]
            occ = self.occupancy.get(mgid)
            if occ is None or all(occ):
                heapq.heappop(self._open)
                continue
            i = occ.index(False)
            occ[i] = True
            return mgid, i + 1
        mgid = self.engine.allocate_mgid()
        self.engine.create_tree(mgid, ())
        self.occupancy[mgid] = [True] + [False] * (self.slots - 1)
        self._rids[mgid] = []
        self._next_rid[mgid] = 0
        if self.slots > 1:
            heapq.heappush(self._open, mgid)
        return mgid, 1

    def release(self, mgid: int, slot: int) -> None:
        occ = self.occupancy[mgid]
        occ[slot - 1] = False
        if not any(occ):
            del self.occupancy[mgid]
            del self._rids[mgid]
            del self._next_rid[mgid]
            self.engine.destroy_tree(mgid)
        else:
            heapq.heappush(self._open, mgid)

    def rid(self, mgid: int) -> int:
        # RID 0 is never handed out so a packet can carry it to mean "no exclusion"
        free = self._rids[mgid]
        if free:
            return heapq.heappop(free)
        self._next_rid[mgid] += 1
        return self._next_rid[mgid]

    def free_rid(self, mgid: int, rid: int) -> None:
        if mgid in self._rids:
            heapq.heappush(self._rids[mgid], rid)


StepHook = Optional[Callable[[str], None]]


class Planner:
    """Owns tree placement for every meeting on one replication engine."""

    def __init__(self, engine: Optional[ReplicationEngine] = None, meetings_per_tree: int = 2):
        if meetings_per_tree not in (1, 2):
            # one packet carries one L1 exclusion id, which isolates at most two slots
            raise PlanError("meetings_per_tree must be 1 or 2")
        self.engine = engine or ReplicationEngine()
        self.m = meetings_per_tree
        self.pool = _SlotPool(self.engine, meetings_per_tree)
        self.meetings: Dict[str, MeetingPlacement] = {}
        self._rid_owner: Dict[Tuple[int, int], str] = {}
        self._slot_owner: Dict[Tuple[int, int], Tuple[str, GroupKey]] = {}

    # -- group construction ------------------------------------------------

    def _groups_for(self, plan: MeetingPlan) -> Dict[GroupKey, List[str]]:
        pids = plan.pids
        if plan.mode is Mode.TWO_PARTY:
            return {}
        if plan.mode is Mode.NRA:
            return {("all",): list(pids)}
        if plan.mode is Mode.RA_R:
            return {("q", lvl): [r for r in pids if plan.quality_of(r) >= lvl] for lvl in Quality}
        groups = {}
        for p in plan.participants:
            if not p.sends:
                continue
            for lvl in Quality:
                groups[("sq", p.pid, lvl)] = [r for r in pids if r != p.pid and plan.quality_of(r, p.pid) >= lvl]
        return groups

    def _place_group(self, plan: MeetingPlan, key: GroupKey, members: List[str]) -> GroupPlacement:
        mgid, slot = self.pool.acquire()
        nodes = {}
        try:
            for pid in members:
                port = plan.participant(pid).egress_port
                nodes[pid] = self.engine.new_node(self.pool.rid(mgid), port, l1_xid=slot)
            self.engine.add_nodes(mgid, nodes.values())
        except PreError:
            for n in nodes.values():
                self.pool.free_rid(mgid, n.rid)
            self.pool.release(mgid, slot)
            raise
        for pid, n in nodes.items():
            self._rid_owner[(mgid, n.rid)] = pid
        self._slot_owner[(mgid, slot)] = (plan.meeting_id, key)
        return GroupPlacement(key, mgid, slot, nodes)

    def _release_group(self, g: GroupPlacement) -> None:
        self.engine.remove_nodes(g.mgid, [n.node_id for n in g.nodes.values()])
        for n in g.nodes.values():
            self._rid_owner.pop((g.mgid, n.rid), None)
            self.pool.free_rid(g.mgid, n.rid)
        self._slot_owner.pop((g.mgid, g.slot), None)
        self.pool.release(g.mgid, g.slot)

    def _build(self, plan: MeetingPlan) -> MeetingPlacement:
        plan.validate()
        placement = MeetingPlacement(plan)
        if plan.mode is Mode.TWO_PARTY:
            a, b = plan.participants
            placement.unicast = [UnicastRule(a.pid, b.pid, b.egress_port), UnicastRule(b.pid, a.pid, a.egress_port)]
            return placement
        try:
            for key, members in self._groups_for(plan).items():
                placement.groups[key] = self._place_group(plan, key, members)
        except PreError:
            for g in placement.groups.values():
                self._release_group(g)
            raise
        return placement

    def _teardown(self, placement: MeetingPlacement) -> None:
        for g in placement.groups.values():
            self._release_group(g)

    # -- public API --------------------------------------------------------

    def install(self, plan: MeetingPlan) -> MeetingPlacement:
        if plan.meeting_id in self.meetings:
            raise PlanError(f"meeting {plan.meeting_id} already planned")
        placement = self._build(plan)
        self.meetings[plan.meeting_id] = placement
        return placement

    def remove(self, meeting_id: str) -> None:
        self._teardown(self.meetings.pop(meeting_id))

    def migrate(self, meeting_id: str, new_mode: Optional[Mode] = None,
                new_plan: Optional[MeetingPlan] = None, on_step: StepHook = None) -> MeetingPlacement:
        """Make-before-break: build the new trees, redirect, free the old ones.

        On a budget error nothing changes and the old placement keeps serving.
        """
        old = self.meetings[meeting_id]
        if new_plan is None:
            new_plan = old.plan.with_mode(new_mode if new_mode is not None else old.plan.mode)
        fresh = self._build(new_plan)
        if on_step:
            on_step("created")
        self.meetings[meeting_id] = fresh
        if on_step:
            on_step("redirected")
        self._teardown(old)
        if on_step:
            on_step("released")
        self.compact()
        return self.meetings[meeting_id]

    def compact(self) -> int:
        """Merge half-empty trees by moving single groups, make-before-break.

        Returns the number of groups moved.
        """
        moved = 0
        while self.m == 2:
            half = sorted(mgid for mgid, occ in self.pool.occupancy.items() if occ.count(True) == 1)
            if len(half) < 2:
                break
            src = half[-1]
            slot = self.pool.occupancy[src].index(True) + 1
            meeting_id, key = self._slot_owner[(src, slot)]
            placement = self.meetings[meeting_id]
            old = placement.groups[key]
            try:
                new = self._place_group(placement.plan, key, list(old.nodes))
            except PreError:
                break
            placement.groups[key] = new
            self._release_group(old)
            moved += 1
        return moved

    def _group_for_packet(self, placement: MeetingPlacement, sender: str, template_id: Optional[int]):
        plan = placement.plan
        level = plan.level_for(template_id)
        if plan.mode is Mode.NRA:
            return placement.groups[("all",)]
        if plan.mode is Mode.RA_R:
            return placement.groups[("q", level)]
        return placement.groups[("sq", sender, level)]

    def meta_for(self, meeting_id: str, sender: str, template_id: Optional[int] = None) -> PacketReplicationMeta:
        """Replication metadata for a sender's packet (template None = audio)."""
        placement = self.meetings[meeting_id]
        if placement.plan.mode is Mode.TWO_PARTY:
            raise PlanError("two_party meetings use unicast rules, not trees")
        g = self._group_for_packet(placement, sender, template_id)
        xid = (3 - g.slot) if self.m == 2 else 0
        own = g.nodes.get(sender)
        if own is None:
            return PacketReplicationMeta(g.mgid, xid, 0, frozenset())
        return PacketReplicationMeta(g.mgid, xid, own.rid, frozenset({own.egress_port}))

    def deliver(self, meeting_id: str, sender: str, template_id: Optional[int] = None) -> List[str]:
        """Receivers that get a copy, in replication order (duplicates kept)."""
        placement = self.meetings[meeting_id]
        plan = placement.plan
        if not _sends(plan.participant(sender), template_id):
            return []
        if plan.mode is Mode.TWO_PARTY:
            return [u.receiver for u in placement.unicast
                    if u.sender == sender and plan.target(u.receiver, sender).forwards(template_id)]
        meta = self.meta_for(meeting_id, sender, template_id)
        return [self._rid_owner[(meta.mgid, r.rid)] for r in self.engine.replicate(meta)]

    def to_dict(self) -> dict:
        return {
            "meetings_per_tree": self.m,
            "meetings": {mid: p.to_dict() for mid, p in sorted(self.meetings.items())},
            "engine": self.engine.dump()["resources"],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _sends(p: Participant, template_id: Optional[int]) -> bool:
    return p.sends_audio if template_id is None else p.sends_video


def expected_receivers(plan: MeetingPlan, sender: str, template_id: Optional[int]) -> List[str]:
    """Direct set computation used as the delivery oracle."""
    if not _sends(plan.participant(sender), template_id):
        return []
    return sorted(r for r in plan.pids if r != sender and plan.target(r, sender).forwards(template_id))


def _plan_all(meetings: Iterable[MeetingPlan], planner: Planner, mode: Mode) -> Dict[str, MeetingPlacement]:
    out = {}
    for m in meetings:
        if m.mode is not mode:
            raise PlanError(f"meeting {m.meeting_id} is {m.mode.value}, expected {mode.value}")
        out[m.meeting_id] = planner.install(m)
    return out


def plan_nra(meetings, planner: Planner) -> Dict[str, MeetingPlacement]:
    return _plan_all(meetings, planner, Mode.NRA)


def plan_ra_r(meetings, planner: Planner) -> Dict[str, MeetingPlacement]:
    return _plan_all(meetings, planner, Mode.RA_R)


def plan_ra_sr(meetings, planner: Planner) -> Dict[str, MeetingPlacement]:
    return _plan_all(meetings, planner, Mode.RA_SR)


def migrate(planner: Planner, meeting_id: str, new_mode: Mode, on_step: StepHook = None) -> MeetingPlacement:
    return planner.migrate(meeting_id, Mode(new_mode), on_step=on_step)


# -- capacity ----------------------------------------------------------------

@dataclass(frozen=True)
class CapacityParams:
    trees: int = 65536
    meetings_per_tree: int = 2
    qualities: int = 3
    participants: int = 3
    per_stream_bps: float = 3e6
    # 64 x 100 GbE; with two 3 Mb/s streams each way this gives the 533K two-party figure
    egress_budget_bps: Optional[float] = 6.4e12
    streams_per_participant: int = 2
    stream_table_bound: int = 1 << 20

    def validate(self) -> None:
        for name in ("trees", "meetings_per_tree", "qualities", "participants", "streams_per_participant",
                     "stream_table_bound"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.per_stream_bps <= 0 or (self.egress_budget_bps is not None and self.egress_budget_bps <= 0):
            raise ValueError("bandwidths must be positive")


def egress_bps(streams: int, per_stream_bps: float = 3e6) -> float:
    return streams * per_stream_bps


def capacity(mode, p: CapacityParams = CapacityParams()) -> int:
    """Maximum concurrent meetings for a mode, capped by egress bandwidth."""
    p.validate()
    mode = Mode(mode)
    T, m, q, N = p.trees, p.meetings_per_tree, p.qualities, p.participants
    if mode is Mode.TWO_PARTY:
        bound = p.stream_table_bound
        if p.egress_budget_bps is not None:
            bound = min(bound, math.floor(p.egress_budget_bps / (2 * p.per_stream_bps * p.streams_per_participant)))
        return bound
    if mode is Mode.NRA:
        bound = m * T
    elif mode is Mode.RA_R:
        bound = (m * T) // q
    else:
        bound = (2 * T) // (q * N)
    if p.egress_budget_bps is not None:
        per_meeting = N * (N - 1) * p.streams_per_participant * p.per_stream_bps
        if per_meeting > 0:
            bound = min(bound, math.floor(p.egress_budget_bps / per_meeting))
    return bound
