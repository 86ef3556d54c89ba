"""Bandwidth feedback filtering and the RTCP forwarding matrix.

A sender that hears REMB from every receiver settles on the weakest one. The
agent instead keeps an EWMA per (stream, receiver), periodically picks the best
downlink, and only that receiver's RR/REMB are let through to the sender.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, List, NamedTuple, Optional, Set, Tuple

from .wire.rtcp import RtcpKind, RtcpMessage

DEFAULT_ALPHA = 0.3
DEFAULT_PERIOD_US = 500_000


class NoEstimates(LookupError):
    pass


class UnknownOrigin(KeyError):
    pass


StreamId = Hashable
ReceiverId = str


class SelectionChange(NamedTuple):
    time_us: int
    stream: StreamId
    old: Optional[ReceiverId]
    new: ReceiverId

    def to_dict(self) -> dict:
        return {"time_us": self.time_us, "stream": str(self.stream), "old": self.old, "new": self.new}


def ewma(prev: Optional[float], sample: float, alpha: float) -> float:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    if prev is None:
        return float(sample)
    return alpha * sample + (1 - alpha) * prev


@dataclass
class FeedbackState:
    alpha: float = DEFAULT_ALPHA
    ewma_bps: Dict[Tuple[StreamId, ReceiverId], float] = field(default_factory=dict)
    last_update: Dict[Tuple[StreamId, ReceiverId], int] = field(default_factory=dict)
    selected: Dict[StreamId, ReceiverId] = field(default_factory=dict)
    # data-plane reinstalls, one per argmax change
    churn: int = 0
    changes: List[SelectionChange] = field(default_factory=list)

    def update_estimate(self, stream: StreamId, receiver: ReceiverId, remb_bps: float,
                        now_us: int = 0, alpha: Optional[float] = None) -> float:
        if remb_bps <= 0:
            raise ValueError("REMB must be positive")
        key = (stream, receiver)
        value = ewma(self.ewma_bps.get(key), remb_bps, self.alpha if alpha is None else alpha)
        self.ewma_bps[key] = value
        self.last_update[key] = now_us
        return value

    def estimates(self, stream: StreamId) -> Dict[ReceiverId, float]:
        return {r: v for (s, r), v in self.ewma_bps.items() if s == stream}

    def select_best(self, stream: StreamId) -> ReceiverId:
        est = self.estimates(stream)
        if not est:
            raise NoEstimates(stream)
        # highest estimate, lowest id on ties
        return min(est, key=lambda r: (-est[r], r))

    def reselect(self, stream: StreamId, now_us: int = 0) -> Optional[SelectionChange]:
        """Re-run selection; touches the data plane only if the winner changed."""
        best = self.select_best(stream)
        old = self.selected.get(stream)
        if best == old:
            return None
        self.selected[stream] = best
        self.churn += 1
        change = SelectionChange(now_us, stream, old, best)
        self.changes.append(change)
        return change

    def reselect_all(self, now_us: int = 0) -> List[SelectionChange]:
        streams = sorted({s for s, _ in self.ewma_bps}, key=str)
        return [c for c in (self.reselect(s, now_us) for s in streams) if c is not None]

    def forget_receiver(self, receiver: ReceiverId) -> None:
        for key in [k for k in self.ewma_bps if k[1] == receiver]:
            del self.ewma_bps[key]
            self.last_update.pop(key, None)
        for stream in [s for s, r in self.selected.items() if r == receiver]:
            del self.selected[stream]

    def selection_log(self) -> str:
        return "\n".join(json.dumps(c.to_dict()) for c in self.changes)


def update_estimate(state: FeedbackState, sender_stream: StreamId, receiver: ReceiverId, remb_bps: float,
                    alpha: Optional[float] = None) -> float:
    return state.update_estimate(sender_stream, receiver, remb_bps, alpha=alpha)


def select_best(state: FeedbackState, sender_stream: StreamId) -> ReceiverId:
    return state.select_best(sender_stream)


@dataclass
class Directory:
    """Who is in the meeting and which participant owns each SSRC."""

    participants: Set[str] = field(default_factory=set)
    ssrc_owner: Dict[int, str] = field(default_factory=dict)

    def add(self, pid: str, ssrcs: Iterable[int] = ()) -> None:
        self.participants.add(pid)
        for s in ssrcs:
            self.ssrc_owner[s] = pid

    def remove(self, pid: str) -> None:
        self.participants.discard(pid)
        for s in [s for s, p in self.ssrc_owner.items() if p == pid]:
            del self.ssrc_owner[s]


class RtcpRoute(NamedTuple):
    destinations: Tuple[str, ...]
    agent_copy: bool


def _about(msg: RtcpMessage) -> Optional[int]:
    if msg.kind is RtcpKind.REMB and msg.remb_ssrcs:
        return msg.remb_ssrcs[0]
    if msg.kind is RtcpKind.RR and msg.report_blocks:
        return msg.report_blocks[0].ssrc
    return msg.media_ssrc


def route_rtcp(msg: RtcpMessage, origin: str, state: FeedbackState, directory: Directory,
               filter_feedback: bool = True) -> RtcpRoute:
    """Where one RTCP message from ``origin`` goes.

    Feedback streams are keyed by the reported-on SSRC. With ``filter_feedback``
    off every RR/REMB goes to its sender, which is the naive baseline.
    """
    if origin not in directory.participants:
        raise UnknownOrigin(origin)
    kind = msg.kind
    if kind in (RtcpKind.SR, RtcpKind.SDES):
        return RtcpRoute(tuple(sorted(directory.participants - {origin})), False)
    ssrc = _about(msg)
    sender = directory.ssrc_owner.get(ssrc) if ssrc is not None else None
    if kind in (RtcpKind.NACK, RtcpKind.PLI):
        return RtcpRoute((sender,) if sender and sender != origin else (), True)
    if kind in (RtcpKind.RR, RtcpKind.REMB):
        if sender is None or sender == origin:
            return RtcpRoute((), True)
        if not filter_feedback or state.selected.get(ssrc) == origin:
            return RtcpRoute((sender,), True)
        return RtcpRoute((), True)
    return RtcpRoute((), True)
