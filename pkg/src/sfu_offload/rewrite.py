"""Transparent sequence-number rewriting for rate-adapted streams.

Suppressing SVC layers leaves holes in the RTP sequence space that a receiver
would NACK. The rewriters below close those holes in a streaming fashion while
keeping three guarantees: forwarded packets keep their relative order, a real
upstream loss always stays visible as a hole, and no output number is ever
issued twice.

All sequence and frame arithmetic is mod 2**16 with half-window comparisons.

Why the S-LR cases are safe: write D(p) = (suppressed packets before p) -
(offset applied to p). Order, uniqueness and loss visibility all hold iff D
never decreases along original sequence order. Offsets only grow, and every
increment is a lower bound on the suppressed packets of frames that lie
strictly between two observed frames. So a late packet may reuse the current
offset exactly when every frame already counted into the offset is older than
the packet's own frame, which is what ``highest_suppressed_frame`` records.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple

SEQ_MOD = 1 << 16
HALF = 1 << 15


def seq_diff(a: int, b: int) -> int:
    """Signed distance a - b in the 16-bit half window."""
    d = (a - b) & 0xFFFF
    return d - SEQ_MOD if d >= HALF else d


frame_diff = seq_diff


class StreamKey(NamedTuple):
    sender_addr: Tuple[str, int]
    receiver_addr: Tuple[str, int]
    ssrc: int


class MediaPkt(NamedTuple):
    seq: int
    frame: int
    layer: int = 0
    start: bool = True
    end: bool = True


class RewriteAction(NamedTuple):
    forward: bool
    new_seq: Optional[int] = None

    def __repr__(self):
        return f"forward({self.new_seq})" if self.forward else "drop"


DROP = RewriteAction(False)


def _fwd(seq: int) -> RewriteAction:
    return RewriteAction(True, seq & 0xFFFF)


@dataclass(frozen=True)
class DropRule:
    """Which frames are suppressed, by position in the temporal-layer cycle."""

    cycle: Tuple[int, ...] = (0, 2, 1, 2)
    dropped_layers: FrozenSet[int] = frozenset()
    min_packets_per_frame: int = 1
    # frame number that sits at cycle position 0
    phase: int = 0
    # first frame the rule governs; earlier frames follow ``before``
    active_from: Optional[int] = None
    # rule for frames before active_from; None means nothing was suppressed
    before: Optional["DropRule"] = None

    def __post_init__(self):
        if SEQ_MOD % len(self.cycle):
            raise ValueError("cycle length must divide 65536 so wrap keeps the cadence")
        if self.min_packets_per_frame < 0:
            raise ValueError("min_packets_per_frame must be >= 0")
        object.__setattr__(self, "cycle", tuple(self.cycle))
        object.__setattr__(self, "dropped_layers", frozenset(self.dropped_layers))

    @classmethod
    def drop_layers(cls, layers: Iterable[int], **kw) -> "DropRule":
        return cls(dropped_layers=frozenset(layers), **kw)

    def layer_of(self, frame: int) -> int:
        return self.cycle[(frame - self.phase) % len(self.cycle)]

    def is_suppressed(self, frame: int) -> bool:
        if self.active_from is not None and frame_diff(frame, self.active_from) < 0:
            return self.before is not None and self.before.is_suppressed(frame)
        return self.layer_of(frame) in self.dropped_layers

    def _before_between(self, a: int, b: int) -> int:
        return self.before.suppressed_between(a, b) if self.before is not None else 0

    def suppressed_between(self, a: int, b: int) -> int:
        """Suppressed frames strictly between a and b (b after a)."""
        if frame_diff(b, a) <= 1:
            return 0
        early = 0
        if self.active_from is not None and frame_diff(self.active_from, a) > 0:
            if frame_diff(b, self.active_from) <= 0:
                return self._before_between(a, b)
            early = self._before_between(a, self.active_from)
            a = (self.active_from - 1) & 0xFFFF
        n = (b - a - 1) & 0xFFFF
        period = len(self.cycle)
        per_cycle = sum(1 for layer in self.cycle if layer in self.dropped_layers)
        full, rem = divmod(n, period)
        start = a + 1 + full * period
        return early + full * per_cycle + sum(
            1 for i in range(rem) if self.layer_of(start + i) in self.dropped_layers)

    def last_suppressed_before(self, b: int, a: int) -> Optional[int]:
        """Newest suppressed frame strictly between a and b, if any."""
        span = frame_diff(b, a) - 1
        for i in range(1, span + 1):
            f = (b - i) & 0xFFFF
            if self.is_suppressed(f):
                return f
        return None

    def settled(self) -> "DropRule":
        return replace(self, active_from=None, before=None)

    def switch_to(self, dropped_layers: Iterable[int], active_from: int,
                  min_packets_per_frame: Optional[int] = None) -> "DropRule":
        """A new cadence from ``active_from`` on, keeping this one for older frames."""
        mpf = self.min_packets_per_frame if min_packets_per_frame is None else min_packets_per_frame
        return DropRule(self.cycle, frozenset(dropped_layers), mpf, self.phase, active_from & 0xFFFF, self)

    @property
    def suppresses_anything(self) -> bool:
        if self.before is not None and self.before.suppresses_anything:
            return True
        return any(layer in self.dropped_layers for layer in self.cycle)


# -- S-LM --------------------------------------------------------------------

@dataclass
class SlmState:
    highest_seq: int = 0
    highest_frame: int = 0
    offset: int = 0
    initialized: bool = False


def slm_process(st: SlmState, pkt: MediaPkt, rule: DropRule) -> RewriteAction:
    if not st.initialized:
        st.highest_seq, st.highest_frame, st.offset, st.initialized = pkt.seq, pkt.frame, 0, True
        return _fwd(pkt.seq)
    d = seq_diff(pkt.seq, st.highest_seq)
    if d == 1:
        st.highest_seq = pkt.seq
        if frame_diff(pkt.frame, st.highest_frame) > 0:
            st.highest_frame = pkt.frame
        return _fwd(pkt.seq - st.offset)
    if d > 1:
        gap = d - 1
        if frame_diff(pkt.frame, st.highest_frame) > 1:
            expected = rule.min_packets_per_frame * rule.suppressed_between(st.highest_frame, pkt.frame)
            # an exact match can only be explained by suppression; anything else is loss
            if expected and gap == expected:
                st.offset += gap
        st.highest_seq = pkt.seq
        if frame_diff(pkt.frame, st.highest_frame) > 0:
            st.highest_frame = pkt.frame
        return _fwd(pkt.seq - st.offset)
    if d == -1:
        return _fwd(pkt.seq - st.offset)
    return DROP


# -- S-LR --------------------------------------------------------------------

@dataclass
class SlrState(SlmState):
    first_seq_latest_frame: int = 0
    highest_seq_latest_frame: int = 0
    last_frame_ended: bool = False
    highest_suppressed_frame: Optional[int] = None


def slr_process(st: SlrState, pkt: MediaPkt, rule: DropRule) -> RewriteAction:
    # (a) first packet
    if not st.initialized:
        st.initialized = True
        st.highest_seq = st.first_seq_latest_frame = st.highest_seq_latest_frame = pkt.seq
        st.highest_frame = pkt.frame
        st.last_frame_ended = pkt.end
        st.offset = 0
        st.highest_suppressed_frame = None
        return _fwd(pkt.seq)

    fd = frame_diff(pkt.frame, st.highest_frame)
    d = seq_diff(pkt.seq, st.highest_seq)

    # (b) same frame as the latest one, in or out of order
    if fd == 0:
        if d == 0:
            return DROP
        if d > 0:
            st.highest_seq = st.highest_seq_latest_frame = pkt.seq
        elif seq_diff(pkt.seq, st.first_seq_latest_frame) < 0:
            st.first_seq_latest_frame = pkt.seq
        st.last_frame_ended = st.last_frame_ended or pkt.end
        return _fwd(pkt.seq - st.offset)

    if fd > 0:
        if d <= 0:
            return DROP  # newer frame cannot carry an older sequence number
        gap = d - 1
        delta = 0
        if fd > 1:
            # (d) frames were skipped; count only frames not yet accounted for
            lo = st.highest_frame
            hsf = st.highest_suppressed_frame
            if hsf is not None and frame_diff(hsf, lo) > 0:
                lo = hsf
            n_supp = rule.suppressed_between(lo, pkt.frame)
            n_fwd = (fd - 1) - rule.suppressed_between(st.highest_frame, pkt.frame)
            known_missing = n_fwd + (0 if st.last_frame_ended else 1) + (0 if pkt.start else 1)
            if known_missing == 0 and lo == st.highest_frame:
                # previous frame closed, this one opens, only suppressed frames between
                delta = gap
            else:
                delta = min(rule.min_packets_per_frame * n_supp, max(0, gap - known_missing))
            if n_supp:
                st.highest_suppressed_frame = rule.last_suppressed_before(pkt.frame, lo)
        # (c) consecutive frame: delta stays 0, any gap is loss
        st.offset += delta
        st.highest_seq = st.first_seq_latest_frame = st.highest_seq_latest_frame = pkt.seq
        st.highest_frame = pkt.frame
        st.last_frame_ended = pkt.end
        return _fwd(pkt.seq - st.offset)

    # (e) older frame: safe only if no counted suppression lies after it
    if d >= 0:
        return DROP
    hsf = st.highest_suppressed_frame
    if hsf is not None and frame_diff(pkt.frame, hsf) <= 0:
        return DROP
    return _fwd(pkt.seq - st.offset)


SETTLE_FRAMES = 64

HEURISTICS = {"slm": (SlmState, slm_process), "slr": (SlrState, slr_process)}


@dataclass
class StreamRewriter:
    """One rewriter per (sender, receiver, ssrc) stream."""

    rule: DropRule = field(default_factory=DropRule)
    heuristic: str = "slr"

    def __post_init__(self):
        state_cls, self._fn = HEURISTICS[self.heuristic]
        self.state = state_cls()

    def set_rule(self, rule: DropRule) -> None:
        """Swap the cadence; pass ``active_from`` so older frames keep their status."""
        self.rule = rule

    def process(self, pkt: MediaPkt) -> RewriteAction:
        rule = self.rule
        if rule.active_from is not None and self.state.initialized and \
                frame_diff(self.state.highest_frame, rule.active_from) > SETTLE_FRAMES:
            # far enough past the switch that no reordered frame can precede it
            rule = self.rule = rule.settled()
        if rule.is_suppressed(pkt.frame):
            return DROP
        return self._fn(self.state, pkt, rule)


# -- oracle and receiver model ------------------------------------------------

FORWARDED = "forwarded"
SUPPRESSED = "suppressed"
LOST = "lost"


def oracle_rewrite(labeled: Iterable[Tuple[int, int, str]]) -> Dict[int, int]:
    """Ideal mapping: each sequence number minus the suppressed ones before it.

    ``labeled`` is in send order; suppressed entries get no mapping. Keys are
    16-bit, so streams longer than 65536 packets should use
    :func:`oracle_rewrite_list` instead.
    """
    return {s: v for s, v in oracle_rewrite_list(labeled) if v is not None}


def oracle_rewrite_list(labeled: Iterable[Tuple[int, int, str]]) -> List[Tuple[int, Optional[int]]]:
    out = []
    suppressed = 0
    for seq, _frame, disposition in labeled:
        if disposition == SUPPRESSED:
            out.append((seq, None))
            suppressed += 1
        else:
            out.append((seq, (seq - suppressed) & 0xFFFF))
    return out


def unwrap(seqs: Iterable[int]) -> List[int]:
    """Extend 16-bit numbers to integers, each nearest to the previous one."""
    out: List[int] = []
    prev = None
    for s in seqs:
        if prev is None:
            cur = s
        else:
            cur = prev + seq_diff(s, prev & 0xFFFF)
        out.append(cur)
        prev = cur
    return out


def receiver_nacks(arrivals: Sequence[int]) -> List[int]:
    """Every number strictly inside the observed span that never arrived, once."""
    if not arrivals:
        return []
    ext = unwrap(arrivals)
    seen = set(ext)
    lo, hi = min(ext), max(ext)
    return [s & 0xFFFF for s in range(lo + 1, hi) if s not in seen]


def overhead(heuristic_arrivals: Sequence[int], oracle_arrivals: Sequence[int]) -> float:
    """Extra NACKs over the oracle, per packet forwarded to the receiver."""
    if not heuristic_arrivals:
        return 0.0
    extra = len(receiver_nacks(heuristic_arrivals)) - len(receiver_nacks(oracle_arrivals))
    return extra / len(heuristic_arrivals)


# -- stream index allocation ---------------------------------------------------

class IndexExhausted(RuntimeError):
    pass


class RewriteTable:
    """Collision-free per-stream slot allocation; freed slots are reused."""

    def __init__(self, size: int = 1 << 16):
        self.size = size
        self._by_key: Dict[StreamKey, int] = {}
        self._free: List[int] = []
        self._next = 0

    def allocate(self, key: StreamKey) -> int:
        if key in self._by_key:
            return self._by_key[key]
        if self._free:
            idx = self._free.pop()
        elif self._next < self.size:
            idx = self._next
            self._next += 1
        else:
            raise IndexExhausted(f"all {self.size} rewrite slots in use")
        self._by_key[key] = idx
        return idx

    def free(self, key: StreamKey) -> None:
        idx = self._by_key.pop(key, None)
        if idx is not None:
            self._free.append(idx)

    def index_of(self, key: StreamKey) -> Optional[int]:
        return self._by_key.get(key)

    def __len__(self) -> int:
        return len(self._by_key)

    def items(self):
        return sorted(self._by_key.items(), key=lambda kv: kv[1])
