import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import CYCLES, invariant_violations, make_schedule, run_rewriter
from sfu_offload.rewrite import (
    DROP,
    FORWARDED,
    LOST,
    SUPPRESSED,
    DropRule,
    IndexExhausted,
    MediaPkt,
    RewriteAction,
    RewriteTable,
    SlmState,
    SlrState,
    StreamKey,
    StreamRewriter,
    oracle_rewrite,
    overhead,
    receiver_nacks,
    seq_diff,
    slm_process,
    slr_process,
    unwrap,
)

# frames: 0 base {1,2}, 1 enhancement {3,4} suppressed, 2 base {5,6}
P = {
    1: MediaPkt(1, 0, 0, True, False),
    2: MediaPkt(2, 0, 0, False, True),
    3: MediaPkt(3, 1, 2, True, False),
    4: MediaPkt(4, 1, 2, False, True),
    5: MediaPkt(5, 2, 0, True, False),
    6: MediaPkt(6, 2, 0, False, True),
}
ALTERNATE = dict(cycle=(0, 2), dropped_layers={2})


def _run(fn, state, rule, order):
    return [fn(state, P[i], rule) for i in order]


def test_seq_diff_half_window():
    assert seq_diff(1, 65535) == 2
    assert seq_diff(65535, 1) == -2
    assert seq_diff(5, 5) == 0
    assert seq_diff(32767, 0) == 32767
    assert seq_diff(32768, 0) == -32768


def test_drop_rule_cadence():
    rule = DropRule(dropped_layers={2})
    assert [rule.is_suppressed(f) for f in range(8)] == [False, True, False, True] * 2
    assert rule.suppressed_between(0, 4) == 2
    assert rule.suppressed_between(0, 1) == 0
    assert rule.suppressed_between(0, 0) == 0
    assert rule.suppressed_between(65534, 2) == 2  # 65535 and 1
    assert rule.last_suppressed_before(4, 0) == 3
    assert rule.last_suppressed_before(3, 2) is None


def test_drop_rule_active_from_hides_earlier_frames():
    rule = DropRule(dropped_layers={2}, active_from=5)
    assert not rule.is_suppressed(3)
    assert rule.is_suppressed(5)
    assert rule.suppressed_between(0, 8) == 2  # 5 and 7
    assert rule.suppressed_between(0, 5) == 0
    assert rule.settled().suppressed_between(0, 8) == 4


def test_drop_rule_rejects_bad_cycle():
    with pytest.raises(ValueError):
        DropRule(cycle=(0, 1, 2))


# -- S-LM ------------------------------------------------------------------

def test_slm_example_offset_two():
    rule = DropRule(min_packets_per_frame=2, **ALTERNATE)
    got = _run(slm_process, SlmState(), rule, [1, 2, 5, 6])
    assert got == [RewriteAction(True, 1), RewriteAction(True, 2), RewriteAction(True, 3), RewriteAction(True, 4)]


def test_slm_identity_without_suppression():
    st_ = SlmState()
    rule = DropRule()
    out = [slm_process(st_, MediaPkt(s, s), rule).new_seq for s in range(1, 101)]
    assert out == list(range(1, 101))


def test_slm_gap_mismatch_is_left_as_loss():
    # P3 lost upstream and P4 never reaches the rewriter: a 2-packet gap
    # against a 1-packet minimum is not an exact match, so the offset holds
    rule = DropRule(min_packets_per_frame=1, **ALTERNATE)
    st_ = SlmState()
    got = _run(slm_process, st_, rule, [1, 2, 5, 6])
    assert [a.new_seq for a in got] == [1, 2, 5, 6]
    assert st_.offset == 0
    assert receiver_nacks([a.new_seq for a in got]) == [3, 4]


def test_slm_reorder_one_below_forwarded_else_dropped():
    rule = DropRule()
    st_ = SlmState()
    slm_process(st_, MediaPkt(10, 0), rule)
    slm_process(st_, MediaPkt(12, 0), rule)
    assert slm_process(st_, MediaPkt(11, 0), rule) == RewriteAction(True, 11)
    slm_process(st_, MediaPkt(15, 0), rule)
    assert slm_process(st_, MediaPkt(13, 0), rule) == DROP
    assert slm_process(st_, MediaPkt(15, 0), rule) == DROP


# -- S-LR ------------------------------------------------------------------

def test_slr_example_matches_oracle():
    rule = DropRule(min_packets_per_frame=1, **ALTERNATE)
    got = _run(slr_process, SlrState(), rule, [1, 2, 5, 6])
    # markers make the interval exact even with a loose per-frame minimum
    assert [a.new_seq for a in got] == [1, 2, 3, 4]


def test_slr_late_tail_after_advance_never_collides():
    rule = DropRule(min_packets_per_frame=2, **ALTERNATE)
    st_ = SlrState()
    got = _run(slr_process, st_, rule, [1, 5, 6, 2])
    assert got[:3] == [RewriteAction(True, 1), RewriteAction(True, 3), RewriteAction(True, 4)]
    # frame 0 is older than the counted suppressed frame 1, so P2 is dropped
    assert got[3] == DROP


def test_slr_reordered_within_latest_frame():
    rule = DropRule(min_packets_per_frame=2, **ALTERNATE)
    st_ = SlrState()
    got = _run(slr_process, st_, rule, [1, 2, 6, 5])
    assert [a.new_seq for a in got] == [1, 2, 4, 3]
    assert st_.first_seq_latest_frame == 5
    assert st_.highest_seq_latest_frame == 6


def test_slr_lossless_equals_oracle():
    rule = DropRule(dropped_layers={2}, min_packets_per_frame=1)
    pkts = []
    s = 100
    for f in range(40):
        size = 1 + f % 3
        for i in range(size):
            pkts.append(MediaPkt(s & 0xFFFF, f, rule.layer_of(f), i == 0, i == size - 1))
            s += 1
    labels = [(p.seq, p.frame, SUPPRESSED if rule.is_suppressed(p.frame) else FORWARDED) for p in pkts]
    ideal = oracle_rewrite(labels)
    rw = StreamRewriter(rule, "slr")
    out = {}
    for p in pkts:
        a = rw.process(p)
        if a.forward:
            out[p.seq] = a.new_seq
    assert out == ideal


def test_slr_offset_monotone_and_state_order():
    rule = DropRule(dropped_layers={2}, min_packets_per_frame=1)
    for seed in range(50):
        r, pkts, sup, arrivals = make_schedule(seed, 30, 1, 2, (0, 2, 1, 2), {2}, 0.2, 0.3, 6, 65500, 0)
        rw = StreamRewriter(r, "slr")
        last = 0
        for i in arrivals:
            rw.process(pkts[i])
            assert rw.state.offset >= last
            last = rw.state.offset
            assert seq_diff(rw.state.highest_seq_latest_frame, rw.state.first_seq_latest_frame) >= 0


# -- oracle and receiver ---------------------------------------------------

def test_oracle_examples():
    labels = [(1, 0, FORWARDED), (2, 0, FORWARDED), (3, 1, SUPPRESSED), (4, 1, SUPPRESSED),
              (5, 2, FORWARDED), (6, 2, FORWARDED)]
    assert oracle_rewrite(labels) == {1: 1, 2: 2, 5: 3, 6: 4}
    assert oracle_rewrite([(s, s, FORWARDED) for s in range(10)]) == {s: s for s in range(10)}


def test_oracle_alternate_frames_shift_by_two_each():
    labels = []
    for f in range(6):
        for k in range(2):
            labels.append((2 * f + k, f, SUPPRESSED if f % 2 else FORWARDED))
    got = oracle_rewrite(labels)
    for f in range(0, 6, 2):
        shift = 2 * (f // 2)
        assert got[2 * f] == 2 * f - shift and got[2 * f + 1] == 2 * f + 1 - shift


def test_oracle_lost_packet_keeps_its_slot():
    labels = [(1, 0, FORWARDED), (2, 0, LOST), (3, 1, SUPPRESSED), (4, 2, FORWARDED)]
    assert oracle_rewrite(labels) == {1: 1, 2: 2, 4: 3}


def test_receiver_nacks():
    assert receiver_nacks([1, 2, 4]) == [3]
    assert receiver_nacks([1, 2, 3]) == []
    assert receiver_nacks([]) == []
    assert receiver_nacks([4, 1, 2]) == [3]
    assert receiver_nacks([65534, 1]) == [65535, 0]


def test_unwrap_crosses_boundary():
    assert unwrap([65535, 0, 1, 65534]) == [65535, 65536, 65537, 65534]


def test_overhead_definition():
    assert overhead([1, 2, 3, 5], [1, 2, 3, 4]) == pytest.approx(1 / 4)
    assert overhead([], []) == 0.0


# -- property suite --------------------------------------------------------

schedules = st.fixed_dictionaries({
    "seed": st.integers(0, 2**32 - 1),
    "n_frames": st.integers(1, 40),
    "min_ppf": st.integers(1, 3),
    "extra_ppf": st.integers(0, 3),
    "cycle": st.sampled_from(CYCLES),
    "dropped": st.sets(st.integers(1, 2)),
    "loss": st.floats(0, 0.3),
    "reorder": st.floats(0, 0.5),
    "depth": st.integers(0, 8),
    "seq0": st.integers(0, 65535),
    "frame0": st.integers(0, 65535).map(lambda f: f & ~7),
    "switch": st.none() | st.tuples(st.integers(0, 60), st.sets(st.integers(1, 2))),
})


@settings(max_examples=10_000, deadline=None)
@given(schedules)
def test_rewrite_invariants_hold_on_random_schedules(sched):
    rule, pkts, sup, arrivals = make_schedule(**sched)
    for heuristic in ("slm", "slr"):
        out = run_rewriter(heuristic, rule, pkts, arrivals)
        assert invariant_violations(pkts, sup, out) == [], heuristic


def test_checker_catches_duplicates_and_masking():
    pkts = [MediaPkt(s, s) for s in range(4)]
    sup = [False] * 4
    assert invariant_violations(pkts, sup, [(0, 0), (1, 1), (3, 2)])  # masks packet 2
    assert invariant_violations(pkts, sup, [(0, 0), (1, 0)])
    assert invariant_violations(pkts, sup, [(0, 5), (1, 4)])


def test_slr_overhead_not_above_slm_with_reordering():
    diffs = []
    for seed in range(100):
        rule, pkts, sup, arrivals = make_schedule(seed, 200, 2, 2, (0, 2, 1, 2), {2}, 0.1, 0.05, 4, 0, 0)
        res = {}
        for h in ("slm", "slr"):
            out = [v for _, v in run_rewriter(h, rule, pkts, arrivals)]
            ideal = []
            count = 0
            for i, s in enumerate(sup):
                ideal.append((i - count) & 0xFFFF)
                count += s
            res[h] = overhead(out, [ideal[i] for i in arrivals])
        diffs.append(res["slm"] - res["slr"])
    assert sum(diffs) / len(diffs) >= 0


# -- rewrite table ---------------------------------------------------------

def test_stream_key_total_order():
    keys = [StreamKey(("10.0.0.2", 5000), ("10.0.0.1", 6000), 7), StreamKey(("10.0.0.1", 5000), ("10.0.0.3", 1), 9)]
    assert sorted(keys)[0].sender_addr == ("10.0.0.1", 5000)


def test_rewrite_table_unique_and_reuses():
    t = RewriteTable(size=3)
    keys = [StreamKey(("a", i), ("b", i), i) for i in range(3)]
    idx = [t.allocate(k) for k in keys]
    assert len(set(idx)) == 3
    assert t.allocate(keys[0]) == idx[0]
    with pytest.raises(IndexExhausted):
        t.allocate(StreamKey(("c", 0), ("d", 0), 0))
    t.free(keys[1])
    assert t.allocate(StreamKey(("c", 0), ("d", 0), 0)) == idx[1]
    assert len(t) == 3


def test_stream_rewriter_drops_suppressed_and_settles():
    rule = DropRule(dropped_layers={2}, min_packets_per_frame=1, active_from=2)
    rw = StreamRewriter(rule, "slr")
    assert rw.process(MediaPkt(0, 0)).forward
    assert rw.process(MediaPkt(1, 1)).forward  # before active_from
    assert rw.process(MediaPkt(2, 3)) == DROP
    for f in range(4, 80):
        rw.process(MediaPkt(f, f))
    assert rw.rule.active_from is None


def test_cadence_switch_counts_old_frames_under_old_rule():
    old = DropRule(dropped_layers={2}, min_packets_per_frame=1)
    new = old.switch_to((), 8)
    assert new.is_suppressed(7) and not new.is_suppressed(9)
    # frames 1, 3, 5, 7 under the old cadence; nothing from 8 on
    assert new.suppressed_between(0, 12) == 4
    assert new.last_suppressed_before(12, 0) == 7
    assert new.settled().suppressed_between(0, 12) == 0


def test_upgrade_does_not_create_phantom_gap():
    rule = DropRule(dropped_layers={2}, min_packets_per_frame=2)
    rw = StreamRewriter(rule, "slr")
    seq, out = 0, []
    for f in range(12):
        if f == 8:
            rw.set_rule(rule.switch_to((), 8))
        for i in range(2):
            if f < 8 and rule.is_suppressed(f):
                seq += 1
                continue
            out.append(rw.process(MediaPkt(seq, f, 0, i == 0, i == 1)).new_seq)
            seq += 1
    assert out == list(range(len(out)))


def test_random_seeded_schedules_bulk():
    rng = random.Random(7)
    for _ in range(300):
        sched = dict(seed=rng.getrandbits(32), n_frames=rng.randint(1, 60), min_ppf=rng.randint(1, 3),
                     extra_ppf=rng.randint(0, 4), cycle=rng.choice(CYCLES), dropped={2},
                     loss=rng.uniform(0, 0.3), reorder=rng.uniform(0, 1), depth=8,
                     seq0=rng.randint(0, 65535), frame0=0)
        rule, pkts, sup, arrivals = make_schedule(**sched)
        for h in ("slm", "slr"):
            assert invariant_violations(pkts, sup, run_rewriter(h, rule, pkts, arrivals)) == []
