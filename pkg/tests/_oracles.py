"""Reference checks shared by the rewrite tests and the acceptance run.

Nothing here calls into the rewrite module's own oracle; ideal numbers are
recomputed from packet indices.
"""

import random

from sfu_offload.rewrite import DropRule, MediaPkt, StreamRewriter

CYCLES = [(0, 2, 1, 2), (0, 1), (0, 2, 1, 2, 0, 2, 1, 2), (0, 1, 1, 1)]


def make_schedule(seed, n_frames, min_ppf, extra_ppf, cycle, dropped, loss, reorder, depth,
                  seq0, frame0, switch=None):
    """Packets in send order plus the arrival order of surviving non-suppressed ones.

    ``switch`` is an optional (frame offset, new dropped layers) pair; the
    returned rule then covers both cadences.
    """
    rng = random.Random(seed)
    rule = DropRule(cycle=cycle, dropped_layers=frozenset(dropped), min_packets_per_frame=min_ppf,
                    phase=frame0)
    if switch is not None:
        at, dropped2 = switch
        rule = rule.switch_to(dropped2, frame0 + at)
    pkts, suppressed = [], []
    s = seq0
    for k in range(n_frames):
        f = (frame0 + k) & 0xFFFF
        size = min_ppf + rng.randint(0, extra_ppf)
        for i in range(size):
            pkts.append(MediaPkt(s & 0xFFFF, f, cycle[k % len(cycle)], i == 0, i == size - 1))
            suppressed.append(rule.is_suppressed(f))
            s += 1
    survivors = [i for i, sup in enumerate(suppressed) if not sup and rng.random() >= loss]
    keyed = []
    for pos, i in enumerate(survivors):
        shift = rng.randint(1, depth) + 0.5 if depth and rng.random() < reorder else 0
        keyed.append((pos + shift, pos, i))
    arrivals = [i for _, _, i in sorted(keyed)]
    return rule, pkts, suppressed, arrivals


def run_rewriter(heuristic, rule, pkts, arrivals):
    """Forwarded (index, new seq) pairs.

    A switched rule is installed the way the control plane does it: the old
    cadence runs until the first packet at or past the switch frame shows up.
    """
    from sfu_offload.rewrite import frame_diff

    pending = None
    if rule.active_from is not None:
        pending, rule = rule, rule.before or DropRule(rule.cycle, frozenset(), rule.min_packets_per_frame, rule.phase)
    rw = StreamRewriter(rule, heuristic)
    out = []
    for i in arrivals:
        if pending is not None and frame_diff(pkts[i].frame, pending.active_from) >= 0:
            rw.set_rule(pending)
            pending = None
        a = rw.process(pkts[i])
        if a.forward:
            out.append((i, a.new_seq))
    return out


def invariant_violations(pkts, suppressed, outputs):
    """Empty list iff order, uniqueness and loss visibility all hold."""
    if not outputs:
        return []
    problems = []
    values = [v for _, v in outputs]
    if len(set(values)) != len(values):
        problems.append("duplicate rewritten value")
    base = outputs[0][1]

    def ext(v):
        d = (v - base) & 0xFFFF
        return d - 65536 if d >= 32768 else d

    ideal, count = [], 0
    for sup in suppressed:
        ideal.append(None if sup else -count)
        count += sup
    ordered = sorted(outputs)
    for (ia, va), (ib, vb) in zip(ordered, ordered[1:]):
        got = ext(vb) - ext(va)
        if got <= 0:
            problems.append(f"order broken between packets {ia} and {ib}")
        want = (ib + ideal[ib]) - (ia + ideal[ia])
        if got < want:
            problems.append(f"loss masked between packets {ia} and {ib}: gap {got} < {want}")
    return problems
