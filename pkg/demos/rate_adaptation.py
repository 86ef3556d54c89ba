"""One receiver's link drops to 1 Mb/s and its video halves to 15 fps.

p3's REMB reports fall below the upgrade threshold, the agent's estimate
follows, and at the next frame boundary the switch stops sending p3 the top
temporal layer. p1 and p2 keep receiving everything.
"""

import argparse

from sfu_offload.sim import bundled_scenario, run_meeting

ap = argparse.ArgumentParser()
ap.add_argument("--duration", type=float, default=40.0)
args = ap.parse_args()

cfg = bundled_scenario("three_party")
cfg["duration_s"] = args.duration
m = run_meeting(cfg)

for c in m.data["rate_adaptation"]["target_changes"]:
    print(f"t={c['time_us'] / 1e6:.2f} s: {c['receiver']} -> {c['level']} from frame {c['first_frame']}")

print(f"\n{'t':>4}  {'p1->p3':>7} {'p2->p3':>7} {'p3->p1':>7}")
for t in range(len(m.fps("p3", "p1"))):
    row = (m.fps("p3", "p1")[t], m.fps("p3", "p2")[t], m.fps("p1", "p3")[t])
    print(f"{t:>4}  {row[0]:>7} {row[1]:>7} {row[2]:>7}  {'#' * (row[0] // 2)}")

print("\nall streams decodable:", m.data["decodable"], "| NACKs:", m.data["retransmission"]["nacks"])
