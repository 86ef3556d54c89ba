"""How many meetings fit on one switch, per replication mode and meeting size.

Each tree root can be shared by two meetings. Non-adapted meetings need one
tree, receiver-adapted ones one per quality, and sender-receiver-adapted
ones one per (sender, quality), so their capacity falls with meeting size.
"""

from sfu_offload.planner import CapacityParams, Mode, capacity

MODES = (Mode.NRA, Mode.RA_R, Mode.RA_SR)

print(f"{'N':>3} " + " ".join(f"{m.value:>8}" for m in MODES))
for n in range(2, 11):
    row = [capacity(m, CapacityParams(participants=n)) for m in MODES]
    print(f"{n:>3} " + " ".join(f"{v:>8}" for v in row))

# Past a few participants the egress bandwidth, not the tree count, is the limit.
print("\ntree bound only, N=10:",
      {m.value: capacity(m, CapacityParams(participants=10, egress_budget_bps=None)) for m in MODES})
print("two-party meetings use unicast rules:", capacity(Mode.TWO_PARTY))
