"""Where the packets of a three-party meeting are handled.

Every simulated packet is serialized, parsed from bytes and classified. Media
without a key-frame structure and SR/SDES stay in the data plane; RR, REMB
and key-frame descriptors are also copied to the agent; STUN goes to the
agent only.
"""

import argparse

from sfu_offload.sim import bundled_scenario, run_meeting

ap = argparse.ArgumentParser()
ap.add_argument("--duration", type=float, default=60.0, help="seconds of meeting (600 for the full run)")
args = ap.parse_args()

cfg = bundled_scenario("three_party")
cfg["duration_s"] = args.duration
m = run_meeting(cfg)
d = m.data

print(f"{args.duration:g} s, three participants\n")
print(f"{'route':<32}{'packets %':>10}{'bytes %':>10}")
for route, pct in d["plane_split"]["packet_pct"].items():
    print(f"{route:<32}{pct:>10.2f}{d['plane_split']['byte_pct'][route]:>10.2f}")

t = d["traffic"]
print(f"\nRTP {t['rtp_pps_per_participant']:.1f} packets/s per participant, "
      f"{t['rtp_packet_pct']:.2f}% of packets; video {t['video_byte_pct']:.2f}% of bytes")
for kind, n in t["packets_by_kind"].items():
    print(f"  {kind:<8}{n:>9} packets {t['bytes_by_kind'][kind]:>12} bytes")
