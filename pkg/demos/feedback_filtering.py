"""Why the switch filters bandwidth feedback.

One sender, three receivers on 1, 3 and 6 Mb/s links. A sender that hears
every REMB aims for the weakest receiver. With filtering only the receiver
with the best smoothed estimate is heard, and the weaker ones get a lower
temporal layer instead.
"""

from sfu_offload.sim import bundled_scenario, run_meeting

for filtered in (False, True):
    cfg = bundled_scenario("feedback_four")
    cfg["duration_s"] = 20
    cfg["filter_feedback"] = filtered
    m = run_meeting(cfg)
    fb = m.data["feedback"]
    target = fb["sender_target_bps"]["s"]
    print(f"filtering {'on ' if filtered else 'off'}: sender target {target['final_bps'] / 1e6:g} Mb/s, "
          f"{fb['remb_delivered']} of {fb['remb_received']} REMBs passed on, {fb['churn']} selection changes")
