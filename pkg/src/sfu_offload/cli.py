"""sfu-offload command line: capacity tables, simulation runs, rewrite
benchmarks and trace annotation.

Exit codes: 0 success, 2 usage error, 1 runtime error. The log level comes
from SFU_OFFLOAD_LOG_LEVEL (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

from .planner import CapacityParams, Mode, capacity
from .sim import ConfigError, SimConfig, bundled_scenario, rewrite_bench, run_meeting
from .wire.classify import StreamRegistry
from .wire.describe import describe_bytes

log = logging.getLogger("sfu_offload")

LOG_ENV = "SFU_OFFLOAD_LOG_LEVEL"
TRACE_VERSION = 1


class UsageError(Exception):
    pass


def _int_range(text: str) -> List[int]:
    """'10', '3-8' or '3,5,9'."""
    try:
        out: List[int] = []
        for part in text.split(","):
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N, LO-HI or a comma list, got {text!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("values must be >= 1")
    return out


def _fraction(text: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 <= x <= 1:
        raise argparse.ArgumentTypeError(f"{x} is outside [0, 1]")
    return x


def _positive(text: str) -> int:
    try:
        x = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if x < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return x


# -- capacity ------------------------------------------------------------------

def cmd_capacity(args, out) -> int:
    modes = [Mode(m) for m in args.mode] if args.mode else [Mode.NRA, Mode.RA_R, Mode.RA_SR]
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["mode", "participants", "qualities", "trees", "meetings_per_tree", "max_meetings"])
    for mode in modes:
        for n in args.participants:
            p = CapacityParams(trees=args.trees, meetings_per_tree=args.m, qualities=args.qualities,
                               participants=n,
                               egress_budget_bps=None if args.no_egress_cap else args.egress_bps)
            w.writerow([mode.value, n, args.qualities, args.trees, args.m, capacity(mode, p)])
    return 0


# -- simulate ------------------------------------------------------------------

def _load_scenario(args) -> SimConfig:
    if args.config.startswith("bundled:"):
        return SimConfig.from_dict(bundled_scenario(args.config.split(":", 1)[1]))
    if not Path(args.config).is_file():
        raise ConfigError(f"{args.config}: no such file")
    return SimConfig.load(args.config)


def cmd_simulate(args, out) -> int:
    cfg = _load_scenario(args)
    if args.duration is not None:
        cfg.duration_s = args.duration
    metrics = run_meeting(cfg, seed=args.seed)
    if args.out is None:
        out.write(metrics.to_json())
        return 0
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics.to_json())
    path.with_suffix(".csv").write_text(metrics.to_csv())
    path.with_suffix(".selection.csv").write_text(metrics.selection_csv())
    ps = metrics.data["plane_split"]
    log.info("wrote %s: data plane %.2f%% packets, %.2f%% bytes", path,
             ps["data_plane_packet_pct"], ps["data_plane_byte_pct"])
    return 0


# -- rewrite-bench -------------------------------------------------------------

def _bench_one(job):
    return rewrite_bench(**job)


def cmd_rewrite_bench(args, out) -> int:
    heuristics = ["slm", "slr"] if args.heuristic == "both" else [args.heuristic]
    jobs = [dict(seed=args.seed + i, loss=loss, heuristic=h, packets=args.packets, reorder=args.reorder,
                 depth=args.depth, dropped_layers=tuple(args.cadence))
            for h in heuristics for loss in args.loss for i in range(args.seeds)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_bench_one, jobs))
    else:
        results = [_bench_one(j) for j in jobs]
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["heuristic", "loss", "reorder", "seed", "forwarded", "nacks", "oracle_nacks", "overhead"])
    for r in results:
        w.writerow([r.heuristic, r.loss, r.reorder, r.seed, r.forwarded, r.nacks, r.oracle_nacks,
                    f"{r.overhead:.6f}"])
    groups = {}
    for r in results:
        groups.setdefault((r.heuristic, r.loss), []).append(r.overhead)
    for (h, loss), xs in groups.items():
        log.info("%s loss=%g: mean overhead %.4f over %d seeds", h, loss, sum(xs) / len(xs), len(xs))
    return 0


# -- parse ---------------------------------------------------------------------

def annotate_trace(lines, registry: Optional[StreamRegistry] = None):
    """Yield one annotated dict per non-blank JSONL record.

    Records are {"time_us", "direction", "port", "hex"}. A bad record gets an
    "error" field and the rest of the trace is still processed.
    """
    registry = registry or StreamRegistry()
    last_t = None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        out = {"line": lineno}
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
            out.update({k: rec.get(k) for k in ("time_us", "direction", "port")})
            if rec.get("direction") not in ("in", "out"):
                raise ValueError("direction must be 'in' or 'out'")
            data = bytes.fromhex(rec["hex"])
        except (ValueError, KeyError, TypeError) as exc:
            out["error"] = f"bad record: {exc}"
            yield out
            continue
        t = out["time_us"]
        if isinstance(t, int) and last_t is not None and t < last_t:
            out["warning"] = "time went backwards"
        if isinstance(t, int):
            last_t = t if last_t is None else max(last_t, t)
        out["parsed"] = describe_bytes(data, registry)
        if out["parsed"]["type"] == "error":
            out["error"] = out["parsed"]["error"]
        yield out


def cmd_parse(args, out) -> int:
    registry = StreamRegistry(av1_ext_id=args.av1_ext_id)
    with open(args.trace) as fh:
        for rec in annotate_trace(fh, registry):
            out.write(json.dumps(rec, sort_keys=True) + "\n")
    return 0


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfu-offload", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("capacity", help="max concurrent meetings per replication mode (CSV)")
    c.add_argument("--mode", action="append", choices=[m.value for m in Mode],
                   help="repeatable; default: nra, ra_r and ra_sr")
    c.add_argument("--participants", "-N", type=_int_range, default=[3],
                   help="meeting size: N, LO-HI or a comma list (default 3)")
    c.add_argument("--qualities", "-q", type=_positive, default=3)
    c.add_argument("--trees", "-T", type=_positive, default=65536)
    c.add_argument("--m", type=_positive, default=2, help="meetings sharing one tree")
    c.add_argument("--egress-bps", type=float, default=CapacityParams().egress_budget_bps)
    c.add_argument("--no-egress-cap", action="store_true", help="ignore the egress bandwidth bound")
    c.set_defaults(func=cmd_capacity)

    s = sub.add_parser("simulate", help="run a scenario and write metrics")
    s.add_argument("config", help="scenario JSON path, or bundled:NAME (three_party, feedback_four)")
    s.add_argument("--seed", type=int)
    s.add_argument("--duration", type=float, help="override duration_s")
    s.add_argument("--out", help="metrics JSON path; .csv and .selection.csv are written beside it")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("rewrite-bench", help="extra NACKs of a rewriter against the ideal one (CSV)")
    b.add_argument("--heuristic", choices=["slm", "slr", "both"], default="slr")
    b.add_argument("--loss", type=_fraction, nargs="+", default=[0.1])
    b.add_argument("--reorder", type=_fraction, default=0.0)
    b.add_argument("--depth", type=int, default=4, help="max reorder displacement in packets")
    b.add_argument("--packets", type=_positive, default=100_000)
    b.add_argument("--seed", type=int, default=0, help="first seed")
    b.add_argument("--seeds", type=_positive, default=1, help="number of consecutive seeds")
    b.add_argument("--cadence", type=_int_range, default=[2], help="suppressed temporal layers, e.g. 2 or 1,2")
    b.add_argument("--jobs", type=_positive, default=1)
    b.set_defaults(func=cmd_rewrite_bench)

    t = sub.add_parser("parse", help="annotate a JSONL packet trace")
    t.add_argument("trace")
    t.add_argument("--av1-ext-id", type=int, default=StreamRegistry().av1_ext_id)
    t.set_defaults(func=cmd_parse)
    return p


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, out)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"sfu-offload {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
