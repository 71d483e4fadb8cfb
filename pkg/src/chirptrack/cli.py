"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 tracking or
calibration failed, 4 file or I/O error. The log level comes from the
``CHIRPTRACK_LOG`` environment variable (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .bounds import error_surface, write_surface_csv
from .chirp import ChirpParams
from .errors import (CalibrationFailed, ChirpTrackError, ConfigurationError, IngestError,
                     TriangulationError)
from .fusion import LARGE_ARRAY, SMALL_ARRAY, MicArrayGeometry

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_TRACKING = 3
EXIT_IO = 4

log = logging.getLogger("chirptrack")


def _geometry(name: str | None) -> MicArrayGeometry | None:
    if name in (None, "none"):
        return None
    return {"large": LARGE_ARRAY, "small": SMALL_ARRAY}[name]


def _print_stats(rep) -> None:
    for m in sorted(rep.stats):
        s = rep.stats[m]
        if not s["n"]:
            print(f"{m:>16}: no estimates")
            continue
        print(f"{m:>16}: n={s['n']:<6d} median={s['median'] * 1e3:.3f} mm  "
              f"p90={s['p90'] * 1e3:.3f} mm  p99={s['p99'] * 1e3:.3f} mm")


def cmd_simulate(args) -> int:
    from . import harness
    from .scenario import load_scenario

    sc = load_scenario(args.scenario).with_overrides(seed=args.seed, duration=args.duration,
                                                     snr_db=args.snr)
    if args.wav:
        harness.render_to_wav(sc, args.wav)
        print(f"wrote {args.wav}")
    if args.transmitters and args.transmitters > 1:
        rep = harness.run_concurrent(sc, args.transmitters, seed_truth=args.seed_truth)
    else:
        rep = harness.run(sc)
    if args.out:
        rep.save(args.out)
        print(f"report written to {args.out}")
    print(f"scenario {sc.name}: {rep.status}")
    _print_stats(rep)
    return EXIT_OK if rep.status == "ok" else EXIT_TRACKING


def cmd_track(args) -> int:
    from .harness import track_file
    from .records import write_estimates_csv, write_poses
    from .sync import ClockCalibration

    cal = ClockCalibration.load(args.calibration) if args.calibration else None
    res = track_file(args.file, ChirpParams(fs=args.fs), _geometry(args.array), cal, args.touch,
                     args.touch_duration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flat = [e for lst in res.estimates for e in lst]
    write_estimates_csv(flat, out / "estimates.csv")
    if res.poses:
        with (out / "poses.bin").open("wb") as fh:
            write_poses(fh, res.poses)
    if res.calibration is not None:
        res.calibration.save(out / "calibration.json")
    print(f"{len(flat)} range estimates, {len(res.poses)} poses -> {out}")
    if res.truncated:
        print("input was truncated; results cover the complete frames only")
    for i in res.lost_channels:
        print(f"channel {i}: signal lost")
    tracked = [lst for lst in res.estimates if lst]
    return EXIT_OK if tracked else EXIT_TRACKING


def cmd_sweep(args) -> int:
    rows = error_surface(args.n, args.n_theta, ChirpParams(), simulate=not args.no_simulate)
    write_surface_csv(rows, args.out)
    over = max(r["phase_measured_m"] - r["phase_bound_m"] for r in rows)
    print(f"{len(rows)} grid points -> {args.out}")
    if np.isfinite(over):
        print(f"largest excess of tracker error over the bound: {over * 1e3:+.4f} mm")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .harness import throughput_bench

    r = throughput_bench(args.channels, args.seconds)
    print(json.dumps(r, indent=2))
    if args.channels and r["real_time_factor"] <= 1.0:
        return EXIT_TRACKING
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .harness import track_file

    res = track_file(args.file, ChirpParams(fs=args.fs), _geometry(args.array), None, True,
                     args.duration)
    res.calibration.save(args.out)
    print(f"calibration -> {args.out}")
    print(res.calibration.to_json())
    return EXIT_OK


def cmd_report(args) -> int:
    from .harness import RunReport

    rep = RunReport.load(args.run_dir)
    print(f"scenario {rep.scenario}: {rep.status}")
    _print_stats(rep)
    if rep.recompute_stats() != rep.stats:
        print("summary statistics do not match the raw series")
        return EXIT_VALIDATION
    for ev in rep.events[: args.events]:
        print(f"  event chirp {ev['chirp']}: {ev['kind']}: {ev['message']}")
    return EXIT_OK


def cmd_tail(args) -> int:
    from .records import tail_poses

    n = 0
    for pose in tail_poses(args.file, follow=args.follow, idle_timeout=args.timeout):
        print(f"{pose.t:.4f} {pose.x:+.5f} {pose.y:+.5f} {pose.z:+.5f} {pose.quality.value}")
        n += 1
        if args.count and n >= args.count:
            break
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chirptrack",
                                 description="FMCW phase tracking, simulation and evaluation")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario through the channel simulator")
    s.add_argument("scenario", help="scenario JSON path or bundled name (e.g. static_0.4m)")
    s.add_argument("--out", help="directory for report.json and CSV series")
    s.add_argument("--seed", type=int, help="override the scenario seed")
    s.add_argument("--duration", type=float, help="override the duration (s)")
    s.add_argument("--snr", type=float, help="override snr_db")
    s.add_argument("--transmitters", type=int, default=1,
                   help="run N concurrent transmitters (single microphone)")
    s.add_argument("--seed-truth", action="store_true",
                   help="with --transmitters, seed trackers from ground truth instead of the DFT")
    s.add_argument("--wav", help="also write the rendered microphone audio to this WAV file")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("track", help="track a recorded 32-bit float WAV file")
    s.add_argument("file")
    s.add_argument("--out", default="track_out", help="output directory")
    s.add_argument("--array", choices=["none", "large", "small"], default="none")
    s.add_argument("--calibration", help="clock calibration JSON to apply")
    s.add_argument("--touch", action="store_true",
                   help="the recording starts with a touch calibration")
    s.add_argument("--touch-duration", type=float, default=5.0)
    s.add_argument("--fs", type=float, default=48000.0)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("sweep", help="two-path error surface as CSV")
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--n-theta", type=int, default=8)
    s.add_argument("--no-simulate", action="store_true", help="closed forms only")
    s.add_argument("--out", default="error_surface.csv")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("bench", help="pipeline throughput")
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--seconds", type=float, default=2.0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("calibrate", help="touch calibration from a recorded WAV file")
    s.add_argument("file")
    s.add_argument("--out", default="calibration.json")
    s.add_argument("--array", choices=["none", "large", "small"], default="none")
    s.add_argument("--duration", type=float, default=5.0)
    s.add_argument("--fs", type=float, default=48000.0)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("report", help="summarize and verify a saved run")
    s.add_argument("run_dir")
    s.add_argument("--events", type=int, default=10, help="events to list")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("tail", help="print poses from a binary pose file")
    s.add_argument("file")
    s.add_argument("--follow", action="store_true")
    s.add_argument("--timeout", type=float, default=None, help="stop following after idle seconds")
    s.add_argument("--count", type=int, default=0)
    s.set_defaults(func=cmd_tail)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CHIRPTRACK_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CalibrationFailed, TriangulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRACKING
    except (ConfigurationError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (IngestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ChirpTrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRACKING


if __name__ == "__main__":
    sys.exit(main())
