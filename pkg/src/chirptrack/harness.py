"""Scenario execution, reports, sample-file ingestion and throughput measurement.

A run renders every microphone channel block by block, lets the receiver
start (oracle seed or touch calibration), then feeds the same analytic
buffers to each enabled method. Errors are measured against the simulator's
ground truth at the true (transmitter clock) time of each estimate.

A run directory holds ``report.json`` (summary, timing, events) and, per
method, ``<method>.csv`` (raw error series) and ``<method>_cdf.csv``.
Summary statistics are recomputable exactly from the raw series.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.io import wavfile

from . import channel as ch
from .baseline import CarrierPhaseTracker, PeakRanger
from .bounds import error_surface
from .chirp import ChirpParams, SampleBlock
from .dsp import AnalyticStream, PseudoSchedule, RxBuffer
from .errors import (CalibrationFailed, ChirpTrackError, ConfigurationError, FrameUnderrun,
                     IngestError, SignalLost)
from .fusion import ArrayTracker, MicArrayGeometry, Pose3D
from .scenario import Scenario
from .sync import ClockCalibration, calibrate
from .tracker import ChannelTracker, Quality, RangeEstimate

log = logging.getLogger(__name__)

REPORT_SCHEMA = "run_report_v1"
SERIES_COLUMNS = ("t", "mic", "estimate", "truth", "error")
CDF_POINTS = 101
BLOCK_S = 0.1


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

def summarize(err) -> dict:
    """Median, p90 and p99 of ``|err|`` plus count, mean and max."""
    a = np.abs(np.asarray(err, dtype=float))
    a = a[np.isfinite(a)]
    if a.size == 0:
        return {"n": 0, "median": None, "p90": None, "p99": None, "mean": None, "max": None}
    return {"n": int(a.size), "median": float(np.median(a)), "p90": float(np.percentile(a, 90)),
            "p99": float(np.percentile(a, 99)), "mean": float(np.mean(a)), "max": float(np.max(a))}


def cdf_points(err, n: int = CDF_POINTS) -> list[tuple[float, float]]:
    """``(probability, |error|)`` pairs at ``n`` evenly spaced probabilities."""
    a = np.abs(np.asarray(err, dtype=float))
    a = a[np.isfinite(a)]
    if a.size == 0:
        return []
    q = np.linspace(0.0, 1.0, n)
    return [(float(pq), float(v)) for pq, v in zip(q, np.quantile(a, q))]


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class RunReport:
    scenario: str
    series: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    stats: dict[str, dict] = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    events: list[dict] = field(default_factory=list)
    status: str = "ok"
    calibration: dict | None = None
    extra: dict = field(default_factory=dict)
    schema: str = REPORT_SCHEMA

    def add_series(self, method: str, t, mic, est, truth) -> None:
        t = np.asarray(t, float)
        est = np.asarray(est, float)
        truth = np.asarray(truth, float)
        self.series[method] = {"t": t, "mic": np.asarray(mic, int), "estimate": est,
                               "truth": truth, "error": est - truth}
        self.stats[method] = summarize(self.series[method]["error"])

    def recompute_stats(self) -> dict[str, dict]:
        return {m: summarize(s["error"]) for m, s in self.series.items()}

    def summary_dict(self) -> dict:
        return {"schema": self.schema, "scenario": self.scenario, "status": self.status,
                "stats": self.stats, "timing": self.timing, "events": self.events,
                "calibration": self.calibration, "extra": self.extra,
                "methods": sorted(self.series)}

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for m, s in self.series.items():
            with (out / f"{m}.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(SERIES_COLUMNS)
                for row in zip(*(s[c] for c in SERIES_COLUMNS)):
                    w.writerow([repr(float(row[0])), int(row[1])] + [repr(float(x)) for x in row[2:]])
            with (out / f"{m}_cdf.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("probability", "abs_error_m"))
                for q, v in cdf_points(s["error"]):
                    w.writerow((repr(q), repr(v)))
        (out / "report.json").write_text(json.dumps(self.summary_dict(), indent=2, sort_keys=True)
                                         + "\n")
        return out

    @classmethod
    def load(cls, out_dir) -> "RunReport":
        out = Path(out_dir)
        try:
            meta = json.loads((out / "report.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestError(f"cannot read report in {out}: {exc}") from exc
        if meta.get("schema") != REPORT_SCHEMA:
            raise IngestError(f"unsupported report schema {meta.get('schema')!r}")
        rep = cls(meta["scenario"], stats=meta["stats"], timing=meta["timing"],
                  events=meta["events"], status=meta["status"], calibration=meta["calibration"],
                  extra=meta.get("extra", {}))
        for m in meta["methods"]:
            with (out / f"{m}.csv").open(newline="") as fh:
                rows = list(csv.reader(fh))[1:]
            cols = list(zip(*rows)) if rows else [() for _ in SERIES_COLUMNS]
            rep.series[m] = {"t": np.array(cols[0], float), "mic": np.array(cols[1], int),
                             "estimate": np.array(cols[2], float),
                             "truth": np.array(cols[3], float), "error": np.array(cols[4], float)}
        return rep


# --------------------------------------------------------------------------
# rendering helpers
# --------------------------------------------------------------------------

def oracle_schedule(p: ChirpParams, clock_ppm: float = 0.0, clock_offset0: float = 0.0) -> PseudoSchedule:
    """Receiver schedule that exactly undoes the simulated clock terms."""
    eps = clock_ppm * 1e-6
    return PseudoSchedule(clock_offset0 / (1 + eps), p.period, eps / (1 + eps), 0.0)


def _mic_seed(seed: int, i: int, stream: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), i, stream])


def lockstep_blocks(sources, models, fs: float, duration: float, block_s: float = BLOCK_S,
                    seed: int = 0, stream: int = 0) -> Iterator[list[SampleBlock]]:
    """Yield per-microphone lists of consecutive blocks covering ``duration``."""
    if duration <= 0:
        raise ConfigurationError("duration must be positive")
    rs = [ch.Renderer(src, m, fs, seed=_mic_seed(seed, i, stream))
          for i, (src, m) in enumerate(zip(sources, models))]
    total = int(math.ceil(duration * fs))
    n = max(int(round(block_s * fs)), 1)
    done = 0
    while done < total:
        k = min(n, total - done)
        yield [r.render(k) for r in rs]
        done += k


def render_scenario(sc: Scenario):
    """``(motion, models, block iterator)`` for a track scenario."""
    sc.validate()
    motion = sc.build_motion()
    models = sc.channel_models(motion)
    trains = [ch.ChirpTrain(sc.chirp) for _ in models]
    return motion, models, lockstep_blocks(trains, models, sc.chirp.fs, sc.total_duration,
                                           seed=sc.seed)


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------

class _Pipeline:
    """Tracking state shared across blocks for one run."""

    def __init__(self, sc: Scenario, trackers, bufs, streams, schedule, first_chirp: int):
        self.sc = sc
        self.p = sc.chirp
        self.trackers = trackers
        self.bufs = bufs
        self.streams = streams
        g = sc.array()
        self.array = ArrayTracker(trackers, g) if g is not None else None
        self.estimates: list[list[RangeEstimate]] = [[] for _ in trackers]
        self.poses: list[Pose3D] = []
        self.peak = ([PeakRanger(self.p, schedule, first_chirp, i) for i in range(len(bufs))]
                     if "fmcw_peak" in sc.methods else [])
        self.peak_est: list[list] = [[] for _ in self.peak]
        self.faults = sorted(sc.faults, key=lambda f: f["chirp"])
        self.events: list[dict] = []
        self.samples = 0
        self.busy = 0.0

    def push(self, chunk: list[SampleBlock]) -> None:
        t0 = time.perf_counter()
        for st, buf, blk in zip(self.streams, self.bufs, chunk):
            buf.append(*st.push(blk.samples))
        self.samples += sum(b.samples.size for b in chunk)
        self._drain()
        self.busy += time.perf_counter() - t0

    def finish(self) -> None:
        for st, buf in zip(self.streams, self.bufs):
            buf.append(*st.flush())
        self._drain()

    def _inject(self) -> None:
        k = self.trackers[0].next_chirp
        while self.faults and self.faults[0]["chirp"] <= k:
            f = self.faults.pop(0)
            trk = self.trackers[int(f["mic"])]
            if f["chirp"] == k and trk.state is not None:
                trk.state = replace(trk.state, d_end=trk.state.d_end + float(f["delta_m"]))
                self.events.append({"chirp": k, "kind": "fault", "mic": int(f["mic"]),
                                    "message": f"injected {f['delta_m']:+g} m"})

    def _drain(self) -> None:
        if "tracker" in self.sc.methods:
            while True:
                self._inject()
                try:
                    if self.array is not None:
                        res = self.array.step(self.bufs)
                        if res is None:
                            break
                        self.poses.extend(res)
                    else:
                        r = self.trackers[0].step(self.bufs[0])
                        if r is None:
                            break
                        self.estimates[0].extend(r.estimates)
                        for e in r.events:
                            self.events.append({"chirp": r.state.chirp_index, "kind": "tracker",
                                                "mic": 0, "message": e})
                except FrameUnderrun:
                    break
        for pr, buf, acc in zip(self.peak, self.bufs, self.peak_est):
            acc.extend(pr.run(buf))
        self._discard()

    def _discard(self) -> None:
        for i, buf in enumerate(self.bufs):
            ks = []
            if "tracker" in self.sc.methods:
                ks.append(self.trackers[i].next_chirp)
            if self.peak:
                ks.append(self.peak[i].next_chirp)
            trk = self.trackers[i]
            j = int(math.floor((trk.schedule.receive_time(0.0, min(ks)) - buf.t0) * self.p.fs)) - 8
            buf.discard_before(min(j, buf.end))

    def collect(self):
        if self.array is not None:
            self.estimates = self.array.estimates
            for ev in self.array.events:
                self.events.append({"chirp": ev.chirp_index, "kind": ev.kind,
                                    "mic": list(ev.mics), "message": ev.message,
                                    "notify": ev.notify})
        return self.estimates


def run(sc: Scenario, out_dir=None) -> RunReport:
    """Execute a scenario and return (and optionally save) its report."""
    sc.validate()
    if sc.kind == "two_path_sweep":
        rep = run_sweep(sc)
    else:
        rep = _run_track(sc)
    if out_dir is not None:
        rep.save(out_dir)
    return rep


def run_sweep(sc: Scenario) -> RunReport:
    t0 = time.perf_counter()
    rows = error_surface(int(sc.sweep["n"]), int(sc.sweep["n_theta"]), sc.chirp)
    rep = RunReport(sc.name)
    r = np.array([row["a_ratio"] for row in rows])
    idx = np.arange(len(rows))
    rep.add_series("tracker", idx, np.zeros(len(rows), int),
                   [row["phase_measured_m"] for row in rows], np.zeros(len(rows)))
    rep.add_series("bound", idx, np.zeros(len(rows), int),
                   [row["phase_bound_m"] for row in rows], np.zeros(len(rows)))
    rep.add_series("fmcw_peak_model", idx, np.zeros(len(rows), int),
                   [row["peak_err_m"] for row in rows], np.zeros(len(rows)))
    over = np.array([row["phase_measured_m"] - row["phase_bound_m"] for row in rows])
    rep.extra = {"grid": len(rows), "a_ratio_range": [float(r.min()), float(r.max())],
                 "max_excess_over_bound_m": float(over.max())}
    rep.timing = {"wall_s": time.perf_counter() - t0}
    return rep


def _run_track(sc: Scenario) -> RunReport:
    p = sc.chirp
    motion, models, blocks = render_scenario(sc)
    n_mic = len(models)
    rep = RunReport(sc.name)
    t_wall = time.perf_counter()
    first_chirp = 1
    if sc.touch:
        try:
            cal, trackers, bufs, streams, blocks = calibrate(
                blocks, p, sc.touch_distances(), float(sc.calibration.get("duration", 5.0)))
        except CalibrationFailed as exc:
            rep.status = "tracking_failed"
            rep.events.append({"chirp": -1, "kind": "calibration_failed", "mic": -1,
                               "message": str(exc)})
            return rep
        rep.calibration = json.loads(cal.to_json())
        schedule = cal.schedule()
        first_chirp = trackers[0].next_chirp
    else:
        c = sc.channel
        schedule = oracle_schedule(p, c["clock_ppm"], c["clock_offset0"])
        streams = [AnalyticStream(p.fs) for _ in range(n_mic)]
        bufs = [RxBuffer(p.fs) for _ in range(n_mic)]
        trackers = []
        t_true = 0.5 * p.period
        t_rx = float(c["clock_offset0"]) + (1 + c["clock_ppm"] * 1e-6) * t_true
        for i, mic in enumerate(sc.mics()):
            trk = ChannelTracker(p, schedule, mic_id=i)
            d, v = ch.ground_truth(motion, [t_true], mic)
            trk.seed(float(d[0]), float(v[0]), t_rx, first_chirp)
            trackers.append(trk)
    pipe = _Pipeline(sc, trackers, bufs, streams, schedule, first_chirp)
    status = "ok"
    try:
        for chunk in blocks:
            pipe.push(chunk)
        pipe.finish()
    except ChirpTrackError as exc:
        status = "tracking_failed"
        pipe.events.append({"chirp": trackers[0].next_chirp, "kind": "error", "mic": -1,
                            "message": f"{type(exc).__name__}: {exc}"})
    rep.status = status
    ests = pipe.collect()
    rep.events.extend(pipe.events)
    mics = sc.mics()
    t_min = sc.t_start + (0.5 * p.period if sc.touch else 0.0)
    true_time = models[0].true_time
    if "tracker" in sc.methods:
        t, m, d, gt = [], [], [], []
        for i, lst in enumerate(ests):
            sel = [e for e in lst if e.t >= t_min]
            if not sel:
                continue
            ti = np.array([e.t for e in sel])
            t.append(ti)
            m.append(np.full(ti.size, i))
            d.append(np.array([e.d for e in sel]))
            gt.append(ch.ground_truth(motion, true_time(ti), mics[i])[0])
        cat = (lambda xs, dt=float: np.concatenate(xs) if xs else np.zeros(0, dt))
        rep.add_series("tracker", cat(t), cat(m, int), cat(d), cat(gt))
        if pipe.array is not None:
            poses = [q for q in pipe.poses if q.t >= t_min]
            tp = np.array([q.t for q in poses])
            xyz = np.array([q.xyz for q in poses]).reshape(-1, 3)
            truth = motion.position(true_time(tp)) if tp.size else np.zeros((0, 3))
            err3 = np.linalg.norm(xyz - truth, axis=1)
            rep.add_series("tracker_3d", tp, np.full(tp.size, -1), err3, np.zeros(tp.size))
    if pipe.peak:
        t, m, d, gt = [], [], [], []
        for i, acc in enumerate(pipe.peak_est):
            sel = [e for e in acc if e.t >= t_min]
            ti = np.array([e.t for e in sel])
            t.append(ti)
            m.append(np.full(ti.size, i))
            d.append(np.array([e.d for e in sel]))
            gt.append(ch.ground_truth(motion, true_time(ti), mics[i])[0] if ti.size else ti)
        rep.add_series("fmcw_peak", np.concatenate(t), np.concatenate(m), np.concatenate(d),
                       np.concatenate(gt))
    busy = pipe.busy
    if "carrier_phase" in sc.methods:
        busy += _run_carrier(sc, motion, rep, t_min)
    wall = time.perf_counter() - t_wall
    per_ch = pipe.samples / max(n_mic, 1)
    rep.timing = {"wall_s": wall, "processing_s": busy, "samples": pipe.samples,
                  "samples_per_s": pipe.samples / busy if busy > 0 else None,
                  "real_time_factor": per_ch / p.fs / busy * n_mic if busy > 0 else None}
    n_poses = len(pipe.poses)
    rep.extra = {"n_mics": n_mic, "n_poses": n_poses,
                 "t_start": sc.t_start, "fallback": [t.fallback for t in trackers]}
    return rep


def _run_carrier(sc: Scenario, motion, rep: RunReport, t_min: float) -> float:
    """Carrier-phase baseline over the same paths with a continuous tone."""
    p = sc.chirp
    models = sc.channel_models(motion)
    tones = [ch.ToneSource(sc.carrier_hz) for _ in models]
    trks = [CarrierPhaseTracker(sc.carrier_hz, p.fs, p.c) for _ in models]
    mics = sc.mics()
    out = [[] for _ in models]
    busy = 0.0
    n_skip = int(math.floor(t_min / BLOCK_S))
    for j, chunk in enumerate(lockstep_blocks(tones, models, p.fs, sc.total_duration,
                                              seed=sc.seed, stream=1)):
        if j < n_skip:
            continue
        t0 = time.perf_counter()
        for trk, blk, acc in zip(trks, chunk, out):
            acc.extend(trk.push(blk))
        busy += time.perf_counter() - t0
    t, m, d, gt = [], [], [], []
    for i, acc in enumerate(out):
        if not acc:
            continue
        ti = np.array([e.t for e in acc])
        truth = ch.ground_truth(motion, models[i].true_time(ti), mics[i])[0]
        t.append(ti)
        m.append(np.full(ti.size, i))
        d.append(np.array([e.d for e in acc]))
        gt.append(truth - truth[0])
    if t:
        rep.add_series("carrier_phase", np.concatenate(t), np.concatenate(m), np.concatenate(d),
                       np.concatenate(gt))
    return busy


# --------------------------------------------------------------------------
# sample files
# --------------------------------------------------------------------------

@dataclass
class Ingested:
    channels: list[SampleBlock]
    fs: float
    truncated: bool = False

    @property
    def n_channels(self) -> int:
        return len(self.channels)


def write_wav(path, blocks: list[SampleBlock]) -> Path:
    """Write equal-length channels as a 32-bit float WAV file."""
    if not blocks:
        raise IngestError("nothing to write")
    fs = blocks[0].fs
    n = min(b.samples.size for b in blocks)
    data = np.stack([b.samples[:n] for b in blocks], axis=1).astype(np.float32)
    path = Path(path)
    wavfile.write(path, int(round(fs)), data)
    return path


def _read_wav_partial(raw: bytes) -> tuple[int, np.ndarray]:
    """Minimal RIFF reader tolerating a data chunk shorter than declared."""
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise IngestError("not a RIFF/WAVE file")
    pos, fmt = 12, None
    while pos + 8 <= len(raw):
        cid, size = raw[pos:pos + 4], struct.unpack_from("<I", raw, pos + 4)[0]
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise IngestError("malformed fmt chunk")
            tag, nch, rate, _, _, bits = struct.unpack_from("<HHIIHH", body)
            fmt = (tag, nch, rate, bits)
        elif cid == b"data":
            if fmt is None:
                raise IngestError("data chunk before fmt chunk")
            tag, nch, rate, bits = fmt
            if bits != 32 or tag not in (3, 0xFFFE):
                raise IngestError("expected 32-bit float samples")
            usable = (len(body) // (4 * nch)) * 4 * nch
            return rate, np.frombuffer(body[:usable], dtype="<f4").reshape(-1, nch)
        pos += 8 + size + (size & 1)
    raise IngestError("no data chunk")


def ingest(path, p: ChirpParams | None = None) -> Ingested:
    """Read a 32-bit float multichannel WAV file into per-channel blocks.

    A file whose data chunk was cut short yields the complete frames it
    holds with ``truncated`` set.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    truncated = False
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            rate, data = wavfile.read(io.BytesIO(raw))
    except Exception:
        rate, data = _read_wav_partial(raw)
        truncated = True
    data = np.asarray(data)
    if data.dtype != np.float32:
        raise IngestError(f"expected 32-bit float samples, got {data.dtype}")
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] == 0 or data.shape[1] == 0:
        raise IngestError("file holds no samples")
    if p is not None and abs(rate - p.fs) > 1e-9:
        raise IngestError(f"file sample rate {rate} does not match chirp fs {p.fs:g}")
    chans = [SampleBlock(data[:, i].astype(float), 0.0, float(rate)) for i in range(data.shape[1])]
    return Ingested(chans, float(rate), truncated)


def blocks_of(ing: Ingested, block_s: float = BLOCK_S) -> Iterator[list[SampleBlock]]:
    n = ing.channels[0].samples.size
    step = max(int(round(block_s * ing.fs)), 1)
    for j in range(0, n, step):
        yield [SampleBlock(c.samples[j:j + step], j / ing.fs, ing.fs) for c in ing.channels]


@dataclass
class TrackResult:
    estimates: list[list[RangeEstimate]]
    poses: list[Pose3D]
    events: list[dict]
    lost_channels: list[int]
    truncated: bool
    calibration: ClockCalibration | None = None


def track_file(path, p: ChirpParams | None = None, geometry: MicArrayGeometry | None = None,
               calibration: ClockCalibration | None = None, touch: bool = False,
               touch_duration: float = 5.0) -> TrackResult:
    """Track a recorded file offline.

    With ``touch`` the recording must start with the device resting on the
    array; otherwise each channel bootstraps from the DFT first peak at the
    first full chirp (absolute range then carries the peak estimator's
    error). Silent channels report signal loss and are left out of fusion.
    """
    p = p or ChirpParams()
    ing = ingest(path, p)
    n = ing.n_channels
    if geometry is not None and n != 4:
        raise IngestError(f"array tracking needs 4 channels, file has {n}")
    events: list[dict] = []
    it = blocks_of(ing)
    if touch:
        dists = (tuple(float(np.linalg.norm(np.array([0.01, 0, 0]) - m)) for m in geometry.positions)
                 if geometry is not None else (0.01,))
        try:
            calibration, trackers, bufs, streams, it = calibrate(it, p, dists, touch_duration,
                                                                 calibration)
        except CalibrationFailed as exc:
            raise CalibrationFailed(f"{path}: {exc}") from exc
    else:
        schedule = calibration.schedule() if calibration is not None else PseudoSchedule(0.0, p.period)
        streams = [AnalyticStream(p.fs) for _ in range(n)]
        bufs = [RxBuffer(p.fs) for _ in range(n)]
        first = next(it, None)
        if first is None:
            raise IngestError("file holds no samples")
        pending = [first]
        trackers = [ChannelTracker(p, schedule, mic_id=i) for i in range(n)]
        k0 = max(1, int(math.ceil(schedule.start_offset / p.period)) + 1)
        for chunk in it:
            pending.append(chunk)
            if sum(c[0].samples.size for c in pending) * 1.0 / p.fs > (k0 + 1.5) * p.period:
                break
        for chunk in pending:
            for st, buf, blk in zip(streams, bufs, chunk):
                buf.append(*st.push(blk.samples))
        for i, trk in enumerate(trackers):
            try:
                trk.bootstrap(bufs[i], k0)
            except (SignalLost, FrameUnderrun) as exc:
                trk.seed(0.0, 0.0, schedule.receive_time(0.0, k0), k0 + 1)
                trk.state = replace(trk.state, quality=Quality.LOST)
                events.append({"chirp": k0, "kind": "signal_lost", "mic": i, "message": str(exc)})
    array = ArrayTracker(trackers, geometry) if geometry is not None else None
    ests: list[list[RangeEstimate]] = [[] for _ in trackers]
    poses: list[Pose3D] = []
    lost_count = [0] * n

    def drain():
        while True:
            if array is not None:
                res = array.step(bufs)
                if res is None:
                    return
                poses.extend(res)
            else:
                r = trackers[0].step(bufs[0])
                if r is None:
                    return
                ests[0].extend(r.estimates)

    for chunk in it:
        for st, buf, blk in zip(streams, bufs, chunk):
            buf.append(*st.push(blk.samples))
        drain()
    for st, buf in zip(streams, bufs):
        buf.append(*st.flush())
    drain()
    if array is not None:
        ests = array.estimates
        for ev in array.events:
            events.append({"chirp": ev.chirp_index, "kind": ev.kind, "mic": list(ev.mics),
                           "message": ev.message})
    for i, trk in enumerate(trackers):
        lost_count[i] = sum(1 for e in trk.events if "lost" in e.lower()) + (
            1 if trk.state is not None and trk.state.quality == Quality.LOST else 0)
        for e in trk.events:
            events.append({"chirp": -1, "kind": "tracker", "mic": i, "message": e})
    lost = [i for i in range(n) if lost_count[i] and not ests[i]]
    return TrackResult(ests, poses, events, lost, ing.truncated, calibration)


# --------------------------------------------------------------------------
# throughput
# --------------------------------------------------------------------------

def throughput_bench(n_channels: int = 1, seconds: float = 2.0, seed: int = 0,
                     p: ChirpParams | None = None) -> dict:
    """Time the analytic conversion plus per-channel tracking on pre-rendered audio.

    Rendering is excluded. ``n_channels = 0`` measures the loop overhead
    alone. ``real_time_factor`` is audio seconds per processing second for
    one channel on one core.
    """
    p = p or ChirpParams()
    sc = Scenario("bench", chirp=p, duration=max(seconds, 10 * p.period), seed=seed,
                  channel={"snr_db": 20.0, "multipath": {"kind": "random_near_tx"}},
                  motion={"kind": "sinusoid", "center": [0.5, 0, 0], "amplitude": [0.05, 0, 0],
                          "freq": 0.5})
    motion = sc.build_motion()
    models = sc.channel_models(motion)
    arr = ch.render(ch.ChirpTrain(p), models[0], sc.duration, p.fs, seed=seed).samples
    step = int(round(BLOCK_S * p.fs))
    t0 = time.perf_counter()
    n_est = 0
    for _ in range(n_channels):
        st, buf = AnalyticStream(p.fs), RxBuffer(p.fs)
        trk = ChannelTracker(p, PseudoSchedule(0.0, p.period))
        d, v = ch.ground_truth(motion, [0.5 * p.period])
        trk.seed(float(d[0]), float(v[0]), 0.5 * p.period, 1)
        for j in range(0, arr.size, step):
            buf.append(*st.push(arr[j:j + step]))
            n_est += len(trk.run(buf))
            buf.discard_before(int(trk.schedule.receive_time(0.0, trk.next_chirp) * p.fs) - 8)
    if n_channels == 0:
        for j in range(0, arr.size, step):
            _ = arr[j:j + step]
    el = time.perf_counter() - t0
    audio_s = arr.size / p.fs
    chirps = audio_s / p.period
    per_ch = el / n_channels if n_channels else el
    return {"channels": n_channels, "audio_s": audio_s, "elapsed_s": el,
            "samples_per_s": arr.size * max(n_channels, 1) / el if el > 0 else math.inf,
            "real_time_factor": audio_s / per_ch if per_ch > 0 else math.inf,
            "ms_per_chirp": per_ch / chirps * 1e3, "estimates": n_est}


# --------------------------------------------------------------------------
# scenario rendering to files and concurrent runs
# --------------------------------------------------------------------------

def render_to_wav(sc: Scenario, path) -> Path:
    """Render every microphone channel of a scenario into one WAV file."""
    motion, models, blocks = render_scenario(sc)
    parts = [[] for _ in models]
    for chunk in blocks:
        for acc, b in zip(parts, chunk):
            acc.append(b.samples)
    fs = sc.chirp.fs
    return write_wav(path, [SampleBlock(np.concatenate(a), 0.0, fs) for a in parts])


def transmitter_layout(sc: Scenario, n: int) -> list[ch.MotionProfile]:
    """Scenario motion replicated for ``n`` transmitters spread in range."""
    base = ch.motion_from_spec(sc.motion)
    out = []
    for i in range(n):
        off = np.array([0.2 * i, 0.05 * ((i % 2) * 2 - 1) * (i > 0), 0.0])
        out.append(ch.MotionProfile(lambda t, o=off: base.position(t) + o,
                                    base.velocity, base.acceleration, name=f"{base.name}+{i}"))
    return out


def run_concurrent(sc: Scenario, n_tx: int, seed_truth: bool = False) -> RunReport:
    """Closed-loop concurrent run with ``n_tx`` transmitters and a single microphone.

    Per-transmitter error series are stored as methods ``tx1``, ``tx2``, ...
    """
    from .concurrent import simulate_concurrent

    sc.validate()
    if sc.array() is not None:
        raise ConfigurationError("concurrent runs use a single microphone")
    if sc.touch:
        raise ConfigurationError("concurrent runs use oracle start-up")
    p = sc.chirp
    rng = np.random.default_rng(sc.seed)
    mic = np.zeros(3)
    motions = transmitter_layout(sc, n_tx)
    tx_paths, truth = {}, {}
    for i, mot in enumerate(motions, start=1):
        tx_paths[i] = sc.build_paths(mot, rng)[0]
        truth[i] = (lambda t, m=mot: tuple(float(a[0]) for a in ch.ground_truth(m, [t], mic)))
    t0 = time.perf_counter()
    run_ = simulate_concurrent(p, tx_paths, sc.duration, float(sc.channel["snr_db"]), sc.seed,
                               truth if seed_truth else None)
    el = time.perf_counter() - t0
    rep = RunReport(sc.name)
    live = n_tx + 1
    for tx, mot in zip(sorted(tx_paths), motions):
        ests = [e for e in run_.estimates[tx] if e.chirp_index > live]
        t = np.array([e.t for e in ests])
        d = np.array([e.d for e in ests])
        gt = ch.ground_truth(mot, t, mic)[0] if t.size else t
        rep.add_series(f"tx{tx}", t, np.zeros(t.size, int), d, gt)
    rep.events = [{"chirp": -1, "kind": "concurrent", "mic": 0, "message": e} for e in run_.events]
    rep.timing = {"wall_s": el}
    rep.extra = {"transmitters": n_tx, "bootstrap_toa_s": {str(k): v for k, v in
                                                          run_.bootstrap_toa.items()},
                 "messages": len(run_.messages)}
    return rep
