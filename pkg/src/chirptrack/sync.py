"""Touch calibration: chirp start detection, cycle bootstrap and drift removal.

With the transmitter held at a known touch pose, the receiver

1. finds the chirp start by normalised cross-correlation with the template,
2. seeds each microphone's tracker from the DFT peak distance,
3. tracks the stationary transmitter for a few seconds and fits a line to
   the apparent distance. The slope is the clock drift and the intercept's
   difference from the touch distance refines the start offset.

Both corrections are folded into the pseudo-chirp schedule, and the
trackers' states are shifted to the corrected time base.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .chirp import ChirpParams, SampleBlock, synthesize_chirp
from .dsp import DemodFrame, PseudoSchedule, RxBuffer, apply_filter, first_peak, make_filter
from .errors import CalibrationFailed, FrameUnderrun, InsufficientData, IngestError
from .tracker import (
    TWO_PI,
    ChannelTracker,
    Quality,
    RangeEstimate,
    estimate_speed,
    resolve_initial_offset,
    unwrap_within_chirp,
)

CALIBRATION_VERSION = 1
TOUCH_DISTANCE = 0.01
DRIFT_SANITY = 0.1
MAX_RESIDUAL_RMS = 0.005


@dataclass(frozen=True)
class ClockCalibration:
    """Result of touch calibration.

    ``start_offset`` is the corrected pseudo-chirp start in ``[0, T + gap)``;
    ``drift_rate`` the apparent distance drift (m/s) removed thereafter,
    referenced to receive time ``t_ref``. ``n0`` holds each microphone's
    first resolved cycle count.
    """

    start_offset: float
    n0: tuple[int, ...]
    drift_rate: float
    calibrated_at: int
    t_ref: float = 0.0
    touch_distances: tuple[float, ...] = (TOUCH_DISTANCE,)
    c: float = 343.0
    period: float = 0.05
    created: float = field(default_factory=time.time)
    version: int = CALIBRATION_VERSION

    def __post_init__(self) -> None:
        if abs(self.drift_rate) >= DRIFT_SANITY:
            raise CalibrationFailed(f"drift rate {self.drift_rate:.4f} m/s fails sanity check")
        if not 0.0 <= self.start_offset < self.period:
            raise CalibrationFailed("start_offset outside [0, T + gap)")

    @property
    def kappa(self) -> float:
        return self.drift_rate / self.c

    def schedule(self) -> PseudoSchedule:
        return PseudoSchedule(self.start_offset, self.period, self.kappa, self.t_ref)

    def to_json(self) -> str:
        d = asdict(self)
        d["schema"] = "clock_calibration"
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ClockCalibration":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise IngestError(f"calibration record is not valid JSON: {exc}") from exc
        if d.pop("schema", None) != "clock_calibration":
            raise IngestError("not a clock calibration record")
        if d.get("version") != CALIBRATION_VERSION:
            raise IngestError(f"unsupported calibration version {d.get('version')}")
        d["n0"] = tuple(d["n0"])
        d["touch_distances"] = tuple(d["touch_distances"])
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "ClockCalibration":
        try:
            return cls.from_json(Path(path).read_text())
        except OSError as exc:
            raise IngestError(str(exc)) from exc


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def normalized_xcorr(x: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Normalised cross-correlation for every full overlap of ``template`` in ``x``."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(template, dtype=float)
    n = t.size
    num = signal.correlate(x, t, mode="valid", method="fft")
    energy = np.convolve(x * x, np.ones(n), mode="valid")
    den = np.sqrt(np.maximum(energy, 1e-300)) * np.linalg.norm(t)
    return num / den


def detect_chirp_start(rx: SampleBlock, p: ChirpParams, threshold: float = 0.5) -> float:
    """Receive time of the first chirp arrival, modulo the chirp period.

    The correlation maximum over the first period of lags is taken, i.e. the
    earliest chirp that lies wholly inside ``rx``; sample resolution.

    Raises
    ------
    CalibrationFailed
        when fewer than two periods are supplied or the best normalised
        correlation is below ``threshold``.
    """
    n_period = int(round(p.period * p.fs))
    if len(rx) < n_period + p.n_samples:
        raise CalibrationFailed("need at least a period plus one chirp of samples")
    tpl = synthesize_chirp(p).samples
    r = normalized_xcorr(rx.samples, tpl)
    seg = r[:n_period]
    i = int(np.argmax(seg))
    if seg[i] < threshold:
        raise CalibrationFailed(f"correlation peak {seg[i]:.3f} below {threshold}")
    return float((rx.t0 + i / rx.fs) % p.period)


def bootstrap_offset(frame: DemodFrame, p: ChirpParams, D: float | None = None,
                     edge: float = 0.002) -> int:
    """Cycle count ``N`` minimising ``|D - d(tau_0, phi_0 + 2*pi*N)|``.

    ``D`` defaults to the DFT first-peak distance of the frame; ``phi_0`` is
    the band-passed phase at the first sample clear of the filter edge.
    """
    peak, snr = first_peak(frame, p)
    if D is None:
        D = p.c * peak / p.B
    cfg = make_filter(max(D / p.c * p.B, 0.0), snr, 0.0)
    filt = apply_filter(frame, cfg, p)
    j = int(round(edge * frame.fs))
    wrapped = np.mod(np.angle(filt.samples), TWO_PI)
    phi0 = unwrap_within_chirp(wrapped).unwrapped[j]
    return resolve_initial_offset(float(phi0), D, p, float(frame.tau[j]))


def estimate_drift(estimates, max_rms: float = MAX_RESIDUAL_RMS) -> tuple[float, float]:
    """Least-squares drift rate and intercept-at-mean-time of a stationary record.

    ``estimates`` are :class:`RangeEstimate` objects or ``(t, d)`` pairs.
    Returns ``(drift_rate, intercept)`` where the intercept is the fitted
    distance at the mean time.

    Raises
    ------
    CalibrationFailed
        if the residual RMS exceeds ``max_rms`` (motion during calibration).
    """
    if estimates and isinstance(estimates[0], RangeEstimate):
        t = np.array([e.t for e in estimates])
        d = np.array([e.d for e in estimates])
    else:
        arr = np.asarray(estimates, dtype=float).reshape(-1, 2)
        t, d = arr[:, 0], arr[:, 1]
    try:
        slope = estimate_speed(t, d)
    except InsufficientData as exc:
        raise CalibrationFailed(str(exc)) from exc
    intercept = float(d.mean())
    resid = d - (intercept + slope * (t - t.mean()))
    rms = float(np.sqrt(np.mean(resid ** 2)))
    if rms > max_rms:
        raise CalibrationFailed(f"residual RMS {rms * 1e3:.2f} mm: device moved during calibration")
    return slope, intercept


# --------------------------------------------------------------------------
# full procedure
# --------------------------------------------------------------------------

@dataclass
class CalibrationSession:
    """Incremental touch calibration over one or more microphone buffers."""

    p: ChirpParams
    touch_distances: tuple[float, ...] = (TOUCH_DISTANCE,)
    duration: float = 5.0
    prior: ClockCalibration | None = None
    trackers: list[ChannelTracker] = field(default_factory=list)
    estimates: list[list[RangeEstimate]] = field(default_factory=list)
    schedule: PseudoSchedule | None = None
    t_begin: float | None = None

    def start(self, first_block: SampleBlock, bufs: list[RxBuffer]) -> None:
        """Find the chirp start (unless a prior calibration is given) and bootstrap."""
        p = self.p
        if self.prior is not None:
            self.schedule = self.prior.schedule()
        else:
            t_peak = detect_chirp_start(first_block, p)
            start = (t_peak - self.touch_distances[0] / p.c) % p.period
            self.schedule = PseudoSchedule(start, p.period)
        sched = self.schedule
        k = int(math.ceil((first_block.t0 + 0.02 - sched.start_offset) / p.period))
        k = max(k, 1)
        self.trackers = []
        for i, buf in enumerate(bufs):
            trk = ChannelTracker(p, sched, mic_id=i)
            try:
                trk.bootstrap(buf, k)
            except FrameUnderrun as exc:
                raise CalibrationFailed(f"not enough samples to bootstrap: {exc}") from exc
            self.trackers.append(trk)
        self.estimates = [[] for _ in bufs]
        self.t_begin = sched.receive_time(0.0, k)

    @property
    def done(self) -> bool:
        if not self.trackers:
            return False
        t_end = self.t_begin + self.duration
        return all(t.state.t_end >= t_end for t in self.trackers)

    def feed(self, bufs: list[RxBuffer]) -> None:
        t_stop = self.t_begin + self.duration
        for trk, buf, acc in zip(self.trackers, bufs, self.estimates):
            while trk.state.t_end < t_stop:
                try:
                    res = trk.step(buf)
                except FrameUnderrun:
                    break
                if res is None:
                    break
                acc.extend(e for e in res.estimates
                           if e.quality == Quality.TRACKING and e.t <= t_stop)

    def finish(self) -> ClockCalibration:
        """Fit drift, refine the start and re-base the trackers."""
        p = self.p
        sched = self.schedule
        rates, offsets, n0 = [], [], []
        t_all = np.concatenate([[e.t for e in acc] for acc in self.estimates])
        if t_all.size < 4:
            raise CalibrationFailed("too few tracked estimates during calibration")
        t_ref = float(t_all.mean())
        for acc, d_touch, trk in zip(self.estimates, self.touch_distances, self.trackers):
            slope, _ = estimate_drift(acc)
            t = np.array([e.t for e in acc])
            d = np.array([e.d for e in acc])
            at_ref = float(d.mean() + slope * (t_ref - t.mean()))
            rates.append(slope)
            offsets.append((at_ref - d_touch) / p.c)
            n0.append(trk.state.n_offset)
        drift = float(np.mean(rates))
        delta = float(np.mean(offsets))
        kappa_total = sched.kappa + drift / p.c
        # new corrected time: t - kappa_total*(t - t_ref); chirp start moves by delta
        base_shift = sched.kappa * (t_ref - sched.t_ref)
        new_start = sched.start_offset + base_shift + delta
        shift_chirps = int(math.floor(new_start / p.period))
        new_start -= shift_chirps * p.period
        new_sched = PseudoSchedule(new_start, p.period, kappa_total, t_ref)
        for trk in self.trackers:
            st = trk.state
            corr = drift * (st.t_end - t_ref) + p.c * delta
            trk.state = replace(st, d_end=max(st.d_end - corr, 0.0), v_end=st.v_end - drift)
            trk.schedule = new_sched
            trk.next_chirp -= shift_chirps
        cal = ClockCalibration(new_start, tuple(n0), kappa_total * p.c,
                               self.trackers[0].next_chirp, t_ref, tuple(self.touch_distances),
                               p.c, p.period)
        return cal


def calibrate(blocks, p: ChirpParams, touch_distances=(TOUCH_DISTANCE,), duration: float = 5.0,
              prior: ClockCalibration | None = None):
    """Run touch calibration over an iterable of multi-channel sample blocks.

    ``blocks`` yields lists of :class:`SampleBlock` (one per microphone).
    Returns ``(calibration, trackers, buffers, analytic_streams, leftover)``
    so tracking can continue on the same streams; ``leftover`` is the
    iterator of remaining blocks.
    """
    from .dsp import AnalyticStream

    it = iter(blocks)
    session = CalibrationSession(p, tuple(touch_distances), duration, prior)
    streams = bufs = None
    first_raw = []
    for chunk in it:
        if streams is None:
            streams = [AnalyticStream(p.fs) for _ in chunk]
            bufs = [RxBuffer(p.fs, chunk[0].t0) for _ in chunk]
        for st, buf, blk in zip(streams, bufs, chunk):
            buf.append(*st.push(blk.samples))
        if not session.trackers:
            first_raw.append(chunk[0].samples)
            n_have = sum(x.size for x in first_raw)
            if n_have < int(3 * p.period * p.fs) + 600:
                continue
            blk0 = SampleBlock(np.concatenate(first_raw), chunk[0].t0 if len(first_raw) == 1
                               else bufs[0].t0, p.fs)
            session.start(blk0, bufs)
        session.feed(bufs)
        if session.done:
            break
    if not session.done:
        raise CalibrationFailed("stream ended before calibration completed")
    cal = session.finish()
    return cal, session.trackers, bufs, streams, it
