"""Per-microphone 1D tracking from the instantaneous phase of the beat tone.

Each chirp is demodulated with a frame aligned to the predicted arrival,
band-passed around the direct-path tone, and its phase inverted sample by
sample into a delay. The integer cycle ambiguity at the first usable sample
is resolved against the distance predicted from the previous chirp.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .chirp import ChirpParams
from .dsp import (
    DemodFrame,
    FilterConfig,
    PseudoSchedule,
    RxBuffer,
    apply_filter,
    demod_samples,
    first_peak,
    make_filter,
    spectrum,
)
from .errors import FrameUnderrun, InsufficientData, InversionError, SignalLost

TWO_PI = 2.0 * np.pi
ACCEL_LIMIT = 25.0
RESOLVE_GUARD = 0.01
EDGE = 0.002
SPEED_WINDOW = 0.010
WINDOWS = ((0.005, 0.015), (0.030, 0.040))
LOST_SNR_DB = -5.0


class Quality(str, enum.Enum):
    TRACKING = "Tracking"
    DEGRADED = "Degraded"
    LOST = "Lost"
    RECOVERED = "Recovered"
    FALLBACK = "Fallback"


@dataclass
class PhaseSeries:
    """Phase samples of one chirp. ``wrapped`` lies in ``[0, 2*pi)``."""

    times: np.ndarray
    wrapped: np.ndarray
    unwrapped: np.ndarray | None = None


@dataclass(frozen=True)
class RangeEstimate:
    chirp_index: int
    t: float
    mic_id: int
    d: float
    v: float
    quality: Quality
    window: int = 0
    tx_id: int = 0
    method: str = "tracker"


@dataclass
class TrackerState:
    """Continuous-tracking state carried from one chirp to the next.

    ``d_end``/``v_end`` are the apparent (slot) distance and speed at time
    ``t_end``; the apparent distance includes any virtual transmit offset.
    """

    d_end: float
    v_end: float
    n_offset: int
    filter_cfg: FilterConfig
    chirp_index: int
    quality: Quality = Quality.TRACKING
    t_end: float = 0.0
    snr_db: float = 20.0

    def __post_init__(self) -> None:
        self.d_end = max(0.0, float(self.d_end))


# --------------------------------------------------------------------------
# phase model
# --------------------------------------------------------------------------

def phase_forward(p: ChirpParams, tau, t_d) -> np.ndarray:
    """Demodulated phase of a path with delay ``t_d`` at local time ``tau``."""
    tau = np.asarray(tau, dtype=float)
    t_d = np.asarray(t_d, dtype=float)
    return -TWO_PI * (p.slope * tau * t_d + p.f0 * t_d - 0.5 * p.slope * t_d * t_d)


def phase_to_delay(tau, phi, p: ChirpParams, strict: bool = True) -> np.ndarray:
    """Invert :func:`phase_forward` for the root in ``[0, T)``.

    With ``k = -phi/(2*pi)`` the model is ``a*t_d**2 - b*t_d + k = 0``,
    ``a = B/(2T)``, ``b = B/T*tau + f0``. The small root is taken in the
    cancellation-free form ``2k / (b + sqrt(b**2 - 4ak))``.

    Raises
    ------
    InversionError
        when ``strict`` and any discriminant is negative or any root falls
        outside ``[0, T)``. With ``strict=False`` those samples become NaN.
    """
    tau = np.asarray(tau, dtype=float)
    phi = np.asarray(phi, dtype=float)
    a = 0.5 * p.slope
    b = p.slope * tau + p.f0
    k = -phi / TWO_PI
    disc = b * b - 4.0 * a * k
    bad = disc < 0
    root = 2.0 * k / (b + np.sqrt(np.where(bad, 0.0, disc)))
    bad = bad | (root < -1e-15) | (root >= p.T)
    if strict and np.any(bad):
        raise InversionError("phase does not map to a delay in [0, T)")
    return np.where(bad, np.nan, np.maximum(root, 0.0))


def unwrap_within_chirp(wrapped) -> PhaseSeries:
    """Remove 2*pi jumps between adjacent samples, keeping the first sample."""
    if isinstance(wrapped, PhaseSeries):
        times, w = wrapped.times, np.asarray(wrapped.wrapped, dtype=float)
    else:
        w = np.asarray(wrapped, dtype=float)
        times = np.arange(w.size, dtype=float)
    if w.size == 0:
        return PhaseSeries(times, w, w.copy())
    d = np.diff(w)
    steps = np.zeros_like(d)
    steps[d > np.pi] = -TWO_PI
    steps[d < -np.pi] = TWO_PI
    out = w.copy()
    out[1:] += np.cumsum(steps)
    return PhaseSeries(times, w, out)


def resolve_initial_offset(phi0_wrapped: float, predicted_d: float, p: ChirpParams,
                           tau0: float | None = None) -> int:
    """Integer ``N`` making ``phi0 + 2*pi*N`` invert closest to ``predicted_d``.

    ``tau0`` is the local time of the sample (defaults to the predicted
    arrival, i.e. the start of an arrival-aligned frame).
    """
    t_pred = max(predicted_d, 0.0) / p.c
    tau0 = t_pred if tau0 is None else tau0
    phi_pred = float(phase_forward(p, tau0, t_pred))
    n0 = int(round((phi_pred - phi0_wrapped) / TWO_PI))
    best, best_err = n0, math.inf
    for n in (n0 - 1, n0, n0 + 1):
        td = phase_to_delay(tau0, phi0_wrapped + TWO_PI * n, p, strict=False)
        if np.isnan(td):
            continue
        err = abs(float(td) * p.c - predicted_d)
        if err < best_err:
            best, best_err = n, err
    return best


def estimate_speed(t, d) -> float:
    """Least-squares slope of ``d`` against ``t``."""
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    if t.size < 2:
        raise InsufficientData("speed estimate needs at least two points")
    tc = t - t.mean()
    den = float(tc @ tc)
    if den == 0:
        raise InsufficientData("speed estimate needs distinct times")
    return float(tc @ (d - d.mean()) / den)


def line_fit(t: np.ndarray, d: np.ndarray, t_eval: float) -> tuple[float, float]:
    """OLS line through ``(t, d)`` evaluated at ``t_eval``; returns (value, slope)."""
    v = estimate_speed(t, d)
    return float(d.mean() + v * (t_eval - t.mean())), v


def estimate_latency(cfg: FilterConfig, window: tuple[float, float] = WINDOWS[0]) -> float:
    """Delay from a window's first sample until its estimate can be formed.

    The centred FIR needs ``group_delay`` seconds of look-ahead past the
    window's last sample.
    """
    return (window[1] - window[0]) + cfg.group_delay


def doppler_center_bin(p: ChirpParams, t_d: float, v: float, tau_mid: float) -> float:
    """Beat-tone position (cycles/chirp) including the Doppler shift of speed ``v``."""
    return p.B * t_d + (p.f0 * p.T + p.B * (tau_mid - t_d)) * v / p.c


# --------------------------------------------------------------------------
# per-chirp step
# --------------------------------------------------------------------------

@dataclass
class ChirpResult:
    estimates: list[RangeEstimate]
    state: TrackerState
    tau: np.ndarray
    t: np.ndarray
    d: np.ndarray
    usable: slice
    events: list = field(default_factory=list)


def track_chirp(state: TrackerState, frame: DemodFrame, p: ChirpParams, mic_id: int = 0,
                tx_id: int = 0, virtual_offset: float = 0.0, snr_db: float | None = None,
                windows=WINDOWS) -> ChirpResult:
    """Advance ``state`` by one arrival-aligned demodulated frame.

    Distances in ``state`` are apparent (they include ``virtual_offset``);
    emitted estimates have the offset removed.
    """
    fs = frame.fs
    n = len(frame)
    new_events: list[str] = []
    quality = Quality.TRACKING

    tau_mid = float(frame.tau[n // 2])
    t_pred = state.d_end / p.c
    center = doppler_center_bin(p, t_pred, state.v_end, tau_mid)
    measured = tone_snr(frame, center) if snr_db is None else snr_db
    if measured < LOST_SNR_DB:
        exc = SignalLost(f"chirp {frame.chirp_index}: tone below noise floor")
        exc.state = replace(state, chirp_index=frame.chirp_index, quality=Quality.LOST)
        raise exc

    # filter choice uses the previous chirp's SNR so estimates stay causal
    cfg = make_filter(center, state.snr_db if snr_db is None else snr_db, state.v_end)
    filt = apply_filter(frame, cfg, p)

    wrapped = np.mod(np.angle(filt.samples), TWO_PI)
    unwrapped = unwrap_within_chirp(wrapped).unwrapped

    e = int(round(EDGE * fs))
    use = slice(e, n - e)
    j = use.start
    pred = state.d_end + state.v_end * (frame.t[j] - state.t_end)
    N = resolve_initial_offset(unwrapped[j], pred, p, float(frame.tau[j]))
    phi = unwrapped + TWO_PI * N
    td = phase_to_delay(frame.tau, phi, p, strict=False)
    d = td * p.c
    if np.any(np.isnan(d[use])):
        quality = Quality.DEGRADED
        new_events.append(f"chirp {frame.chirp_index}: inversion failure")
    if abs(d[j] - pred) > RESOLVE_GUARD:
        quality = Quality.DEGRADED
        new_events.append(f"chirp {frame.chirp_index}: prediction residual {d[j] - pred:+.4f} m")

    t = frame.t
    rel = frame.tau - frame.tau[0]
    ests: list[RangeEstimate] = []
    for w, (a, b) in enumerate(windows):
        m = (rel >= a - 0.5 / fs) & (rel < b - 0.5 / fs)
        dw = d[m]
        if dw.size == 0 or np.any(np.isnan(dw)):
            continue
        try:
            vw = estimate_speed(t[m], dw)
        except InsufficientData:
            vw = state.v_end
        ests.append(RangeEstimate(frame.chirp_index, float(t[m].mean()), mic_id,
                                  float(dw.mean()) - virtual_offset * p.c, vw, quality, w, tx_id))

    k_end = n - e
    k_beg = max(e, k_end - int(round(SPEED_WINDOW * fs)))
    seg = slice(k_beg, k_end)
    good = ~np.isnan(d[seg])
    if good.sum() >= 2:
        d_end, v_end = line_fit(t[seg][good], d[seg][good], float(t[k_end - 1]))
        t_end = float(t[k_end - 1])
    else:
        d_end, v_end, t_end = pred, state.v_end, float(frame.t[j])
        quality = Quality.DEGRADED
    dt = t_end - state.t_end
    if state.chirp_index >= 0 and dt > 0 and abs(v_end - state.v_end) / dt > ACCEL_LIMIT:
        quality = Quality.DEGRADED
        new_events.append(f"chirp {frame.chirp_index}: acceleration above {ACCEL_LIMIT} m/s^2")
    if quality != Quality.TRACKING:
        ests = [replace(x, quality=quality) for x in ests]

    st = replace(state, d_end=max(d_end, 0.0), v_end=v_end, n_offset=N, filter_cfg=cfg,
                 chirp_index=frame.chirp_index, quality=quality, t_end=t_end,
                 snr_db=measured)
    return ChirpResult(ests, st, frame.tau, t, d, use, new_events)



def tone_snr(frame: DemodFrame, center_bin: float, half_width: float = 8.0) -> float:
    """Per-sample-equivalent SNR of the beat tone near ``center_bin``.

    Uses the excess energy within ``half_width`` bins of the centre rather
    than the peak height, so a Doppler-smeared tone is not under-reported.
    """
    bins, P = spectrum(frame)
    step = bins[1] - bins[0]
    i = int(round(center_bin / step))
    h = int(round(half_width / step))
    idx = np.arange(i - h, i + h + 1) % P.size
    noise = max(float(np.median(P)) / math.log(2.0), np.finfo(float).tiny)
    excess = float(P[idx].sum()) - idx.size * noise
    return 10.0 * math.log10(max(excess / (P.size * noise), 1e-30))


# --------------------------------------------------------------------------
# streaming tracker
# --------------------------------------------------------------------------

class ChannelTracker:
    """Streaming tracker for one microphone (and one transmitter slot).

    Frames are cut from a shared :class:`RxBuffer` of analytic samples. The
    tracker must be seeded with :meth:`seed` or bootstrapped with
    :meth:`bootstrap` before phase tracking.
    """

    def __init__(self, p: ChirpParams, schedule: PseudoSchedule, mic_id: int = 0,
                 tx_id: int = 0, virtual_offset: float = 0.0, fixed_snr_db: float | None = None,
                 windows=WINDOWS):
        self.p = p
        self.schedule = schedule
        self.mic_id = mic_id
        self.tx_id = tx_id
        self.virtual_offset = virtual_offset
        self.fixed_snr_db = fixed_snr_db
        self.windows = windows
        self.state: TrackerState | None = None
        self.next_chirp = 0
        self.fallback = False
        self.events: list[str] = []

    # -- initialisation -------------------------------------------------
    def seed(self, d_apparent: float, v: float, t: float, next_chirp: int) -> None:
        """Start phase tracking from a known apparent distance and speed at ``t``."""
        self.state = TrackerState(d_apparent, v, 0, FilterConfig(p_bin(self.p, d_apparent)),
                                  next_chirp - 1, Quality.TRACKING, t)
        self.next_chirp = next_chirp

    def apparent(self, d: float) -> float:
        return d + self.virtual_offset * self.p.c

    def frame_at(self, buf: RxBuffer, k: int, lead: float) -> DemodFrame:
        fs, n = self.p.fs, self.p.n_samples
        t_start = self.schedule.receive_time(lead, k)
        j0 = int(math.ceil((t_start - buf.t0) * fs - 1e-6))
        y = buf.get(j0, n)
        t = buf.time_of(np.arange(j0, j0 + n))
        tau = self.schedule.local_time(t, k)
        return DemodFrame(demod_samples(y, tau, self.p), k, self.schedule.start_offset, tau, t, fs)

    def bootstrap(self, buf: RxBuffer, k: int, bin_range: tuple[float, float] | None = None) -> float:
        """Seed from the DFT first peak of chirp ``k``; returns the apparent distance.

        ``bin_range`` restricts the peak search, e.g. to one transmitter's slot.
        """
        frame = self.frame_at(buf, k, 0.0)
        lo, hi = bin_range if bin_range is not None else (-3.0, None)
        peak, snr = first_peak(frame, self.p, max_bin=hi, min_bin=lo)
        d_app = max(peak, 0.0) * self.p.c / self.p.B
        t_mid = float(frame.t[len(frame) // 2])
        self.state = TrackerState(d_app, 0.0, 0, make_filter(max(peak, 0.0), snr, 0.0), k,
                                  Quality.TRACKING, t_mid, snr)
        self.next_chirp = k + 1
        return d_app

    def predicted_lead(self, k: int) -> float:
        """Predicted arrival (local time) of chirp ``k``'s tracked path."""
        st = self.state
        tau = st.d_end / self.p.c
        for _ in range(3):
            t_rx = self.schedule.receive_time(tau, k)
            tau = (st.d_end + st.v_end * (t_rx - st.t_end)) / self.p.c
        return max(tau, 0.0)

    # -- streaming ------------------------------------------------------
    def frame_ready(self, buf: RxBuffer, k: int, lead: float) -> bool:
        """Whether chirp ``k``'s frame starting at local time ``lead`` is buffered."""
        t_end = self.schedule.receive_time(lead + self.p.T, k)
        return math.ceil((t_end - buf.t0) * self.p.fs) + 2 <= buf.end

    def ready(self, buf: RxBuffer) -> bool:
        if self.state is None:
            return False
        return self.frame_ready(buf, self.next_chirp, self.predicted_lead(self.next_chirp))

    def step(self, buf: RxBuffer) -> ChirpResult | None:
        """Process the next chirp if its frame is buffered."""
        if not self.ready(buf):
            return None
        k = self.next_chirp
        if self.fallback:
            return self._peak_step(buf, k)
        lead = self.predicted_lead(k)
        frame = self.frame_at(buf, k, lead)
        try:
            res = track_chirp(self.state, frame, self.p, self.mic_id, self.tx_id,
                              self.virtual_offset, self.fixed_snr_db, self.windows)
        except SignalLost as exc:
            self.state = exc.state
            self.events.append(str(exc))
            self.next_chirp = k + 1
            return ChirpResult([], self.state, frame.tau, frame.t,
                               np.full(len(frame), np.nan), slice(0, 0), [str(exc)])
        self.events.extend(res.events)
        self.state = res.state
        self.next_chirp = k + 1
        return res

    def _peak_step(self, buf: RxBuffer, k: int) -> ChirpResult:
        """Fallback ranging: one DFT peak distance per chirp, reported per window."""
        frame = self.frame_at(buf, k, 0.0)
        self.next_chirp = k + 1
        try:
            peak, snr = first_peak(frame, self.p)
        except SignalLost as exc:
            self.state = replace(self.state, chirp_index=k, quality=Quality.LOST)
            return ChirpResult([], self.state, frame.tau, frame.t,
                               np.full(len(frame), np.nan), slice(0, 0), [str(exc)])
        d_app = self.p.c * peak / self.p.B
        d = d_app - self.virtual_offset * self.p.c
        t_arr = self.schedule.receive_time(d_app / self.p.c, k)
        ests = [RangeEstimate(k, t_arr + 0.5 * (a + b), self.mic_id, d, 0.0, Quality.FALLBACK,
                              w, self.tx_id, "fmcw_peak")
                for w, (a, b) in enumerate(self.windows)]
        self.state = replace(self.state, d_end=max(d_app, 0.0), v_end=0.0, chirp_index=k,
                             quality=Quality.FALLBACK, t_end=t_arr + self.p.T / 2, snr_db=snr)
        return ChirpResult(ests, self.state, frame.tau, frame.t,
                           np.full(len(frame), d), slice(0, len(frame)))

    def run(self, buf: RxBuffer) -> list[RangeEstimate]:
        out: list[RangeEstimate] = []
        while True:
            try:
                res = self.step(buf)
            except FrameUnderrun:
                break
            if res is None:
                break
            out.extend(res.estimates)
        return out


def p_bin(p: ChirpParams, d: float) -> float:
    return max(d, 0.0) / p.c * p.B
