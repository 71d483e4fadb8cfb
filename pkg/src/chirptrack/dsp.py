"""Demodulation, first-peak search and the adaptive narrow band-pass filter.

Conventions
-----------
A path with delay ``t_d`` demodulates to ``exp(-j*2*pi*(B/T*tau*t_d + f0*t_d
- B/(2T)*t_d**2))`` where ``tau`` is the local time since the pseudo-chirp
start. Its beat tone therefore rotates at the *negative* frequency
``-(B/T)*t_d``. Bin positions are quoted as positive cycles per chirp,
``B*t_d``, and distance follows as ``d = c*bin/B``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import signal

from .chirp import ChirpParams, SampleBlock, chirp_phase
from .errors import ConfigurationError, FrameUnderrun, SignalLost

PAD_FACTOR = 8
PEAK_FLOOR_DB = 6.0
PEAK_DYNAMIC_DB = 30.0
LOST_DB = 15.0
TRANSITION_HZ = 20.0


# --------------------------------------------------------------------------
# analytic conversion
# --------------------------------------------------------------------------

@lru_cache(maxsize=8)
def analytic_taps(fs: float, numtaps: int = 511, beta: float = 10.0) -> np.ndarray:
    """Complex FIR passing ``(0, fs/2)`` and rejecting negative frequencies."""
    proto = signal.firwin(numtaps, fs / 4.0, window=("kaiser", beta), fs=fs)
    n = np.arange(numtaps) - (numtaps - 1) // 2
    h = 2.0 * proto * np.exp(0.5j * np.pi * n)
    h.setflags(write=False)
    return h


def analytic(x: np.ndarray, fs: float) -> np.ndarray:
    """Analytic signal of a whole real array (zero history at both ends)."""
    return signal.fftconvolve(np.asarray(x, dtype=float), analytic_taps(fs), mode="same")


class AnalyticStream:
    """Incremental real-to-analytic conversion with an exact delay correction.

    Samples before the first pushed block are treated as silence. Output
    sample ``j`` becomes available once real sample ``j + M`` has arrived,
    where ``M`` is the converter's half length.
    """

    def __init__(self, fs: float, start_index: int = 0):
        self.fs = float(fs)
        self.h = analytic_taps(self.fs)
        self.M = (self.h.size - 1) // 2
        self._tail = np.zeros(self.M)
        self._next_out = int(start_index)

    def push(self, x: np.ndarray) -> tuple[int, np.ndarray]:
        """Feed real samples; return ``(first_index, analytic_samples)``."""
        x = np.asarray(x, dtype=float)
        buf = np.concatenate([self._tail, x])
        y = signal.fftconvolve(buf, self.h, mode="valid")
        self._tail = buf[-2 * self.M:]
        first = self._next_out
        self._next_out += y.size
        return first, y

    def flush(self) -> tuple[int, np.ndarray]:
        """Drain the last ``M`` outputs assuming silence afterwards."""
        return self.push(np.zeros(self.M))


class RxBuffer:
    """Analytic sample store addressed by absolute receive-sample index."""

    def __init__(self, fs: float, t0: float = 0.0):
        self.fs = float(fs)
        self.t0 = t0
        self._chunks: list[np.ndarray] = []
        self._base = 0
        self._end = 0
        self._flat: np.ndarray | None = None

    @property
    def start(self) -> int:
        return self._base

    @property
    def end(self) -> int:
        return self._end

    def append(self, first: int, y: np.ndarray) -> None:
        if not self._chunks and self._end == 0 and first != 0:
            self._base = self._end = first
        if first != self._end:
            raise ConfigurationError("non-contiguous append to RxBuffer")
        if y.size:
            self._chunks.append(np.asarray(y, dtype=complex))
            self._end += y.size
            self._flat = None

    def _data(self) -> np.ndarray:
        if self._flat is None:
            self._flat = np.concatenate(self._chunks) if self._chunks else np.zeros(0, complex)
            self._chunks = [self._flat]
        return self._flat

    def get(self, j0: int, n: int) -> np.ndarray:
        if j0 < self._base:
            raise FrameUnderrun(f"sample {j0} already discarded (buffer starts at {self._base})")
        if j0 + n > self._end:
            raise FrameUnderrun(f"need samples up to {j0 + n}, have {self._end}")
        d = self._data()
        return d[j0 - self._base:j0 - self._base + n]

    def discard_before(self, j: int) -> None:
        j = min(j, self._end)
        if j <= self._base:
            return
        d = self._data()
        self._flat = d[j - self._base:].copy()
        self._chunks = [self._flat]
        self._base = j

    def time_of(self, j) -> np.ndarray:
        return self.t0 + np.asarray(j) / self.fs


# --------------------------------------------------------------------------
# pseudo-chirp schedule and demodulation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PseudoSchedule:
    """Receiver-side timing of the pseudo chirps.

    Chirp ``k`` starts at receive time ``start_offset + k*P`` after the local
    clock has been corrected by ``kappa`` (fractional rate error, equal to
    drift_rate / c): ``t_corr = t - kappa*(t - t_ref)``.
    """

    start_offset: float
    period: float
    kappa: float = 0.0
    t_ref: float = 0.0

    def corrected(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return t - self.kappa * (t - self.t_ref)

    def chirp_start(self, k: int) -> float:
        return self.start_offset + k * self.period

    def local_time(self, t, k: int) -> np.ndarray:
        """Time since pseudo-chirp ``k`` started, on the corrected clock."""
        return self.corrected(t) - self.chirp_start(k)

    def receive_time(self, tau: float, k: int) -> float:
        """Uncorrected receive time at which chirp-``k`` local time equals ``tau``."""
        tc = self.chirp_start(k) + tau
        return (tc - self.kappa * self.t_ref) / (1.0 - self.kappa)


@dataclass
class DemodFrame:
    """Complex baseband for one chirp.

    ``tau`` holds each sample's local time since the pseudo-chirp start and
    ``t`` its receive time. ``lead`` is ``tau[0]``.
    """

    samples: np.ndarray
    chirp_index: int
    start_offset: float
    tau: np.ndarray
    t: np.ndarray
    fs: float
    meta: dict = field(default_factory=dict)

    @property
    def lead(self) -> float:
        return float(self.tau[0])

    def __len__(self) -> int:
        return self.samples.size


def demod_samples(y: np.ndarray, tau: np.ndarray, p: ChirpParams) -> np.ndarray:
    return y * np.exp(-1j * chirp_phase(p, tau))


def demodulate(rx: SampleBlock, p: ChirpParams, start_offset: float, lead: float = 0.0,
               chirp_index: int = 0, schedule: PseudoSchedule | None = None) -> DemodFrame:
    """Divide the analytic received signal by the pseudo chirp.

    ``rx`` may be real (converted with :func:`analytic`) or already analytic.
    The frame holds ``ceil(T*fs)`` samples starting at the first sample whose
    local time is at least ``lead``.
    """
    sched = schedule or PseudoSchedule(start_offset, p.period)
    n = p.n_samples
    t = rx.times
    tau_all = sched.local_time(t, chirp_index)
    j0 = int(np.searchsorted(tau_all, lead - 1e-9 / p.fs))
    if j0 + n > len(rx):
        raise FrameUnderrun(f"frame needs {j0 + n} samples, block has {len(rx)}")
    y = rx.samples if np.iscomplexobj(rx.samples) else analytic(rx.samples, rx.fs)
    seg = y[j0:j0 + n]
    tau = tau_all[j0:j0 + n]
    return DemodFrame(demod_samples(seg, tau, p), chirp_index, start_offset, tau,
                      t[j0:j0 + n], rx.fs)


def remodulate(frame: DemodFrame, p: ChirpParams) -> np.ndarray:
    """Inverse of demodulation: multiply back by the pseudo chirp."""
    return frame.samples * np.exp(1j * chirp_phase(p, frame.tau))


# --------------------------------------------------------------------------
# first peak
# --------------------------------------------------------------------------

def spectrum(frame: DemodFrame, pad: int = PAD_FACTOR) -> tuple[np.ndarray, np.ndarray]:
    """Blackman-windowed zero-padded power spectrum against positive bin axis."""
    x = np.conj(frame.samples)
    n = x.size
    w = np.blackman(n)
    nfft = pad * n
    X = np.fft.fft(x * w, nfft)
    # bin axis in cycles per chirp: frequency (Hz) times the chirp duration
    T = n / frame.fs
    bins = np.fft.fftfreq(nfft, d=1.0 / frame.fs) * T
    return bins, np.abs(X) ** 2


def first_peak(frame: DemodFrame, p: ChirpParams | None = None,
               max_bin: float | None = None, min_bin: float = -3.0) -> tuple[float, float]:
    """Earliest qualifying spectral peak and its per-sample-equivalent SNR.

    A peak qualifies when it is a local maximum at least 6 dB above the
    median (noise floor) power and within 30 dB of the strongest peak in the
    search range. The location is refined by a parabola through the three
    log-power samples around the maximum.

    Raises
    ------
    SignalLost
        when nothing in the search range rises 15 dB above the floor.
    """
    n = frame.samples.size
    bins, P = spectrum(frame)
    nfft = P.size
    step = bins[1] - bins[0]
    if max_bin is None:
        max_bin = (p.B * p.T / 2.0) if p is not None else n / 4.0
    lo = int(math.floor(min_bin / step))
    hi = int(math.ceil(max_bin / step))
    idx = np.arange(lo, hi + 1) % nfft
    seg = P[idx]
    floor = float(np.median(P))
    if floor <= 0:
        floor = np.finfo(float).tiny
    top = float(seg.max())
    if top < floor * 10 ** (LOST_DB / 10):
        raise SignalLost("no spectral peak above the noise floor")
    thresh = max(floor * 10 ** (PEAK_FLOOR_DB / 10), top * 10 ** (-PEAK_DYNAMIC_DB / 10))
    interior = (seg[1:-1] >= seg[:-2]) & (seg[1:-1] > seg[2:]) & (seg[1:-1] >= thresh)
    cand = np.flatnonzero(interior)
    if cand.size == 0:
        raise SignalLost("no local maximum qualifies")
    i = cand[0] + 1
    la, lb, lc = np.log(seg[i - 1:i + 2])
    den = la - 2 * lb + lc
    delta = 0.5 * (la - lc) / den if den != 0 else 0.0
    peak_bin = (lo + i + delta) * step
    w = np.blackman(n)
    gain = np.sum(w) ** 2 / np.sum(w * w)
    noise_mean = floor / math.log(2.0)
    snr_db = 10 * math.log10(max(seg[i] / noise_mean / gain, 1e-30))
    return float(peak_bin), float(snr_db)


# --------------------------------------------------------------------------
# adaptive band-pass
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterConfig:
    """Narrow band-pass around a beat tone.

    ``center_bin`` is in cycles per chirp, ``passband_hz`` the flat width
    and ``group_delay`` the linear-phase delay in seconds.
    """

    center_bin: float
    passband_hz: float = 1.0
    group_delay: float = 0.015

    def __post_init__(self) -> None:
        if self.passband_hz not in (1.0, 2.0):
            raise ConfigurationError("passband_hz must be 1 or 2")
        if not any(math.isclose(self.group_delay, g) for g in (0.015, 0.030)):
            raise ConfigurationError("group_delay must be 15 ms or 30 ms")
        if self.center_bin < 0:
            raise ConfigurationError("center_bin must be non-negative")

    def numtaps(self, fs: float) -> int:
        return int(round(2 * self.group_delay * fs)) + 1

    def with_center(self, center_bin: float) -> "FilterConfig":
        return replace(self, center_bin=max(0.0, float(center_bin)))


def make_filter(peak_bin: float, snr_db: float, speed_estimate: float) -> FilterConfig:
    """15 ms delay above 10 dB SNR (30 ms otherwise); 2 Hz passband above 1 m/s."""
    delay = 0.015 if snr_db > 10.0 else 0.030
    width = 1.0 if abs(speed_estimate) <= 1.0 else 2.0
    return FilterConfig(max(0.0, float(peak_bin)), width, delay)


@lru_cache(maxsize=16)
def lowpass_prototype(numtaps: int, cutoff_hz: float, fs: float) -> np.ndarray:
    h = signal.firwin(numtaps, cutoff_hz, window="blackman", fs=fs)
    h.setflags(write=False)
    return h


def design_bandpass(cfg: FilterConfig, fs: float, T: float) -> np.ndarray:
    """Complex taps centred on the beat tone ``-center_bin/T`` Hz."""
    L = cfg.numtaps(fs)
    proto = lowpass_prototype(L, cfg.passband_hz / 2.0 + TRANSITION_HZ, fs)
    n = np.arange(L) - (L - 1) // 2
    fc = -cfg.center_bin / T
    return proto * np.exp(2j * np.pi * fc * n / fs)


def apply_filter(frame: DemodFrame, cfg: FilterConfig, p: ChirpParams) -> DemodFrame:
    """Delay-corrected band-pass: output sample ``k`` aligns with input sample ``k``.

    Direct convolution keeps each output a function of its own tap span
    only, so samples beyond the look-ahead never touch earlier outputs.
    """
    h = design_bandpass(cfg, frame.fs, p.T)
    y = np.convolve(frame.samples, h, mode="same")
    return DemodFrame(y, frame.chirp_index, frame.start_offset, frame.tau, frame.t,
                      frame.fs, dict(frame.meta, filter=cfg))


def frequency_response(cfg: FilterConfig, fs: float, T: float, freqs_hz) -> np.ndarray:
    """Complex response of the delay-corrected filter at ``freqs_hz``."""
    h = design_bandpass(cfg, fs, T)
    n = np.arange(h.size) - (h.size - 1) // 2
    f = np.atleast_1d(np.asarray(freqs_hz, dtype=float))
    return np.exp(-2j * np.pi * np.outer(f, n) / fs) @ h
