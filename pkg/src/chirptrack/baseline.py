"""Reference rangers used for comparison.

``peak_range`` converts the first spectral peak straight to distance.
:class:`CarrierPhaseTracker` follows the phase of a single continuous
carrier, which is exact for one path and has no defence against multipath.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .chirp import ChirpParams, SampleBlock
from .dsp import AnalyticStream, DemodFrame, PseudoSchedule, RxBuffer, demod_samples, first_peak
from .errors import ConfigurationError, FrameUnderrun, SignalLost


class Method(str, enum.Enum):
    FMCW_PEAK = "FmcwPeak"
    CARRIER_PHASE = "CarrierPhase"


@dataclass(frozen=True)
class BaselineEstimate:
    method: Method
    t: float
    d: float


def peak_range(frame: DemodFrame, p: ChirpParams) -> float:
    """``c * peak_bin / B`` from the interpolated first peak (raises SignalLost)."""
    peak, _ = first_peak(frame, p)
    return p.c * peak / p.B


class PeakRanger:
    """Streams one first-peak distance per chirp from a shared analytic buffer.

    Each estimate is stamped at the middle of the received chirp.
    """

    def __init__(self, p: ChirpParams, schedule: PseudoSchedule, first_chirp: int = 0,
                 mic_id: int = 0):
        self.p = p
        self.schedule = schedule
        self.next_chirp = first_chirp
        self.mic_id = mic_id
        self.lost = 0

    def step(self, buf: RxBuffer) -> BaselineEstimate | None:
        """Estimate the next chirp; ``None`` until its frame is buffered or if it was lost."""
        p, k = self.p, self.next_chirp
        t_start = self.schedule.receive_time(0.0, k)
        j0 = int(math.ceil((t_start - buf.t0) * p.fs - 1e-6))
        if j0 + p.n_samples + 2 > buf.end:
            raise FrameUnderrun(f"chirp {k} not yet buffered")
        t = buf.time_of(np.arange(j0, j0 + p.n_samples))
        tau = self.schedule.local_time(t, k)
        frame = DemodFrame(demod_samples(buf.get(j0, p.n_samples), tau, p), k,
                           self.schedule.start_offset, tau, t, p.fs)
        self.next_chirp = k + 1
        try:
            d = peak_range(frame, p)
        except SignalLost:
            self.lost += 1
            return None
        t_mid = self.schedule.receive_time(d / p.c + p.T / 2, k)
        return BaselineEstimate(Method.FMCW_PEAK, t_mid, d)

    def run(self, buf: RxBuffer) -> list[BaselineEstimate]:
        out = []
        while True:
            try:
                e = self.step(buf)
            except FrameUnderrun:
                return out
            if e is not None:
                out.append(e)


class CarrierPhaseTracker:
    """Relative displacement from the phase of a continuous carrier.

    The analytic received signal is mixed to DC and averaged over blocks of
    ``block_s`` seconds; the block phases are unwrapped naively and scaled by
    ``-c / (2*pi*f)``.
    """

    def __init__(self, f_carrier: float, fs: float, c: float = 343.0, block_s: float = 0.010):
        if not 0 < f_carrier < fs / 2:
            raise ConfigurationError("carrier must lie below Nyquist")
        self.f = float(f_carrier)
        self.fs = float(fs)
        self.c = c
        self.block = int(round(block_s * fs))
        self._an = AnalyticStream(fs)
        self._pending = np.zeros(0, complex)
        self._pending_start = 0
        self._phi0: float | None = None
        self._last: float | None = None
        self._turns = 0
        self._t0: float | None = None

    def push(self, blk: SampleBlock) -> list[BaselineEstimate]:
        if self._t0 is None:
            self._t0 = blk.t0
        first, y = self._an.push(blk.samples)
        # the converter's start-up transient would bias the reference phase
        skip = max(0, min(y.size, self._an.M - first))
        first, y = first + skip, y[skip:]
        if self._pending.size == 0:
            self._pending_start = first
        self._pending = np.concatenate([self._pending, y])
        out = []
        while self._pending.size >= self.block:
            seg = self._pending[:self.block]
            j = self._pending_start + np.arange(self.block)
            t = self._t0 + j / self.fs
            z = np.mean(seg * np.exp(-2j * np.pi * self.f * t))
            phi = float(np.angle(z))
            if self._last is not None:
                dphi = phi - self._last
                if dphi > np.pi:
                    self._turns -= 1
                elif dphi < -np.pi:
                    self._turns += 1
            else:
                self._phi0 = phi
            self._last = phi
            unwrapped = phi + 2 * np.pi * self._turns
            d = -(unwrapped - self._phi0) * self.c / (2 * np.pi * self.f)
            out.append(BaselineEstimate(Method.CARRIER_PHASE, float(t.mean()), d))
            self._pending = self._pending[self.block:]
            self._pending_start += self.block
        return out


def carrier_phase_track(rx, f_carrier: float, c: float = 343.0,
                        block_s: float = 0.010) -> list[BaselineEstimate]:
    """Run :class:`CarrierPhaseTracker` over an iterable of blocks (or one block)."""
    blocks = [rx] if isinstance(rx, SampleBlock) else list(rx)
    trk = CarrierPhaseTracker(f_carrier, blocks[0].fs, c, block_s)
    out: list[BaselineEstimate] = []
    for b in blocks:
        out.extend(trk.push(b))
    return out
