"""FMCW waveform definition.

Every other module takes its waveform constants from :class:`ChirpParams`.
The transmitter emits the real cosine chirp; the receiver works with the
analytic (complex) replica, which is not gated to ``[0, T)`` so it can be
used as a demodulation divisor for arrivals that run past the nominal end
of the chirp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class ChirpParams:
    """FMCW chirp parameters.

    Attributes
    ----------
    f0 : start frequency (Hz)
    B : swept bandwidth (Hz)
    T : chirp duration (s)
    fs : sample rate (samples/s)
    gap : silence between chirps (s)
    c : speed of sound (m/s)
    """

    f0: float = 17_500.0
    B: float = 6_000.0
    T: float = 0.045
    fs: float = 48_000.0
    gap: float = 0.005
    c: float = 343.0

    def __post_init__(self) -> None:
        if not (self.f0 > 0 and self.B > 0 and self.T > 0):
            raise ConfigurationError("f0, B and T must be positive")
        if self.fs < 2.0 * (self.f0 + self.B):
            raise ConfigurationError(
                f"fs={self.fs} below Nyquist for a {self.f0 + self.B} Hz passband"
            )
        if self.gap < 0:
            raise ConfigurationError("gap must be non-negative")
        if self.c <= 0:
            raise ConfigurationError("speed of sound must be positive")

    @property
    def slope(self) -> float:
        """Sweep rate B/T in Hz/s."""
        return self.B / self.T

    @property
    def period(self) -> float:
        """Chirp repetition period T + gap."""
        return self.T + self.gap

    @property
    def n_samples(self) -> int:
        """Samples per chirp, ``ceil(T*fs)``."""
        return int(math.ceil(self.T * self.fs - 1e-9))

    @property
    def bin_hz(self) -> float:
        """Width of one cycles-per-chirp bin in Hz."""
        return 1.0 / self.T

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("f0", "B", "T", "fs", "gap", "c")}

    @classmethod
    def from_dict(cls, d: dict) -> "ChirpParams":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class SampleBlock:
    """Uniformly sampled signal segment starting at time ``t0``."""

    samples: np.ndarray
    t0: float
    fs: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ConfigurationError("SampleBlock needs a non-empty 1-D array")
        if self.fs <= 0:
            raise ConfigurationError("fs must be positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.fs

    @property
    def t_end(self) -> float:
        """Time just past the last sample."""
        return self.t0 + self.samples.size / self.fs

    def index_of(self, t: float) -> int:
        """Index of the first sample at or after ``t``."""
        return int(math.ceil((t - self.t0) * self.fs - 1e-6))


def chirp_phase(p: ChirpParams, tau) -> np.ndarray:
    """Phase ``2*pi*(f0*tau + B/(2T)*tau**2)`` of the chirp at local time ``tau``."""
    tau = np.asarray(tau, dtype=float)
    return 2.0 * np.pi * (p.f0 * tau + 0.5 * p.slope * tau * tau)


def instantaneous_frequency(p: ChirpParams, tau) -> np.ndarray:
    """``f0 + B*tau/T``; the sweep continues linearly outside ``[0, T)``."""
    return p.f0 + p.slope * np.asarray(tau, dtype=float)


def synthesize_chirp(p: ChirpParams) -> SampleBlock:
    """Real transmitted chirp sampled over ``[0, T)``."""
    tau = np.arange(p.n_samples) / p.fs
    return SampleBlock(np.cos(chirp_phase(p, tau)), 0.0, p.fs)


def pseudo_chirp(p: ChirpParams, start_offset: float = 0.0,
                 n: int | None = None, t0: float = 0.0) -> SampleBlock:
    """Analytic chirp replica starting ``start_offset`` seconds into the receive grid.

    Sample ``k`` of the result holds ``exp(j*phase(t0 + k/fs - start_offset))``,
    i.e. the analytic form of :func:`synthesize_chirp` delayed by
    ``start_offset``.
    """
    if not 0.0 <= start_offset < p.period:
        raise ConfigurationError("start_offset must lie in [0, T + gap)")
    n = p.n_samples if n is None else int(n)
    tau = t0 + np.arange(n) / p.fs - start_offset
    return SampleBlock(np.exp(1j * chirp_phase(p, tau)), t0, p.fs)
