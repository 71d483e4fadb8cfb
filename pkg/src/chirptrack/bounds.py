"""Closed-form multipath error bounds and their numerical checks.

For a direct tone of amplitude ``A1`` and an aggregate residual of amplitude
``A2 < A1``, the phase of ``A1 + A2*exp(j*theta)`` deviates from the direct
phase by at most ``asin(A2/A1)``. Converting phase to distance through the
smallest instantaneous frequency the waveform presents, ``f0 - B/2``, gives
the distance bound.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chirp import ChirpParams
from .errors import BoundDomainError


@dataclass(frozen=True)
class TwoPathScenario:
    A1: float
    A2: float
    delta_bin: float
    p: ChirpParams = field(default_factory=ChirpParams)

    def __post_init__(self) -> None:
        if not (self.A1 > 0 and 0 <= self.A2 < self.A1):
            raise BoundDomainError("need 0 <= A2 < A1")
        if self.delta_bin < 0:
            raise BoundDomainError("delta_bin must be non-negative")

    @property
    def ratio(self) -> float:
        return self.A2 / self.A1


def phase_error_bound(s: TwoPathScenario) -> float:
    """``asin(A2/A1)`` in radians."""
    return math.asin(s.ratio)


def distance_error_bound(s: TwoPathScenario) -> float:
    """``asin(A2/A1) * c / (2*pi*(f0 - B/2))`` in metres."""
    f = s.p.f0 - s.p.B / 2.0
    if f <= 0:
        raise BoundDomainError("f0 - B/2 must be positive")
    return phase_error_bound(s) * s.p.c / (2 * math.pi * f)


def distance_error_bound_local(s: TwoPathScenario, tau: float, t_d: float) -> float:
    """Tighter bound using the instantaneous frequency at local time ``tau``.

    An extension of :func:`distance_error_bound`: the phase-to-distance
    slope at ``tau`` for a path of delay ``t_d`` is ``c / (2*pi*f)`` with
    ``f = f0 + B/T*(tau - t_d)``.
    """
    f = s.p.f0 + s.p.slope * (tau - t_d)
    if f <= 0:
        raise BoundDomainError("instantaneous frequency must be positive")
    return phase_error_bound(s) * s.p.c / (2 * math.pi * f)


def brute_force_phase_error(ratio: float, n_theta: int = 100_000) -> float:
    """Largest ``|arg(1 + ratio*exp(j*theta))|`` over a uniform ``theta`` grid."""
    theta = np.linspace(0.0, 2 * np.pi, n_theta, endpoint=False)
    return float(np.max(np.abs(np.angle(1.0 + ratio * np.exp(1j * theta)))))


def peak_error(s: TwoPathScenario) -> float:
    """Merged-peak bias ``delta_bin / (1 + A1/A2) * c / B`` in metres.

    Valid while the two tones merge into one peak, ``delta_bin <= 1``.
    """
    if s.delta_bin > 1.0:
        raise BoundDomainError("peak_error holds only for delta_bin <= 1")
    if s.A2 == 0:
        return 0.0
    return s.delta_bin / (1.0 + s.A1 / s.A2) * s.p.c / s.p.B


def orthogonality_bound(delta_t: float, p: ChirpParams) -> float:
    """``T / (B*pi*delta_t)``: bound on the inner product of two demodulated paths.

    The inner product is the unnormalised integral over one chirp, in
    seconds; divide by ``T`` for the normalised value.
    """
    if delta_t <= 0:
        raise BoundDomainError("delta_t must be positive (the inner product at 0 is T)")
    return p.T / (p.B * math.pi * delta_t)


def inner_product(delta_t: float, p: ChirpParams, n: int | None = None) -> float:
    """Numerical ``|integral_0^T exp(j*2*pi*(B/T)*delta_t*t) dt|``."""
    n = p.n_samples if n is None else n
    t = np.arange(n) / (n / p.T)
    return float(abs(np.sum(np.exp(2j * np.pi * p.slope * delta_t * t)) * (p.T / n)))


def measured_inner_product(x1: np.ndarray, x2: np.ndarray, fs: float) -> float:
    """``|sum(x1 * conj(x2))| / fs`` between two demodulated frames."""
    return float(abs(np.vdot(x2, x1)) / fs)


# --------------------------------------------------------------------------
# error surface
# --------------------------------------------------------------------------

SURFACE_COLUMNS = ("a_ratio", "delta_bin", "peak_err_m", "phase_bound_m", "phase_measured_m")


def surface_axes(n: int = 50) -> tuple[np.ndarray, np.ndarray]:
    return np.linspace(0.02, 0.98, n), np.linspace(0.02, 1.0, n)


def error_surface(n: int = 50, n_theta: int = 8, p: ChirpParams | None = None,
                  simulate: bool = True, d: float = 0.5) -> list[dict]:
    """Grid of peak-formula error, phase bound and (optionally) measured phase error.

    The measured column is the worst tracker error over ``n_theta`` evenly
    spaced indirect-path phases; without ``simulate`` it is NaN.
    """
    from .twopath import simulate_two_path

    p = p or ChirpParams()
    ratios, deltas = surface_axes(n)
    thetas = np.arange(n_theta) * 2 * np.pi / n_theta
    rows = []
    for r in ratios:
        for db in deltas:
            s = TwoPathScenario(1.0, float(r), float(db), p)
            measured = np.nan
            if simulate:
                measured = max(simulate_two_path(r, db, th, p, d, peak=False).tracker_err_m
                               for th in thetas)
            rows.append({"a_ratio": float(r), "delta_bin": float(db),
                         "peak_err_m": peak_error(s), "phase_bound_m": distance_error_bound(s),
                         "phase_measured_m": float(measured)})
    return rows


def write_surface_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SURFACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) for k in SURFACE_COLUMNS})
    return path
