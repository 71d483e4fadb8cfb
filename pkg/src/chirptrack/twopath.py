"""Two-path channel experiments: direct path plus one aggregate indirect path.

Used to measure tracker and peak-ranger errors against the closed-form bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import channel as ch
from .baseline import peak_range
from .chirp import ChirpParams
from .dsp import AnalyticStream, PseudoSchedule, RxBuffer
from .tracker import ChannelTracker, phase_forward


@dataclass(frozen=True)
class TwoPathResult:
    a_ratio: float
    delta_bin: float
    theta: float
    tracker_err_m: float
    peak_err_m: float


def aligned_phase(p: ChirpParams, t1: float, t2: float, tau_c: float) -> float:
    """Path phase that puts the second beat tone in phase with the first at ``tau_c``."""
    return float(phase_forward(p, tau_c, t1) - phase_forward(p, tau_c, t2))


def render_buffer(p: ChirpParams, paths: list, duration: float, snr_db: float = np.inf,
                  seed=None) -> RxBuffer:
    cm = ch.ChannelModel(paths, snr_db=snr_db, reference_amplitude=1.0)
    blk = ch.render(ch.ChirpTrain(p), cm, duration, p.fs, seed=seed)
    an = AnalyticStream(p.fs)
    buf = RxBuffer(p.fs)
    buf.append(*an.push(blk.samples))
    buf.append(*an.flush())
    return buf


def simulate_two_path(a_ratio: float, delta_bin: float, theta: float,
                      p: ChirpParams | None = None, d: float = 0.5,
                      snr_db: float = np.inf, seed=None, peak: bool = True,
                      theta_is_relative: bool = False) -> TwoPathResult:
    """Track chirp 1 of a static two-path channel seeded with the true distance.

    ``theta`` is the indirect path's phase. With ``theta_is_relative`` it is
    measured against the direct tone at the frame centre instead of being
    the raw path phase.
    """
    p = p or ChirpParams()
    mot = ch.static([d, 0.0, 0.0])
    excess = delta_bin / p.B * p.c
    t1 = d / p.c
    t2 = t1 + excess / p.c
    phase = theta
    if theta_is_relative:
        phase = theta + aligned_phase(p, t1, t2, t1 + p.T / 2)
    paths = [ch.direct_path(mot, (0, 0, 0), p.c, 1.0),
             ch.excess_path(mot, (0, 0, 0), excess, p.c, a_ratio, phase)]
    buf = render_buffer(p, paths, 2 * p.period + t2 + 0.02, snr_db, seed)
    trk = ChannelTracker(p, PseudoSchedule(0.0, p.period), fixed_snr_db=20.0)
    trk.seed(d, 0.0, p.period * 0.5, 1)
    res = trk.step(buf)
    errs = [abs(e.d - d) for e in res.estimates]
    terr = max(errs) if errs else np.inf
    perr = np.nan
    if peak:
        frame = trk.frame_at(buf, 1, 0.0)
        perr = abs(peak_range(frame, p) - d)
    return TwoPathResult(a_ratio, delta_bin, theta, terr, perr)
