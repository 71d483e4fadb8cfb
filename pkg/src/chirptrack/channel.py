"""Synthetic multipath acoustic channel.

The renderer evaluates ``sum_i A_i * x(t - t_i(t)) + noise`` on the receiver's
sample grid. Doppler is not added explicitly: it falls out of the
time-varying path delays. Receiver clock skew is modelled by mapping the
receiver's sample instants to true time before evaluating the transmitter.

Two transmit sources are provided. :class:`ChirpTrain` evaluates the chirp in
closed form, so fractional delays are exact. :class:`SampledSource` wraps an
arbitrary transmitted sample stream and realises fractional delays with a
Kaiser-windowed sinc interpolator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .chirp import ChirpParams, SampleBlock, chirp_phase
from .errors import ConfigurationError, SimulationError

Vector = Sequence[float]


# --------------------------------------------------------------------------
# motion
# --------------------------------------------------------------------------

def _as_times(t) -> np.ndarray:
    return np.atleast_1d(np.asarray(t, dtype=float))


@dataclass
class MotionProfile:
    """Transmitter trajectory.

    ``position_fn`` maps an array of times (s) to an ``(n, 3)`` array of
    positions (m). Velocity and acceleration fall back to central
    differences when no analytic derivative is supplied.
    """

    position_fn: Callable[[np.ndarray], np.ndarray]
    velocity_fn: Callable[[np.ndarray], np.ndarray] | None = None
    acceleration_fn: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "custom"
    spec: dict = field(default_factory=dict)

    _h = 1e-4

    def position(self, t) -> np.ndarray:
        return np.asarray(self.position_fn(_as_times(t)), dtype=float).reshape(-1, 3)

    def velocity(self, t) -> np.ndarray:
        t = _as_times(t)
        if self.velocity_fn is not None:
            return np.asarray(self.velocity_fn(t), dtype=float).reshape(-1, 3)
        h = self._h
        return (self.position(t + h) - self.position(t - h)) / (2 * h)

    def acceleration(self, t) -> np.ndarray:
        t = _as_times(t)
        if self.acceleration_fn is not None:
            return np.asarray(self.acceleration_fn(t), dtype=float).reshape(-1, 3)
        h = self._h
        return (self.velocity(t + h) - self.velocity(t - h)) / (2 * h)


def static(point: Vector) -> MotionProfile:
    p = np.asarray(point, dtype=float)
    zero = lambda t: np.zeros((t.size, 3))
    return MotionProfile(lambda t: np.tile(p, (t.size, 1)), zero, zero,
                         name="static", spec={"kind": "static", "point": p.tolist()})


def linear(start: Vector, velocity: Vector) -> MotionProfile:
    p0 = np.asarray(start, dtype=float)
    v = np.asarray(velocity, dtype=float)
    return MotionProfile(
        lambda t: p0 + t[:, None] * v,
        lambda t: np.tile(v, (t.size, 1)),
        lambda t: np.zeros((t.size, 3)),
        name="linear",
        spec={"kind": "linear", "start": p0.tolist(), "velocity": v.tolist()},
    )


def sinusoid(center: Vector, amplitude: Vector, freq: float, phase: float = 0.0) -> MotionProfile:
    """``center + amplitude * sin(2*pi*freq*t + phase)``."""
    c = np.asarray(center, dtype=float)
    a = np.asarray(amplitude, dtype=float)
    w = 2 * np.pi * freq
    return MotionProfile(
        lambda t: c + np.sin(w * t + phase)[:, None] * a,
        lambda t: (w * np.cos(w * t + phase))[:, None] * a,
        lambda t: (-w * w * np.sin(w * t + phase))[:, None] * a,
        name="sinusoid",
        spec={"kind": "sinusoid", "center": c.tolist(), "amplitude": a.tolist(),
              "freq": freq, "phase": phase},
    )


def waypoints(times: Sequence[float], points: Sequence[Vector]) -> MotionProfile:
    """Clamped cubic spline through ``points``; holds the end points outside the range."""
    ts = np.asarray(times, dtype=float)
    ps = np.asarray(points, dtype=float)
    if ts.size < 2 or ps.shape != (ts.size, 3):
        raise ConfigurationError("waypoints need >= 2 times and matching (n, 3) points")
    cs = CubicSpline(ts, ps, bc_type="clamped", axis=0)
    d1, d2 = cs.derivative(1), cs.derivative(2)

    def clip(f, hold):
        def g(t):
            out = f(np.clip(t, ts[0], ts[-1]))
            if not hold:
                out = np.where(((t < ts[0]) | (t > ts[-1]))[:, None], 0.0, out)
            return out
        return g

    return MotionProfile(clip(cs, True), clip(d1, False), clip(d2, False), name="waypoints",
                         spec={"kind": "waypoints", "times": ts.tolist(), "points": ps.tolist()})


def min_jerk(p0: Vector, p1: Vector, t0: float, duration: float) -> MotionProfile:
    """Minimum-jerk move from ``p0`` at ``t0`` to ``p1`` at ``t0 + duration``."""
    a = np.asarray(p0, dtype=float)
    b = np.asarray(p1, dtype=float)
    D = float(duration)

    def s(t):
        u = np.clip((t - t0) / D, 0.0, 1.0)
        return 10 * u**3 - 15 * u**4 + 6 * u**5

    def ds(t):
        u = np.clip((t - t0) / D, 0.0, 1.0)
        return (30 * u**2 - 60 * u**3 + 30 * u**4) / D

    def dds(t):
        u = np.clip((t - t0) / D, 0.0, 1.0)
        return (60 * u - 180 * u**2 + 120 * u**3) / D**2

    return MotionProfile(
        lambda t: a + s(t)[:, None] * (b - a),
        lambda t: ds(t)[:, None] * (b - a),
        lambda t: dds(t)[:, None] * (b - a),
        name="min_jerk",
        spec={"kind": "min_jerk", "start": a.tolist(), "end": b.tolist(), "t0": float(t0),
              "duration": D},
    )


def random_motion(center: Vector, accel_max: float, seed=None, n_terms: int = 4,
                  freq_range: tuple[float, float] = (0.5, 3.0),
                  max_excursion: float = 0.3) -> MotionProfile:
    """Smooth random trajectory: a sum of sinusoids with random 3D amplitudes.

    Amplitudes are scaled so that ``sum_k |A_k|*(2*pi*f_k)**2 <= accel_max``
    and ``sum_k |A_k| <= max_excursion``, which bounds the acceleration
    magnitude and the distance from ``center`` everywhere.
    """
    rng = np.random.default_rng(seed)
    f = rng.uniform(*freq_range, n_terms)
    amp = rng.normal(size=(n_terms, 3))
    ph = rng.uniform(0.0, 2 * np.pi, n_terms)
    norms = np.linalg.norm(amp, axis=1)
    scale = min(accel_max / float(np.sum(norms * (2 * np.pi * f) ** 2)),
                max_excursion / float(np.sum(norms)))
    amp *= scale
    ctr = np.asarray(center, dtype=float)
    w = 2 * np.pi * f

    def pos(t):
        return ctr + np.sin(np.outer(t, w) + ph) @ amp

    def vel(t):
        return (np.cos(np.outer(t, w) + ph) * w) @ amp

    def acc(t):
        return (-np.sin(np.outer(t, w) + ph) * w**2) @ amp

    spec = {"kind": "random", "center": ctr.tolist(), "accel_max": float(accel_max),
            "seed": seed if isinstance(seed, (int, type(None))) else None, "n_terms": n_terms,
            "freq_range": list(freq_range), "max_excursion": max_excursion}
    return MotionProfile(pos, vel, acc, name="random", spec=spec)


def shifted(profile: MotionProfile, t_shift: float) -> MotionProfile:
    """Profile evaluated at ``t - t_shift``."""
    mk = lambda f: None if f is None else (lambda t: f(t - t_shift))
    return MotionProfile(lambda t: profile.position_fn(t - t_shift),
                         mk(profile.velocity_fn), mk(profile.acceleration_fn),
                         name=profile.name, spec=profile.spec)


def sequence(segments: Sequence[tuple[float, MotionProfile]]) -> MotionProfile:
    """Piecewise profile; segment ``i`` is active from its start time to the next."""
    starts = np.array([s for s, _ in segments], dtype=float)
    profs = [p for _, p in segments]
    if np.any(np.diff(starts) <= 0):
        raise ConfigurationError("segment start times must increase")

    def pick(getter):
        def f(t):
            idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(profs) - 1)
            out = np.empty((t.size, 3))
            for i in np.unique(idx):
                m = idx == i
                out[m] = getter(profs[i])(t[m])
            return out
        return f

    return MotionProfile(pick(lambda p: p.position), pick(lambda p: p.velocity),
                         pick(lambda p: p.acceleration), name="sequence")


def motion_from_spec(spec: dict) -> MotionProfile:
    kind = spec.get("kind")
    if kind == "static":
        return static(spec["point"])
    if kind == "linear":
        return linear(spec["start"], spec["velocity"])
    if kind == "sinusoid":
        return sinusoid(spec["center"], spec["amplitude"], spec["freq"], spec.get("phase", 0.0))
    if kind == "waypoints":
        return waypoints(spec["times"], spec["points"])
    if kind == "min_jerk":
        return min_jerk(spec["start"], spec["end"], spec.get("t0", 0.0), spec["duration"])
    if kind == "random":
        return random_motion(spec["center"], spec["accel_max"], spec.get("seed"),
                             spec.get("n_terms", 4), tuple(spec.get("freq_range", (0.5, 3.0))),
                             spec.get("max_excursion", 0.3))
    raise ConfigurationError(f"unknown motion kind {kind!r}")


def ground_truth(profile: MotionProfile, times, mic: Vector = (0.0, 0.0, 0.0)):
    """Exact direct-path distance (m) and radial speed (m/s) at ``times``."""
    m = np.asarray(mic, dtype=float)
    rel = profile.position(times) - m
    d = np.linalg.norm(rel, axis=1)
    vel = profile.velocity(times)
    v = np.einsum("ij,ij->i", rel, vel) / np.where(d > 0, d, 1.0)
    return d, v


# --------------------------------------------------------------------------
# transmit sources
# --------------------------------------------------------------------------

class ChirpTrain:
    """Periodic chirp train ``cos(phase(t - k*P - offset_k))`` gated to ``[0, T)``.

    ``offsets`` is a list of ``(first_chirp, offset_s)`` pairs; the offset in
    force for chirp ``k`` is the last entry with ``first_chirp <= k``. Offsets
    may be negative but must lie within one period. Chirps with index below zero are not sent,
    and a chirp is cut short if the next one is scheduled to start before it
    ends (a speaker plays one chirp at a time). Chirp indices listed in
    ``muted`` are not sent.
    """

    def __init__(self, p: ChirpParams, offsets: Sequence[tuple[int, float]] = ((0, 0.0),),
                 amplitude: float = 1.0, muted: Sequence[int] = ()):
        self.p = p
        self.amplitude = amplitude
        self.muted = np.asarray(sorted(muted), dtype=np.int64)
        self.set_offsets(offsets)

    def set_offsets(self, offsets: Sequence[tuple[int, float]]) -> None:
        sched = sorted((int(k), float(o)) for k, o in offsets)
        if any(abs(o) >= self.p.period for _, o in sched):
            raise ConfigurationError("chirp offsets must lie within one period")
        if not sched or sched[0][0] > 0:
            sched = [(0, 0.0)] + sched
        self._k = np.array([k for k, _ in sched])
        self._o = np.array([o for _, o in sched])

    def schedule_offset(self, k: int, offset: float) -> None:
        """Apply ``offset`` from chirp ``k`` onward."""
        keep = [(int(a), float(b)) for a, b in zip(self._k, self._o) if a < k]
        self.set_offsets(keep + [(k, offset)])

    def offset_of(self, k) -> np.ndarray:
        k = np.asarray(k)
        i = np.searchsorted(self._k, k, side="right") - 1
        return self._o[np.clip(i, 0, None)]

    def start_of(self, k) -> np.ndarray:
        return np.asarray(k) * self.p.period + self.offset_of(k)

    def evaluate(self, t, phase: float = 0.0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        P, T = self.p.period, self.p.T
        k0 = np.floor(t / P).astype(np.int64)
        out = np.zeros_like(t)
        for k in (k0 + 1, k0, k0 - 1):
            start = k * P + self.offset_of(k)
            tau = t - start
            end = np.minimum(T, (k + 1) * P + self.offset_of(k + 1) - start)
            m = (k >= 0) & (tau >= 0.0) & (tau < end)
            if self.muted.size:
                m &= ~np.isin(k, self.muted)
            if np.any(m):
                out[m] += np.cos(chirp_phase(self.p, tau[m]) + phase)
        return self.amplitude * out


class SampledSource:
    """Arbitrary transmitted stream with band-limited fractional-delay reads.

    Times before the first buffered sample read as silence when
    ``zero_before_start`` is set; reads past the buffer, or before it
    otherwise, raise :class:`SimulationError`.
    """

    def __init__(self, block: SampleBlock, taps: int = 32, beta: float = 8.0,
                 zero_before_start: bool = True):
        if taps % 2:
            raise ConfigurationError("taps must be even")
        self.block = block
        self.taps = taps
        self.beta = beta
        self.zero_before_start = zero_before_start
        half = taps // 2
        x = np.asarray(block.samples, dtype=float)
        self._x = np.concatenate([np.zeros(half + 1), x, np.zeros(half + 1)])
        self._pad = half + 1
        self._m = np.arange(-half + 1, half + 1)

    def evaluate(self, t, phase: float = 0.0) -> np.ndarray:
        if phase:
            raise SimulationError("path phase rotation needs an analytic source")
        t = np.asarray(t, dtype=float)
        u = (t - self.block.t0) * self.block.fs
        n = len(self.block)
        if np.any(u > n - 1 + 1e-9) or (not self.zero_before_start and np.any(u < -1e-9)):
            raise SimulationError("delay exceeds buffered transmit history")
        i = np.floor(u).astype(np.int64)
        frac = u - i
        out = np.zeros_like(t)
        exact = np.abs(frac) < 1e-12
        if np.any(exact):
            idx = np.clip(i[exact], -self._pad, n) + self._pad
            out[exact] = self._x[idx]
        rest = ~exact
        if np.any(rest):
            x = frac[rest, None] - self._m[None, :]
            half = self.taps / 2.0
            win = np.i0(self.beta * np.sqrt(np.clip(1 - (x / half) ** 2, 0, None))) / np.i0(self.beta)
            h = np.sinc(x) * win
            idx = np.clip(i[rest, None] + self._m[None, :], -self._pad, n) + self._pad
            out[rest] = np.sum(h * self._x[idx], axis=1)
        return out


# --------------------------------------------------------------------------
# channel
# --------------------------------------------------------------------------

Amplitude = float | Callable[[np.ndarray], np.ndarray]


@dataclass
class PathSpec:
    """One propagation path: gain, time-varying delay and reflection phase."""

    amplitude: Amplitude
    delay_fn: Callable[[np.ndarray], np.ndarray]
    phase: float = 0.0
    label: str = ""
    source: int = 0

    def gain(self, t: np.ndarray) -> np.ndarray:
        if callable(self.amplitude):
            return np.asarray(self.amplitude(t), dtype=float)
        return np.full_like(t, float(self.amplitude))


@dataclass
class ChannelModel:
    """Paths, noise and receiver clock for one microphone.

    ``snr_db`` is direct-path power (``A_1**2 / 2`` for the first path at
    ``reference_amplitude``) over white-noise power. ``clock_ppm`` scales the
    receiver's clock rate and ``clock_offset0`` shifts it.
    """

    paths: list[PathSpec]
    snr_db: float = math.inf
    clock_ppm: float = 0.0
    clock_offset0: float = 0.0
    reference_amplitude: float | None = None

    def __post_init__(self) -> None:
        if not self.paths:
            raise ConfigurationError("channel needs at least one path")
        if math.isnan(self.snr_db):
            raise ConfigurationError("snr_db must not be NaN")
        if abs(self.clock_ppm) > 200:
            raise ConfigurationError("|clock_ppm| must be <= 200")

    @property
    def noise_sigma(self) -> float:
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        a = self.reference_amplitude
        if a is None:
            a = float(self.paths[0].gain(np.zeros(1))[0])
        return math.sqrt(0.5 * a * a / 10 ** (self.snr_db / 10.0))

    def true_time(self, t_rx: np.ndarray) -> np.ndarray:
        """Receiver-clock instants mapped to true (transmitter) time."""
        return (t_rx - self.clock_offset0) / (1.0 + self.clock_ppm * 1e-6)


class Renderer:
    """Stateful single-owner stream producing consecutive receive blocks.

    ``source`` is one transmit source or a list of them; each path reads the
    source selected by its ``source`` index. Sources are evaluated lazily, so
    schedule changes made between :meth:`render` calls take effect.
    """

    def __init__(self, source, channel: ChannelModel, fs: float, seed=None, t0: float = 0.0):
        self.sources = list(source) if isinstance(source, (list, tuple)) else [source]
        self.channel = channel
        self.fs = float(fs)
        self.rng = np.random.default_rng(seed)
        self._n = int(round(t0 * self.fs))

    @property
    def time(self) -> float:
        return self._n / self.fs

    @property
    def samples_rendered(self) -> int:
        return self._n

    def clean(self, t_rx: np.ndarray) -> np.ndarray:
        """Noise-free received signal at receiver-clock instants."""
        t = self.channel.true_time(t_rx)
        out = np.zeros_like(t)
        for path in self.channel.paths:
            src = self.sources[path.source]
            out += path.gain(t) * src.evaluate(t - path.delay_fn(t), path.phase)
        return out

    def render(self, n: int) -> SampleBlock:
        t_rx = (self._n + np.arange(n)) / self.fs
        y = self.clean(t_rx)
        sigma = self.channel.noise_sigma
        if sigma > 0:
            y = y + self.rng.normal(0.0, sigma, size=n)
        block = SampleBlock(y, self._n / self.fs, self.fs)
        self._n += n
        return block


def render_stream(source, channel: ChannelModel, duration: float, fs: float,
                  block: int = 48_000, seed=None) -> Iterator[SampleBlock]:
    """Yield receive blocks covering ``[0, duration)``."""
    if duration <= 0:
        raise ConfigurationError("duration must be positive")
    r = Renderer(source, channel, fs, seed=seed)
    total = int(math.ceil(duration * fs))
    done = 0
    while done < total:
        n = min(block, total - done)
        yield r.render(n)
        done += n


def render(source, channel: ChannelModel, duration: float, fs: float, seed=None) -> SampleBlock:
    """Whole-duration receive block."""
    if duration <= 0:
        raise ConfigurationError("duration must be positive")
    return Renderer(source, channel, fs, seed=seed).render(int(math.ceil(duration * fs)))


# --------------------------------------------------------------------------
# geometric path builders
# --------------------------------------------------------------------------

def direct_path(motion: MotionProfile, mic: Vector, c: float, amplitude: Amplitude = 1.0) -> PathSpec:
    m = np.asarray(mic, dtype=float)
    return PathSpec(amplitude, lambda t: np.linalg.norm(motion.position(t) - m, axis=1) / c,
                    label="direct")


def scatter_path(motion: MotionProfile, mic: Vector, point: Vector, c: float,
                 amplitude: Amplitude, phase: float = 0.0) -> PathSpec:
    """Transmitter -> point scatterer -> microphone."""
    m = np.asarray(mic, dtype=float)
    s = np.asarray(point, dtype=float)

    def delay(t):
        return (np.linalg.norm(motion.position(t) - s, axis=1) + np.linalg.norm(s - m)) / c

    return PathSpec(amplitude, delay, phase, label="scatter")


def excess_path(motion: MotionProfile, mic: Vector, excess_m: float, c: float,
                amplitude: Amplitude, phase: float = 0.0) -> PathSpec:
    """Direct geometry plus a constant extra path length."""
    m = np.asarray(mic, dtype=float)
    return PathSpec(amplitude,
                    lambda t: (np.linalg.norm(motion.position(t) - m, axis=1) + excess_m) / c,
                    phase, label="excess")


def constant_path(delay_s: float, amplitude: Amplitude = 1.0, phase: float = 0.0) -> PathSpec:
    return PathSpec(amplitude, lambda t: np.full_like(t, delay_s), phase, label="constant")


class ToneSource:
    """Continuous carrier ``amplitude * cos(2*pi*freq*t)``."""

    def __init__(self, freq: float, amplitude: float = 1.0):
        self.freq = float(freq)
        self.amplitude = amplitude

    def evaluate(self, t, phase: float = 0.0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.amplitude * np.cos(2 * np.pi * self.freq * t + phase)
