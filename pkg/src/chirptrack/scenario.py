"""Scenario descriptions (``scenario_v1`` JSON) and their channel construction.

A scenario names the waveform, the transmitter motion, the microphone
layout, the propagation channel and how the receiver starts tracking:

``"calibration": {"mode": "oracle"}``
    the receiver schedule is derived from the simulated clock terms and the
    trackers are seeded with the true distance (isolates tracking error);
``"calibration": {"mode": "touch", "duration": 5.0, "approach": 1.0}``
    the transmitter first rests against the array, the receiver runs touch
    calibration, then the device moves to the scenario's start pose.

Multipath (``channel.multipath``) kinds:

``none``
    direct path only.
``random_near_tx``
    ``n_paths`` point scatterers placed at random distances in ``radius``
    (m) around the transmitter's start position, e.g. the hand and the
    device body, with random phases and amplitudes summing to
    ``aggregate`` (relative to the direct path).
``explicit``
    ``paths``: list of ``{"excess_m", "amplitude", "phase"}`` riding on the
    direct geometry.
``dense``
    occlusion: the direct path is scaled by ``direct_gain`` and ``n_paths``
    paths are spread uniformly over ``spread_s`` seconds after it.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import channel as ch
from .chirp import ChirpParams
from .errors import ConfigurationError
from .fusion import LARGE_ARRAY, SMALL_ARRAY, MicArrayGeometry
from .sync import TOUCH_DISTANCE

SCHEMA = "scenario_v1"
METHODS = ("tracker", "fmcw_peak", "carrier_phase")
KINDS = ("track", "two_path_sweep")
MIN_CHIRPS = 10
TOUCH_GAIN = 10.0


def _default_channel() -> dict:
    return {"snr_db": 20.0, "clock_ppm": 0.0, "clock_offset0": 0.0, "multipath": {"kind": "none"}}


@dataclass
class Scenario:
    name: str
    chirp: ChirpParams = field(default_factory=ChirpParams)
    motion: dict = field(default_factory=lambda: {"kind": "static", "point": [0.4, 0.0, 0.0]})
    geometry: dict = field(default_factory=lambda: {"kind": "single"})
    channel: dict = field(default_factory=_default_channel)
    duration: float = 2.0
    seed: int = 0
    methods: tuple[str, ...] = ("tracker",)
    calibration: dict = field(default_factory=lambda: {"mode": "oracle"})
    faults: list = field(default_factory=list)
    kind: str = "track"
    sweep: dict = field(default_factory=lambda: {"n": 50, "n_theta": 8})
    carrier_hz: float = 20000.0

    def __post_init__(self) -> None:
        self.methods = tuple(self.methods)
        ch_cfg = _default_channel()
        ch_cfg.update(self.channel)
        self.channel = ch_cfg

    # -- validation -------------------------------------------------------
    def validate(self) -> "Scenario":
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "two_path_sweep":
            if int(self.sweep.get("n", 0)) < 2 or int(self.sweep.get("n_theta", 0)) < 1:
                raise ConfigurationError("sweep needs n >= 2 and n_theta >= 1")
            return self
        if not self.duration >= MIN_CHIRPS * self.chirp.period:
            raise ConfigurationError(
                f"duration must cover at least {MIN_CHIRPS} chirps ({MIN_CHIRPS * self.chirp.period:g} s)")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ConfigurationError(f"methods must be a non-empty subset of {METHODS}")
        mode = self.calibration.get("mode")
        if mode not in ("oracle", "touch"):
            raise ConfigurationError("calibration mode must be 'oracle' or 'touch'")
        if not np.isfinite(self.channel["snr_db"]):
            raise ConfigurationError("snr_db must be finite")
        if abs(self.channel["clock_ppm"]) > 200:
            raise ConfigurationError("|clock_ppm| must not exceed 200")
        if not 0 < self.carrier_hz < self.chirp.fs / 2:
            raise ConfigurationError("carrier must lie below Nyquist")
        self.mics()
        ch.motion_from_spec(self.motion)
        for f in self.faults:
            if not {"chirp", "mic", "delta_m"} <= set(f):
                raise ConfigurationError("faults need chirp, mic and delta_m")
        return self

    # -- geometry / motion --------------------------------------------------
    def array(self) -> MicArrayGeometry | None:
        g = self.geometry
        kind = g.get("kind", "single")
        if kind == "single":
            return None
        if kind == "rectangle":
            return MicArrayGeometry.rectangle(float(g["width"]), float(g["height"]))
        if kind == "preset":
            try:
                return {"large": LARGE_ARRAY, "small": SMALL_ARRAY}[g["name"]]
            except KeyError as exc:
                raise ConfigurationError(f"unknown array preset {g.get('name')!r}") from exc
        raise ConfigurationError(f"unknown geometry kind {kind!r}")

    def mics(self) -> np.ndarray:
        g = self.array()
        return np.zeros((1, 3)) if g is None else g.positions

    @property
    def touch(self) -> bool:
        return self.calibration.get("mode") == "touch"

    @property
    def t_start(self) -> float:
        """Receiver time at which the scenario's own motion begins."""
        if not self.touch:
            return 0.0
        return float(self.calibration.get("duration", 5.0)) + 1.0 + float(
            self.calibration.get("approach", 1.0))

    @property
    def total_duration(self) -> float:
        return self.t_start + self.duration

    def touch_point(self) -> np.ndarray:
        return np.array([TOUCH_DISTANCE, 0.0, 0.0])

    def touch_distances(self) -> tuple[float, ...]:
        return tuple(float(np.linalg.norm(self.touch_point() - m)) for m in self.mics())

    def build_motion(self) -> ch.MotionProfile:
        base = ch.motion_from_spec(self.motion)
        if not self.touch:
            return base
        t0 = self.t_start
        start = base.position(0.0)[0]
        approach = float(self.calibration.get("approach", 1.0))
        t_move = t0 - approach
        return ch.sequence([(0.0, ch.static(self.touch_point())),
                            (t_move, ch.min_jerk(self.touch_point(), start, t_move, approach)),
                            (t0, ch.shifted(base, t0))])

    # -- channel --------------------------------------------------------------
    def direct_gain(self, motion: ch.MotionProfile, mic):
        """Unit gain, raised toward the mic during touch (capped at ``TOUCH_GAIN``)."""
        if not self.touch:
            return 1.0
        m = np.asarray(mic, dtype=float)
        t_end = self.t_start
        d_ref = float(np.linalg.norm(motion.position(t_end)[0] - m))

        def gain(t):
            d = np.linalg.norm(motion.position(t) - m, axis=1)
            return np.where(t < t_end, np.minimum(TOUCH_GAIN, d_ref / np.maximum(d, 1e-6)), 1.0)

        return gain

    def build_paths(self, motion: ch.MotionProfile, rng: np.random.Generator) -> list[list]:
        """Per-microphone path lists for a transmitter following ``motion``."""
        p = self.chirp
        mp = self.channel.get("multipath", {"kind": "none"})
        kind = mp.get("kind", "none")
        start = ch.motion_from_spec(self.motion).position(0.0)[0]
        scat = None
        if kind == "random_near_tx":
            n = int(mp.get("n_paths", 5))
            w = rng.dirichlet(np.ones(n)) * float(mp.get("aggregate", 0.6))
            dirs = rng.normal(size=(n, 3))
            dirs /= np.linalg.norm(dirs, axis=1)[:, None]
            lo, hi = mp.get("radius", (0.01, 0.3))
            scat = (start + dirs * rng.uniform(lo, hi, n)[:, None], w,
                    rng.uniform(0.0, 2 * np.pi, n))
        elif kind == "dense":
            n = int(mp.get("n_paths", 6))
            w = rng.dirichlet(np.ones(n)) * float(mp.get("aggregate", 0.6))
            exc = np.sort(rng.uniform(0.0, float(mp.get("spread_s", 0.002)), n)) * p.c
            dense = (exc, w, rng.uniform(0.0, 2 * np.pi, n))
        elif kind not in ("none", "explicit"):
            raise ConfigurationError(f"unknown multipath kind {kind!r}")
        out = []
        for mic in self.mics():
            g = self.direct_gain(motion, mic)
            if kind == "dense":
                dg = float(mp.get("direct_gain", 0.3))
                g = (lambda t, g=g: dg * (g(t) if callable(g) else g))
            paths = [ch.direct_path(motion, mic, p.c, g)]
            if kind == "random_near_tx":
                pts, w, ph = scat
                paths += [ch.scatter_path(motion, mic, pts[j], p.c, float(w[j]), float(ph[j]))
                          for j in range(len(w))]
            elif kind == "explicit":
                paths += [ch.excess_path(motion, mic, float(q["excess_m"]), p.c,
                                         float(q["amplitude"]), float(q.get("phase", 0.0)))
                          for q in mp.get("paths", [])]
            elif kind == "dense":
                exc, w, ph = dense
                paths += [ch.excess_path(motion, mic, float(exc[j]), p.c, float(w[j]), float(ph[j]))
                          for j in range(len(w))]
            out.append(paths)
        return out

    def channel_models(self, motion: ch.MotionProfile) -> list[ch.ChannelModel]:
        rng = np.random.default_rng(self.seed)
        c = self.channel
        return [ch.ChannelModel(paths, snr_db=float(c["snr_db"]), clock_ppm=float(c["clock_ppm"]),
                                clock_offset0=float(c["clock_offset0"]), reference_amplitude=1.0)
                for paths in self.build_paths(motion, rng)]

    # -- serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "name": self.name, "kind": self.kind,
                "chirp": self.chirp.to_dict(), "motion": copy.deepcopy(self.motion),
                "geometry": dict(self.geometry), "channel": copy.deepcopy(self.channel),
                "duration": self.duration, "seed": self.seed, "methods": list(self.methods),
                "calibration": dict(self.calibration), "faults": [dict(f) for f in self.faults],
                "sweep": dict(self.sweep), "carrier_hz": self.carrier_hz}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if d.get("schema") != SCHEMA:
            raise ConfigurationError(f"expected schema {SCHEMA!r}, got {d.get('schema')!r}")
        known = {"name", "kind", "chirp", "motion", "geometry", "channel", "duration", "seed",
                 "methods", "calibration", "faults", "sweep", "carrier_hz"}
        extra = set(d) - known - {"schema"}
        if extra:
            raise ConfigurationError(f"unknown scenario keys {sorted(extra)}")
        kw = {k: v for k, v in d.items() if k in known}
        if "chirp" in kw:
            kw["chirp"] = ChirpParams.from_dict(kw["chirp"])
        if "name" not in kw:
            raise ConfigurationError("scenario needs a name")
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"scenario is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_json(Path(path).read_text())

    def with_overrides(self, **kw) -> "Scenario":
        d = self.to_dict()
        for k, v in kw.items():
            if v is None:
                continue
            if k in ("snr_db", "clock_ppm", "clock_offset0"):
                d["channel"][k] = v
            else:
                d[k] = v
        return Scenario.from_dict(d)


def bundled_names() -> list[str]:
    root = resources.files("chirptrack") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_bundled(name: str) -> Scenario:
    f = resources.files("chirptrack") / "scenarios" / f"{name}.json"
    if not f.is_file():
        raise ConfigurationError(f"no bundled scenario {name!r}; have {bundled_names()}")
    return Scenario.from_json(f.read_text())


def load_scenario(ref: str) -> Scenario:
    """Load a scenario from a file path or a bundled scenario name."""
    path = Path(ref)
    if path.suffix == ".json" or path.exists():
        if not path.exists():
            raise FileNotFoundError(ref)
        return Scenario.load(path)
    return load_bundled(ref)
