"""3D fusion of four 1D tracks over a rectangular microphone array.

Poses come from a least-squares sphere intersection. Before fusing, each
chirp's per-microphone states are checked for cycle slips against the others
(after removing the geometric offsets implied by the last good pose), and
slipped channels are corrected by whole cycles.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .chirp import ChirpParams
from .errors import GlobalFailure, SignalLost, TriangulationError
from .tracker import EDGE, ChannelTracker, Quality, RangeEstimate, TrackerState

OUTLIER_THRESHOLD = 0.01
RECOVER_TOLERANCE = 0.01
MAX_FAILED_RECOVERIES = 3


class PoseQuality(str, enum.Enum):
    OK = "Ok"
    RECOVERED = "Recovered"
    FALLBACK = "Fallback"


QUALITY_CODES = {PoseQuality.OK: 0, PoseQuality.RECOVERED: 1, PoseQuality.FALLBACK: 2}


@dataclass(frozen=True)
class MicArrayGeometry:
    """Four microphones at the corners of a ``width`` x ``height`` rectangle in x = 0."""

    positions: np.ndarray
    width: float
    height: float

    @classmethod
    def rectangle(cls, width: float, height: float) -> "MicArrayGeometry":
        w, h = width / 2.0, height / 2.0
        pos = np.array([[0.0, w, h], [0.0, -w, h], [0.0, -w, -h], [0.0, w, -h]])
        return cls(pos, width, height)

    def distances(self, point) -> np.ndarray:
        return np.linalg.norm(self.positions - np.asarray(point, dtype=float), axis=1)

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=float)
        object.__setattr__(self, "positions", pos)
        if pos.shape != (4, 3):
            raise ValueError("geometry needs four 3D positions")
        if np.any(np.abs(pos[:, 0]) > 1e-12):
            raise ValueError("microphones must lie in the x = 0 plane")


LARGE_ARRAY = MicArrayGeometry.rectangle(0.15, 0.15)
SMALL_ARRAY = MicArrayGeometry.rectangle(0.06, 0.0535)


@dataclass(frozen=True)
class Pose3D:
    t: float
    x: float
    y: float
    z: float
    quality: PoseQuality = PoseQuality.OK
    residual: float = 0.0

    @property
    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def triangulate(d: Sequence[float], g: MicArrayGeometry, t: float = 0.0,
                mics: Sequence[int] | None = None,
                quality: PoseQuality = PoseQuality.OK) -> Pose3D:
    """Least-squares intersection of spheres centred on the microphones.

    The sphere-difference equations are linear in ``(y, z)``; ``x`` follows
    from the mean of ``d_i**2 - (y - y_i)**2 - (z - z_i)**2``. One
    Gauss-Newton step on the range residuals then refines the estimate.
    ``mics`` selects a subset (at least three) of the array.
    """
    idx = list(range(4)) if mics is None else list(mics)
    d = np.asarray(d, dtype=float)
    if d.size == 4 and len(idx) < 4:
        d = d[idx]
    if len(idx) < 3 or d.size != len(idx):
        raise TriangulationError("need at least three distances")
    if np.any(~np.isfinite(d)) or np.any(d <= 0) or np.any(d > 5.0):
        raise TriangulationError("distances must lie in (0, 5] m")
    m = g.positions[idx]
    yz = m[:, 1:]
    A = 2.0 * (yz[1:] - yz[0])
    b = (d[0] ** 2 - d[1:] ** 2) + np.sum(yz[1:] ** 2, axis=1) - np.sum(yz[0] ** 2)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    x2 = float(np.mean(d ** 2 - np.sum((yz - sol) ** 2, axis=1)))
    if x2 <= 0:
        raise TriangulationError("ranges do not intersect in front of the array")
    p = np.array([math.sqrt(x2), sol[0], sol[1]])
    # one Gauss-Newton refinement on |p - m_i| - d_i
    diff = p - m
    r = np.linalg.norm(diff, axis=1)
    J = diff / r[:, None]
    step, *_ = np.linalg.lstsq(J, d - r, rcond=None)
    p = p + step
    if p[0] <= 0:
        raise TriangulationError("solution fell behind the array")
    resid = float(np.sqrt(np.mean((np.linalg.norm(p - m, axis=1) - d) ** 2)))
    return Pose3D(t, float(p[0]), float(p[1]), float(p[2]), quality, resid)


def smooth(poses: Iterable[Pose3D], window: float = 0.010) -> list[Pose3D]:
    """Boxcar average of poses within consecutive ``window``-second bins."""
    poses = list(poses)
    if not poses:
        return []
    t0 = poses[0].t
    groups: dict[int, list[Pose3D]] = {}
    for p in poses:
        groups.setdefault(int(math.floor((p.t - t0) / window + 1e-9)), []).append(p)
    out = []
    rank = {PoseQuality.OK: 0, PoseQuality.RECOVERED: 1, PoseQuality.FALLBACK: 2}
    for k in sorted(groups):
        g = groups[k]
        q = max((p.quality for p in g), key=rank.__getitem__)
        out.append(Pose3D(float(np.mean([p.t for p in g])), float(np.mean([p.x for p in g])),
                          float(np.mean([p.y for p in g])), float(np.mean([p.z for p in g])), q,
                          float(np.mean([p.residual for p in g]))))
    return out


def detect_failure(d: Sequence[float], expected: Sequence[float] | None = None,
                   threshold: float = OUTLIER_THRESHOLD) -> set[int]:
    """Indices of channels disagreeing with the median of the others.

    ``expected`` holds each channel's geometric distance from the last good
    pose; comparisons are made on ``d - expected``. The worst channel is
    flagged first and the test repeated on the remainder. NaN entries are
    ignored (lost channels).

    Raises
    ------
    GlobalFailure
        when three or more channels are flagged, or when the flagged ones are
        at least as many as those left (no consensus).
    """
    d = np.asarray(d, dtype=float)
    e = np.zeros_like(d) if expected is None else np.asarray(expected, dtype=float)
    r = d - e
    active = [i for i in range(d.size) if np.isfinite(r[i])]
    if len(active) < 3:
        raise GlobalFailure("fewer than three channels available for consensus")
    flagged: set[int] = set()
    while len(active) >= 2:
        dev = {i: abs(r[i] - np.median([r[j] for j in active if j != i])) for i in active}
        worst = max(dev, key=dev.get)
        if dev[worst] < threshold:
            break
        flagged.add(worst)
        active.remove(worst)
    if len(flagged) >= 3 or (flagged and len(flagged) >= len(active)):
        raise GlobalFailure(f"channels {sorted(flagged)} disagree; no consensus")
    return flagged


def consensus(d: Sequence[float], expected: Sequence[float], i: int,
              exclude: Iterable[int] = ()) -> float:
    """Distance for channel ``i`` implied by the median of the other channels."""
    d = np.asarray(d, dtype=float)
    e = np.asarray(expected, dtype=float)
    skip = set(exclude) | {i}
    others = [d[j] - e[j] for j in range(d.size) if j not in skip and np.isfinite(d[j])]
    return float(e[i] + np.median(others))


def cycle_length(p: ChirpParams, tau_rel: float) -> float:
    """Distance change of one phase cycle ``tau_rel`` seconds after the chirp arrived."""
    return p.c / (p.f0 + p.slope * tau_rel)


def recover(state: TrackerState, consensus_d: float, p: ChirpParams,
            tau_rel: float | None = None) -> TrackerState:
    """Shift ``state`` by whole cycles until it is within 1 cm of ``consensus_d``.

    ``consensus_d`` refers to the same instant as ``state.d_end``;
    ``tau_rel`` is that instant's time since the chirp arrived (the end of
    the usable span by default).
    """
    tau_rel = p.T - EDGE if tau_rel is None else tau_rel
    lam = cycle_length(p, tau_rel)
    gap = consensus_d - state.d_end
    if abs(gap) < RECOVER_TOLERANCE:
        return state
    k = int(round(gap / lam))
    if k == 0:
        k = 1 if gap > 0 else -1
    return replace(state, d_end=max(state.d_end + k * lam, 0.0), n_offset=state.n_offset + k,
                   quality=Quality.RECOVERED)


# --------------------------------------------------------------------------
# array pipeline
# --------------------------------------------------------------------------

@dataclass
class FusionEvent:
    chirp_index: int
    kind: str
    mics: tuple[int, ...]
    message: str
    notify: bool = False


class ArrayTracker:
    """Steps four channel trackers chirp by chirp and fuses their windows.

    Each chirp: advance every tracker, check the end-of-chirp states for
    slips, recover single outliers (or re-bootstrap everything on a global
    failure) and triangulate the per-window distances.
    """

    def __init__(self, trackers: list[ChannelTracker], g: MicArrayGeometry,
                 threshold: float = OUTLIER_THRESHOLD):
        self.trackers = trackers
        self.g = g
        self.p = trackers[0].p
        self.threshold = threshold
        self.last_pose: Pose3D | None = None
        self.failed = [0] * len(trackers)
        self.events: list[FusionEvent] = []
        self.poses: list[Pose3D] = []
        self.estimates: list[list[RangeEstimate]] = [[] for _ in trackers]
        self._rebootstrap = False

    def notify(self, ev: FusionEvent) -> None:
        self.events.append(ev)

    def _expected(self, t: float) -> np.ndarray | None:
        if self.last_pose is None:
            return None
        return self.g.distances(self.last_pose.xyz)

    def _state_distances(self, t_common: float) -> np.ndarray:
        out = []
        for trk in self.trackers:
            st = trk.state
            if st is None or st.quality == Quality.LOST or trk.fallback:
                out.append(np.nan)
            else:
                out.append(st.d_end + st.v_end * (t_common - st.t_end)
                           - trk.virtual_offset * self.p.c)
        return np.array(out)

    def step(self, bufs) -> list[Pose3D] | None:
        """Process one chirp on all channels; ``None`` until every frame is buffered."""
        if not all(t.ready(b) for t, b in zip(self.trackers, bufs)):
            return None
        k = self.trackers[0].next_chirp
        if self._rebootstrap:
            for trk, buf in zip(self.trackers, bufs):
                try:
                    trk.bootstrap(buf, k)
                except SignalLost:
                    trk.next_chirp = k + 1
            self._rebootstrap = False
            return []
        results = [t.step(b) for t, b in zip(self.trackers, bufs)]
        recovered: set[int] = set()
        fallback = any(t.fallback for t in self.trackers)
        t_common = float(np.nanmean([r.state.t_end for r in results]))
        d = self._state_distances(t_common)
        expected = self._expected(t_common)
        try:
            flagged = detect_failure(d, expected, self.threshold) if np.isfinite(d).sum() >= 3 else set()
        except GlobalFailure as exc:
            self.notify(FusionEvent(k, "global_failure", tuple(range(len(d))), str(exc), True))
            self._rebootstrap = True
            self.last_pose = None
            flagged = set()
            fallback = True
        e = np.zeros(len(d)) if expected is None else expected
        for i in range(len(d)):
            if i in flagged:
                self.failed[i] += 1
                trk = self.trackers[i]
                if self.failed[i] >= MAX_FAILED_RECOVERIES:
                    trk.fallback = True
                    self.notify(FusionEvent(k, "fallback", (i,),
                                            f"mic {i}: switched to peak ranging", True))
                    continue
                cons = consensus(d, e, i, flagged) + trk.virtual_offset * self.p.c
                cons_at_end = cons + trk.state.v_end * (trk.state.t_end - t_common)
                trk.state = recover(trk.state, cons_at_end, self.p)
                recovered.add(i)
                self.notify(FusionEvent(k, "recovered", (i,),
                                        f"mic {i}: corrected by {trk.state.n_offset - results[i].state.n_offset:+d} cycles"))
            elif np.isfinite(d[i]):
                self.failed[i] = 0
        quality = PoseQuality.FALLBACK if fallback else (
            PoseQuality.RECOVERED if recovered else PoseQuality.OK)
        poses = self._fuse(results, recovered, quality)
        return poses

    def _fuse(self, results, recovered, quality) -> list[Pose3D]:
        by_window: dict[int, dict[int, RangeEstimate]] = {}
        for i, res in enumerate(results):
            for est in res.estimates:
                self.estimates[i].append(est)
                by_window.setdefault(est.window, {})[i] = est
        out = []
        for w in sorted(by_window):
            ests = by_window[w]
            if len(ests) < 3:
                continue
            mics = sorted(ests)
            dist = np.array([ests[i].d for i in mics])
            if recovered:
                # the slipped channel's window values predate the correction
                keep = [m for m in mics if m not in recovered]
                if len(keep) >= 3:
                    mics, dist = keep, np.array([ests[i].d for i in keep])
            t = float(np.mean([ests[i].t for i in mics]))
            try:
                pose = triangulate(dist, self.g, t, mics, quality)
            except TriangulationError as exc:
                self.notify(FusionEvent(results[0].state.chirp_index, "triangulation", tuple(mics),
                                        str(exc)))
                continue
            out.append(pose)
        if out and quality != PoseQuality.FALLBACK:
            self.last_pose = out[-1]
        self.poses.extend(out)
        return out

    def run(self, bufs) -> list[Pose3D]:
        out: list[Pose3D] = []
        while True:
            res = self.step(bufs)
            if res is None:
                return out
            out.extend(res)
