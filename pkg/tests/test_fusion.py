import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chirptrack import fusion as fu
from chirptrack import harness
from chirptrack.chirp import ChirpParams
from chirptrack.dsp import FilterConfig
from chirptrack.errors import GlobalFailure, TriangulationError
from chirptrack.scenario import Scenario
from chirptrack.tracker import Quality, TrackerState

P = ChirpParams()
G = fu.LARGE_ARRAY


# -- triangulation ---------------------------------------------------------------

def test_symmetric_point():
    pose = fu.triangulate([1.0] * 4, G)
    half_diag = math.hypot(0.075, 0.075)
    assert half_diag == pytest.approx(0.10607, abs=1e-5)
    assert pose.x == pytest.approx(math.sqrt(1 - half_diag ** 2), abs=1e-12)
    assert pose.x == pytest.approx(0.99437, abs=2e-5)
    assert abs(pose.y) < 1e-12 and abs(pose.z) < 1e-12


def test_known_point():
    truth = np.array([0.8, 0.1, -0.05])
    pose = fu.triangulate(G.distances(truth), G, t=1.5)
    assert np.max(np.abs(pose.xyz - truth)) < 1e-9
    assert pose.t == 1.5 and pose.residual < 1e-9


@given(st.floats(0.2, 2.0), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5),
       st.sampled_from([fu.LARGE_ARRAY, fu.SMALL_ARRAY]))
def test_triangulation_exactness(x, y, z, g):
    truth = np.array([x, y, z])
    pose = fu.triangulate(g.distances(truth), g)
    assert np.max(np.abs(pose.xyz - truth)) < 1e-9


def test_triangulation_exactness_bulk():
    rng = np.random.default_rng(7)
    pts = np.column_stack([rng.uniform(0.2, 2.0, 10_000), rng.uniform(-0.5, 0.5, (10_000, 2))])
    worst = max(np.max(np.abs(fu.triangulate(G.distances(q), G).xyz - q)) for q in pts)
    assert worst < 1e-9


def test_three_mic_subset():
    truth = np.array([0.9, -0.2, 0.1])
    pose = fu.triangulate(G.distances(truth)[[0, 1, 3]], G, mics=[0, 1, 3])
    assert np.max(np.abs(pose.xyz - truth)) < 1e-9


def mc_error(rng, g, rng_m, n=1000, noise=0.0005):
    errs = []
    for _ in range(n):
        u = rng.normal(size=3)
        u[0] = abs(u[0]) + 2.0
        q = rng_m * u / np.linalg.norm(u)
        d = g.distances(q) + rng.uniform(-noise, noise, 4)
        errs.append(np.linalg.norm(fu.triangulate(d, g).xyz - q))
    return float(np.median(errs))


def test_noisy_accuracy_large_array():
    assert mc_error(np.random.default_rng(1), G, 1.0) < 0.005


def test_conditioning_with_range():
    e1 = mc_error(np.random.default_rng(2), G, 1.0, 500)
    e2 = mc_error(np.random.default_rng(2), G, 2.0, 500)
    assert e1 < e2 <= 4 * e1


@pytest.mark.parametrize("d", [[1.0, 1.0], [1.0, 1.0, np.nan, 1.0], [1.0, -1.0, 1.0, 1.0],
                               [9.0, 9.0, 9.0, 9.0]])
def test_triangulation_rejects(d):
    with pytest.raises(TriangulationError):
        fu.triangulate(d, G)


def test_geometry_validation():
    with pytest.raises(ValueError):
        fu.MicArrayGeometry(np.ones((4, 3)), 1.0, 1.0)
    with pytest.raises(ValueError):
        fu.MicArrayGeometry(np.zeros((3, 3)), 1.0, 1.0)
    assert fu.SMALL_ARRAY.width == 0.06 and fu.SMALL_ARRAY.height == 0.0535


# -- smoothing -------------------------------------------------------------------

def poses_at(t, x, y=None, z=None):
    y = np.zeros_like(x) if y is None else y
    z = np.zeros_like(x) if z is None else z
    return [fu.Pose3D(float(a), float(b), float(c), float(e))
            for a, b, c, e in zip(t, x, y, z)]


def test_smooth_constant():
    out = fu.smooth(poses_at(np.arange(20) * 0.001, np.full(20, 0.7)))
    assert len(out) == 2
    assert all(p.x == pytest.approx(0.7, abs=1e-15) for p in out)


def test_smooth_ramp_midpoint():
    t = np.arange(30) * 0.001
    out = fu.smooth(poses_at(t, 0.5 + 0.1 * t))
    for p in out:
        assert p.x == pytest.approx(0.5 + 0.1 * p.t, abs=1e-12)


def test_smooth_jitter_reduction():
    rng = np.random.default_rng(3)
    n, sigma = 10, 0.001
    t = np.arange(20_000) * 0.001
    out = fu.smooth(poses_at(t, rng.normal(0.0, sigma, t.size)))
    assert np.std([p.x for p in out]) == pytest.approx(sigma / math.sqrt(n), rel=0.05)


def test_smooth_keeps_worst_quality():
    ps = poses_at([0.0, 0.001], np.array([1.0, 1.0]))
    ps[1] = fu.Pose3D(0.001, 1.0, 0.0, 0.0, fu.PoseQuality.RECOVERED)
    assert fu.smooth(ps)[0].quality is fu.PoseQuality.RECOVERED
    assert fu.smooth([]) == []


# -- failure detection and recovery ---------------------------------------------------

@pytest.mark.parametrize("thr", [fu.OUTLIER_THRESHOLD, 0.02])
def test_single_outlier(thr):
    assert fu.detect_failure([1.000, 1.001, 1.0005, 1.035], threshold=thr) == {3}


def test_no_outlier():
    assert fu.detect_failure([1.000, 1.002, 0.999, 1.0015]) == set()


def test_outlier_relative_to_geometry():
    truth = np.array([0.8, 0.1, 0.0])
    exp = G.distances(truth)
    d = exp + np.array([0.0, 0.0, 0.02, 0.0005])
    assert fu.detect_failure(d, exp) == {2}
    assert fu.consensus(d, exp, 2, {2}) == pytest.approx(exp[2], abs=5e-4)


def test_triple_outlier_is_global():
    with pytest.raises(GlobalFailure):
        fu.detect_failure([1.0, 1.03, 0.96, 1.07])
    with pytest.raises(GlobalFailure):
        fu.detect_failure([1.0, np.nan, np.nan, 1.0])


def test_lost_channel_ignored():
    assert fu.detect_failure([1.0, np.nan, 1.001, 1.03]) == {3}


def state(d):
    return TrackerState(d, 0.0, 7, FilterConfig(10.0), 3, Quality.TRACKING, 0.1, 20.0)


def test_recover_one_cycle():
    lam = fu.cycle_length(P, P.T - 0.002)
    assert lam == pytest.approx(P.c / (P.f0 + P.slope * (P.T - 0.002)))
    s = fu.recover(state(1.0 + lam), 1.0, P)
    assert s.n_offset == 6
    assert s.d_end == pytest.approx(1.0, abs=1e-12)
    assert s.quality is Quality.RECOVERED


def test_recover_noop():
    s = state(1.0)
    assert fu.recover(s, 1.004, P) is s


def test_recover_small_gap_still_steps():
    s = fu.recover(state(1.0), 1.011, P)
    assert s.n_offset == 8


# -- array pipeline ------------------------------------------------------------------

def arrays_scenario(faults, duration=1.5):
    return Scenario("fusion_test", motion={"kind": "static", "point": [0.8, 0.05, 0.0]},
                    geometry={"kind": "preset", "name": "large"},
                    channel={"snr_db": 20.0, "multipath": {"kind": "none"}},
                    duration=duration, seed=2, faults=faults)


def test_array_recovers_injected_slip():
    rep = harness.run(arrays_scenario([{"chirp": 10, "mic": 1, "delta_m": 0.02}]))
    rec = [e for e in rep.events if e["kind"] == "recovered"]
    assert rec and rec[0]["mic"] == [1] and 10 <= rec[0]["chirp"] <= 11
    s = rep.series["tracker"]
    late = (s["mic"] == 1) & (s["t"] > 13 * P.period)
    assert np.all(np.abs(s["error"][late]) < 0.005)
    assert rep.stats["tracker_3d"]["median"] < 0.005


def test_array_triple_outlier_rebootstraps():
    faults = [{"chirp": 10, "mic": m, "delta_m": dm} for m, dm in
              [(0, 0.02), (1, -0.04), (2, 0.06)]]
    rep = harness.run(arrays_scenario(faults))
    kinds = [e["kind"] for e in rep.events]
    assert "global_failure" in kinds
    # re-bootstrap brings every channel back onto the truth
    s = rep.series["tracker"]
    late = s["t"] > 14 * P.period
    assert np.median(np.abs(s["error"][late])) < 0.002
