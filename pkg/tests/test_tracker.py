import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chirptrack import channel as ch
from chirptrack import tracker as tr
from chirptrack.chirp import ChirpParams
from chirptrack.bounds import TwoPathScenario, distance_error_bound
from chirptrack.dsp import AnalyticStream, FilterConfig, PseudoSchedule, RxBuffer
from chirptrack.errors import InsufficientData, InversionError
from chirptrack.twopath import simulate_two_path

P = ChirpParams()


def buffer_for(p, motion, duration, snr_db=20.0, seed=0, extra=()):
    paths = [ch.direct_path(motion, (0, 0, 0), p.c)] + list(extra)
    cm = ch.ChannelModel(paths, snr_db=snr_db, reference_amplitude=1.0)
    blk = ch.render(ch.ChirpTrain(p), cm, duration, p.fs, seed=seed)
    s, buf = AnalyticStream(p.fs), RxBuffer(p.fs)
    buf.append(*s.push(blk.samples))
    buf.append(*s.flush())
    return buf


def seeded(p, motion, **kw):
    trk = tr.ChannelTracker(p, PseudoSchedule(0.0, p.period), **kw)
    d, v = ch.ground_truth(motion, [0.5 * p.period])
    trk.seed(float(d[0]), float(v[0]), 0.5 * p.period, 1)
    return trk


# -- phase model -------------------------------------------------------------

def test_zero_phase_zero_delay(p):
    np.testing.assert_array_equal(tr.phase_to_delay([0.0, 0.01, 0.04], [0.0, 0.0, 0.0], p), 0.0)


def test_forward_oracle_value(p):
    phi = float(tr.phase_forward(p, 0.010, 0.001))
    assert phi == pytest.approx(-2 * np.pi * 18.76667, abs=1e-4)
    assert float(tr.phase_to_delay(0.010, phi, p)) == pytest.approx(0.001, abs=1e-15)


def test_round_trip_sweep(p):
    td = np.linspace(1e-4, 1e-2, 100)
    tau = np.linspace(0.0, p.T, 91)
    TD, TAU = np.meshgrid(td, tau)
    back = tr.phase_to_delay(TAU, tr.phase_forward(p, TAU, TD), p)
    assert np.max(np.abs(back - TD)) < 1e-12


@given(st.floats(0.0, 0.045), st.floats(0.0, 0.0449))
def test_round_trip_property(tau, td):
    back = float(tr.phase_to_delay(tau, tr.phase_forward(P, tau, td), P))
    assert abs(back - td) < 1e-12


def test_inversion_errors(p):
    with pytest.raises(InversionError):
        tr.phase_to_delay(0.01, 1.0, p)
    with pytest.raises(InversionError):
        tr.phase_to_delay(0.0, tr.phase_forward(p, 0.0, 0.05), p)
    assert np.isnan(tr.phase_to_delay(0.01, 1.0, p, strict=False))


@given(st.floats(0.0, 0.045), st.floats(1e-4, 0.04))
def test_convexity(tau, td):
    h = 1e-7
    f = lambda x: float(tr.phase_forward(P, tau, x))
    d1 = (f(td + h) - f(td - h)) / (2 * h)
    assert d1 < 0
    # the model is quadratic in t_d, so the second difference is exact up to rounding
    h2 = 1e-4
    d2 = (f(td + h2) - 2 * f(td) + f(td - h2)) / h2**2
    assert d2 == pytest.approx(2 * np.pi * P.B / P.T, rel=1e-6)


# -- unwrapping -----------------------------------------------------------------

def test_unwrap_down_crossing():
    out = tr.unwrap_within_chirp(np.array([6.0, 0.1])).unwrapped
    np.testing.assert_allclose(out, [6.0, 0.1 + 2 * np.pi])


def test_unwrap_up_crossing():
    out = tr.unwrap_within_chirp(np.array([0.2, 6.2])).unwrapped
    np.testing.assert_allclose(out, [0.2, 6.2 - 2 * np.pi])
    assert out[1] == pytest.approx(-0.083, abs=1e-3)


@given(st.lists(st.floats(-50.0, 50.0), min_size=1, max_size=200))
def test_unwrap_invariants(steps):
    true = np.cumsum(np.clip(steps, -3.0, 3.0))
    wrapped = np.mod(true, 2 * np.pi)
    ps = tr.unwrap_within_chirp(tr.PhaseSeries(np.arange(true.size), wrapped))
    k = (ps.unwrapped - ps.wrapped) / (2 * np.pi)
    np.testing.assert_allclose(k, np.round(k), atol=1e-9)
    assert ps.unwrapped[0] == wrapped[0]
    assert np.all(np.abs(np.diff(ps.unwrapped)) < np.pi + 1e-9)
    np.testing.assert_allclose(ps.unwrapped - ps.unwrapped[0], true - true[0], atol=1e-9)


def test_unwrap_moving_path_is_smooth(p):
    mot = ch.linear([0.4, 0, 0], [0.5, 0, 0])
    buf = buffer_for(p, mot, 0.2, snr_db=np.inf)
    trk = seeded(p, mot)
    frame = trk.frame_at(buf, 1, trk.predicted_lead(1))
    from chirptrack.dsp import apply_filter
    filt = apply_filter(frame, FilterConfig(trk.state.d_end / p.c * p.B), p)
    un = tr.unwrap_within_chirp(np.mod(np.angle(filt.samples), 2 * np.pi)).unwrapped
    assert np.max(np.abs(np.diff(un))) < np.pi


# -- cycle resolution -------------------------------------------------------------

def _wrapped_at(p, d, tau):
    phi = float(tr.phase_forward(p, tau, d / p.c))
    n_true = math.floor(phi / (2 * np.pi))
    return phi - 2 * np.pi * n_true, n_true


@pytest.mark.parametrize("d", [0.05, 0.4, 1.0, 2.3])
def test_resolve_exact_prediction(p, d):
    tau = d / p.c + 0.002
    w, n_true = _wrapped_at(p, d, tau)
    assert tr.resolve_initial_offset(w, d, p, tau) == n_true


def test_resolve_8mm_error_keeps_cycle(p):
    d, tau = 0.6, 0.6 / 343 + 0.002
    w, n_true = _wrapped_at(p, d, tau)
    assert tr.resolve_initial_offset(w, d + 0.008, p, tau) == n_true
    assert tr.resolve_initial_offset(w, d - 0.008, p, tau) == n_true


def test_resolve_25mm_error_slips_one_cycle(p):
    d, tau = 0.6, 0.6 / 343 + 0.002
    w, n_true = _wrapped_at(p, d, tau)
    n = tr.resolve_initial_offset(w, d + 0.025, p, tau)
    assert abs(n - n_true) == 1
    d_bad = float(tr.phase_to_delay(tau, w + 2 * np.pi * n, p)) * p.c
    assert abs(d_bad - d) == pytest.approx(0.0196, abs=0.0015)


@given(st.floats(0.05, 3.0), st.floats(-0.0085, 0.0085), st.floats(0.0, 0.03))
def test_resolve_guard_property(d, err, tau_extra):
    tau = d / P.c + tau_extra
    w, n_true = _wrapped_at(P, d, tau)
    assert tr.resolve_initial_offset(w, d + err, P, tau) == n_true


# -- speed ---------------------------------------------------------------------

def test_speed_exact_line():
    t = np.linspace(0, 0.01, 480)
    assert tr.estimate_speed(t, 0.5 + 0.2 * t) == pytest.approx(0.2)
    assert tr.estimate_speed(t, np.full(t.size, 0.5)) == 0.0


def test_speed_noise_within_three_sigma(rng):
    t = np.linspace(0, 0.01, 480)
    sigma = 1e-4
    sig_slope = sigma / np.sqrt(np.sum((t - t.mean()) ** 2))
    for _ in range(20):
        v = tr.estimate_speed(t, 0.5 + 0.2 * t + rng.normal(0, sigma, t.size))
        assert abs(v - 0.2) <= 3 * sig_slope


def test_speed_insufficient_data():
    with pytest.raises(InsufficientData):
        tr.estimate_speed([0.0], [1.0])
    with pytest.raises(InsufficientData):
        tr.estimate_speed([1.0, 1.0], [1.0, 2.0])


# -- per-chirp tracking ------------------------------------------------------------

def test_static_100_chirps(p):
    mot = ch.static([0.4, 0, 0])
    buf = buffer_for(p, mot, 101 * p.period + 0.02, seed=11)
    est = seeded(p, mot).run(buf)
    per_chirp = {}
    for e in est:
        per_chirp.setdefault(e.chirp_index, []).append(e.d)
    d = np.array([np.mean(v) for v in per_chirp.values()])
    assert len(d) >= 99
    assert np.std(d) < 2e-4
    assert abs(np.mean(d) - 0.4) < 5e-4


@pytest.mark.parametrize("theta", np.linspace(0, 2 * np.pi, 6, endpoint=False))
def test_two_path_within_bound(p, theta):
    r = simulate_two_path(0.5, 0.6, theta, p, peak=False)
    bound = distance_error_bound(TwoPathScenario(1.0, 0.5, 0.6, p))
    assert bound == pytest.approx(1.97e-3, abs=0.01e-3)
    assert r.tracker_err_m <= bound + 5e-5


def test_sinusoid_1000_chirps_no_slips(p):
    mot = ch.sinusoid([0.6, 0, 0], [0.1, 0, 0], 1.0)
    buf = buffer_for(p, mot, 1001 * p.period + 0.02, seed=5)
    est = seeded(p, mot).run(buf)
    t = np.array([e.t for e in est])
    err = np.array([e.d for e in est]) - ch.ground_truth(mot, t)[0]
    assert len({e.chirp_index for e in est}) >= 999
    assert np.max(np.abs(err)) < 0.01
    assert all(e.quality == tr.Quality.TRACKING for e in est)


def test_window_average_is_exact_mean(p):
    mot = ch.linear([0.5, 0, 0], [0.2, 0, 0])
    buf = buffer_for(p, mot, 0.2)
    trk = seeded(p, mot)
    res = trk.step(buf)
    rel = res.tau - res.tau[0]
    for e in res.estimates:
        a, b = tr.WINDOWS[e.window]
        m = (rel >= a - 0.5 / p.fs) & (rel < b - 0.5 / p.fs)
        assert e.d == float(res.d[m].mean())
        assert e.t == float(res.t[m].mean())


def test_cadence_and_latency(p):
    assert [round(a * 1e3) for a, _ in tr.WINDOWS] == [5, 30]
    assert tr.estimate_latency(FilterConfig(10.0)) == pytest.approx(0.025)
    assert tr.estimate_latency(FilterConfig(10.0, group_delay=0.03)) == pytest.approx(0.040)


def test_wrong_prediction_slips_a_cycle(p):
    mot = ch.static([0.5, 0, 0])
    buf = buffer_for(p, mot, 0.2)
    trk = tr.ChannelTracker(p, PseudoSchedule(0.0, p.period))
    trk.seed(0.5 + 0.025, 0.0, 0.025, 1)
    res = trk.step(buf)
    err = np.mean([e.d for e in res.estimates]) - 0.5
    # one phase cycle is c/f with f between f0 and f0 + B
    assert p.c / (p.f0 + p.B) < abs(err) < p.c / p.f0


def test_speed_jump_degrades(p):
    mot = ch.static([0.5, 0, 0])
    buf = buffer_for(p, mot, 0.2)
    trk = tr.ChannelTracker(p, PseudoSchedule(0.0, p.period))
    # correct distance at the frame start but a speed the data contradict
    t_start = trk.schedule.receive_time(0.5 / p.c, 1) + tr.EDGE
    trk.seed(0.5, 1.5, t_start, 1)
    trk.state.chirp_index = 0
    res = trk.step(buf)
    assert res.state.quality == tr.Quality.DEGRADED
    assert all(e.quality == tr.Quality.DEGRADED for e in res.estimates)
    assert any("acceleration" in e for e in res.events)


def test_silence_reports_lost(p):
    buf = RxBuffer(p.fs)
    buf.append(0, np.zeros(int(0.3 * p.fs), complex))
    trk = tr.ChannelTracker(p, PseudoSchedule(0.0, p.period))
    trk.seed(0.5, 0.0, 0.025, 1)
    res = trk.step(buf)
    assert res.estimates == [] and trk.state.quality == tr.Quality.LOST


def test_bootstrap_from_peak(p):
    mot = ch.static([0.9, 0, 0])
    buf = buffer_for(p, mot, 0.2)
    trk = tr.ChannelTracker(p, PseudoSchedule(0.0, p.period))
    assert trk.bootstrap(buf, 1) == pytest.approx(0.9, abs=0.003)
    assert trk.next_chirp == 2


def test_tracker_state_clamps_distance():
    st_ = tr.TrackerState(-0.1, 0.0, 0, FilterConfig(0.0), 0)
    assert st_.d_end == 0.0


def test_virtual_offset_removed(p):
    mot = ch.static([0.5, 0, 0])
    vo = 0.002
    paths = [ch.PathSpec(1.0, lambda t: np.full_like(t, 0.5 / p.c + vo))]
    cm = ch.ChannelModel(paths, snr_db=30.0, reference_amplitude=1.0)
    blk = ch.render(ch.ChirpTrain(p), cm, 0.3, p.fs, seed=2)
    s, buf = AnalyticStream(p.fs), RxBuffer(p.fs)
    buf.append(*s.push(blk.samples))
    trk = tr.ChannelTracker(p, PseudoSchedule(0.0, p.period), virtual_offset=vo)
    trk.seed(trk.apparent(0.5), 0.0, 0.025, 1)
    est = trk.run(buf)
    assert est and all(abs(e.d - 0.5) < 5e-4 for e in est)
