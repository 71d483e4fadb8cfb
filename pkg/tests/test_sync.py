import numpy as np
import pytest

from chirptrack import channel as ch
from chirptrack import sync
from chirptrack.chirp import ChirpParams, SampleBlock, synthesize_chirp
from chirptrack.dsp import PseudoSchedule
from chirptrack.errors import CalibrationFailed, IngestError
from chirptrack.tracker import ChannelTracker, resolve_initial_offset
from chirptrack.twopath import render_buffer

P = ChirpParams()


def chirp_train_samples(p, lead, n_chirps=3, noise_sigma=0.0, seed=0):
    one = np.zeros(p.n_samples + int(round(p.gap * p.fs)))
    one[:p.n_samples] = synthesize_chirp(p).samples
    x = np.concatenate([np.zeros(lead), np.tile(one, n_chirps)])
    if noise_sigma:
        x = x + np.random.default_rng(seed).normal(0.0, noise_sigma, x.size)
    return SampleBlock(x, 0.0, p.fs)


def touch_stream(p, ppm, duration, seed=3):
    """Transmitter resting at the touch distance with a +20 dB level boost."""
    mot = ch.static([sync.TOUCH_DISTANCE, 0, 0])
    cm = ch.ChannelModel([ch.direct_path(mot, (0, 0, 0), p.c, 10.0)], snr_db=20.0,
                         clock_ppm=ppm, clock_offset0=0.0123, reference_amplitude=1.0)
    gen = ([b] for b in ch.render_stream(ch.ChirpTrain(p), cm, duration, p.fs, seed=seed))
    return gen, cm, mot


def track_after(cal, trks, bufs, sts, it):
    est = []
    for chunk in it:
        for st, buf, b in zip(sts, bufs, chunk):
            buf.append(*st.push(b.samples))
        est += trks[0].run(bufs[0])
    return est


@pytest.fixture(scope="module")
def drift20():
    gen, cm, mot = touch_stream(P, 20.0, 9.0)
    cal, trks, bufs, sts, it = sync.calibrate(gen, P)
    est = track_after(cal, trks, bufs, sts, it)
    return cal, est, cm, mot


# -- chirp start -----------------------------------------------------------------

def test_detect_start_exact_lead():
    assert sync.detect_chirp_start(chirp_train_samples(P, 1000), P) == pytest.approx(
        1000 / P.fs, abs=1e-12)


def test_detect_start_noisy():
    sigma = np.sqrt(0.5 / 10.0)
    errs = [sync.detect_chirp_start(chirp_train_samples(P, 1000, noise_sigma=sigma, seed=s), P)
            * P.fs - 1000 for s in range(20)]
    assert np.max(np.abs(errs)) <= 2


def test_detect_start_noise_fails():
    x = np.random.default_rng(1).normal(size=3 * 2400)
    with pytest.raises(CalibrationFailed):
        sync.detect_chirp_start(SampleBlock(x, 0.0, P.fs), P)


def test_detect_start_too_short():
    with pytest.raises(CalibrationFailed):
        sync.detect_chirp_start(SampleBlock(np.zeros(3000), 0.0, P.fs), P)


def test_normalized_xcorr_unit_peak():
    tpl = synthesize_chirp(P).samples
    r = sync.normalized_xcorr(np.concatenate([np.zeros(50), tpl, np.zeros(50)]), tpl)
    assert np.argmax(r) == 50
    assert r[50] == pytest.approx(1.0, abs=1e-9)


# -- cycle bootstrap ---------------------------------------------------------------

def bootstrap_frame(d):
    mot = ch.static([d, 0, 0])
    buf = render_buffer(P, [ch.direct_path(mot, (0, 0, 0), P.c)], 0.2, snr_db=30.0, seed=2)
    return ChannelTracker(P, PseudoSchedule(0.0, P.period)).frame_at(buf, 1, 0.0)


@pytest.mark.parametrize("d", [0.01, 0.3, 0.77])
def test_bootstrap_recovers_true_cycle(d):
    frame = bootstrap_frame(d)
    j = int(round(0.002 * P.fs))
    tau_j = float(frame.tau[j])
    # the count that an exact distance produces for the same phase sample
    n_true = sync.bootstrap_offset(frame, P, D=d)
    assert sync.bootstrap_offset(frame, P) == n_true
    assert sync.bootstrap_offset(frame, P, D=d + 0.005) == n_true
    assert sync.bootstrap_offset(frame, P, D=d - 0.005) == n_true
    assert resolve_initial_offset(0.0, 0.0, P, tau_j) == 0


# -- drift -----------------------------------------------------------------------

def test_drift_exact_line():
    t = np.linspace(0, 5, 100)
    slope, icpt = sync.estimate_drift(list(zip(t, 0.01 + 0.00686 * t)))
    assert slope == pytest.approx(0.00686, rel=1e-9)
    assert icpt == pytest.approx(0.01 + 0.00686 * 2.5, rel=1e-9)


def test_drift_rejects_motion():
    t = np.linspace(0, 5, 100)
    with pytest.raises(CalibrationFailed):
        sync.estimate_drift(list(zip(t, 0.01 + 0.01 * np.sin(2 * np.pi * t))))


def test_drift_needs_data():
    with pytest.raises(CalibrationFailed):
        sync.estimate_drift([(0.0, 0.01)])


def test_touch_calibration_20ppm(drift20):
    cal, est, cm, mot = drift20
    assert cal.drift_rate == pytest.approx(343 * 20e-6, rel=0.02)
    assert 0.0 <= cal.start_offset < P.period
    d = np.array([e.d for e in est])
    t = np.array([e.t for e in est])
    assert np.max(np.abs(d - sync.TOUCH_DISTANCE)) < 1e-3
    slope, _ = sync.estimate_drift(list(zip(t, d)))
    assert abs(slope) < 1e-4


def test_touch_calibration_zero_ppm():
    gen, _, _ = touch_stream(P, 0.0, 6.0, seed=5)
    cal = sync.calibrate(gen, P)[0]
    assert abs(cal.drift_rate) < 5e-5


def test_recalibration_idempotent():
    gen, _, _ = touch_stream(P, 20.0, 11.5, seed=7)
    cal1, trks, bufs, sts, it = sync.calibrate(gen, P)

    def resumed():
        for chunk in it:
            yield chunk

    cal2 = sync.calibrate(resumed(), P, prior=cal1)[0]
    assert abs(cal2.drift_rate - cal1.drift_rate) < 1e-4
    s1, s2 = cal1.schedule(), cal2.schedule()
    k1 = int(cal2.t_ref / P.period)
    t1 = s1.receive_time(0.0, k1)
    k2 = np.arange(k1 - 5, k1 + 6)
    gap = np.min(np.abs([s2.receive_time(0.0, int(k)) - t1 for k in k2]))
    assert gap < 1.0 / P.fs


def test_stream_too_short_fails():
    gen, _, _ = touch_stream(P, 0.0, 1.0)
    with pytest.raises(CalibrationFailed):
        sync.calibrate(gen, P)


# -- records ---------------------------------------------------------------------

def test_calibration_json_round_trip(tmp_path):
    cal = sync.ClockCalibration(0.0123, (3, 4), 0.00686, 101, 5.5, (0.01, 0.012))
    back = sync.ClockCalibration.load(cal.save(tmp_path / "cal.json"))
    assert back == cal
    assert back.kappa == pytest.approx(0.00686 / 343)


def test_calibration_rejects_bad_records(tmp_path):
    cal = sync.ClockCalibration(0.0123, (3,), 0.0, 101)
    with pytest.raises(IngestError):
        sync.ClockCalibration.from_json(cal.to_json().replace('"version": 1', '"version": 9'))
    with pytest.raises(IngestError):
        sync.ClockCalibration.from_json("{")
    with pytest.raises(IngestError):
        sync.ClockCalibration.from_json(cal.to_json().replace("clock_calibration", "other"))
    with pytest.raises(IngestError):
        sync.ClockCalibration.load(tmp_path / "missing.json")


def test_calibration_sanity_checks():
    with pytest.raises(CalibrationFailed):
        sync.ClockCalibration(0.01, (0,), 0.2, 0)
    with pytest.raises(CalibrationFailed):
        sync.ClockCalibration(0.06, (0,), 0.0, 0)
