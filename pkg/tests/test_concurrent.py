import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chirptrack import channel as ch
from chirptrack import concurrent as cc
from chirptrack.chirp import ChirpParams
from chirptrack.dsp import AnalyticStream, PseudoSchedule, RxBuffer
from chirptrack.errors import ConfigurationError, IngestError
from chirptrack.tracker import ChannelTracker

P = ChirpParams()
MIC = np.zeros(3)


def slot(tx, toa, vo=0.0):
    return cc.TransmitterSlot(tx, vo, toa, toa)


# -- slot assignment ---------------------------------------------------------------

def test_four_slot_targets():
    np.testing.assert_allclose(cc.slot_targets(4, P), [0.005625, 0.01125, 0.016875, 0.0225],
                               atol=1e-15)


def test_offset_formula():
    msgs = cc.assign_slots({1: 0.003, 2: 0.004, 3: 0.001, 4: 0.002}, P)
    assert msgs[1].virtual_offset == pytest.approx(0.002625, abs=1e-15)
    for i, tx in enumerate(sorted(msgs), start=1):
        assert msgs[tx].kind is cc.MessageKind.ASSIGN_OFFSET
        toa = {1: 0.003, 2: 0.004, 3: 0.001, 4: 0.002}[tx] + msgs[tx].virtual_offset
        assert toa == pytest.approx(i * P.T / 8, abs=1e-15)


def test_single_slot():
    msgs = cc.assign_slots({7: 0.004}, P)
    assert msgs[7].virtual_offset == pytest.approx(P.T / 2 - 0.004, abs=1e-15)


def test_capacity():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cc.assign_slots({i: 0.002 for i in range(5)}, P)
    with pytest.warns(cc.CapacityWarning):
        cc.assign_slots({i: 0.002 for i in range(6)}, P)
    with pytest.raises(ConfigurationError):
        cc.slot_targets(0, P)


def test_time_division_order():
    assert cc.time_division_chirps([5, 2, 9], 1) == {2: 1, 5: 2, 9: 3}


# -- control messages --------------------------------------------------------------

@given(st.sampled_from(list(cc.MessageKind)), st.integers(0, 65535), st.floats(-0.05, 0.05),
       st.integers(0, 2 ** 32 - 1), st.integers(-2 ** 40, 2 ** 40))
def test_message_round_trip(kind, tx, vo, epoch, k):
    m = cc.ControlMessage(kind, tx, vo, epoch, k)
    assert cc.ControlMessage.from_bytes(m.to_bytes()) == m


def test_message_rejects_corruption():
    raw = cc.ControlMessage(cc.MessageKind.REASSIGN, 1, 0.001, 3, 10).to_bytes()
    with pytest.raises(IngestError):
        cc.ControlMessage.from_bytes(raw[:3])
    with pytest.raises(IngestError):
        cc.ControlMessage.from_bytes(raw[:-1])
    with pytest.raises(IngestError):
        cc.ControlMessage.from_bytes(raw[:4] + b"XXXX" + raw[8:])
    with pytest.raises(IngestError):
        cc.ControlMessage.from_bytes(raw[:8] + b"\x02" + raw[9:])
    with pytest.raises(IngestError):
        cc.ControlMessage.from_bytes(b"\x05\x00\x00\x00" + raw[4:])


def test_channel_is_ordered():
    link = cc.ControlChannel()
    msgs = [cc.ControlMessage(cc.MessageKind.ASSIGN_OFFSET, i, 0.0, 1) for i in range(4)]
    for m in msgs:
        link.send(m)
    assert len(link) == 4
    assert link.receive() == msgs[0]
    assert link.drain() == msgs[1:]
    assert link.receive() is None


def test_agent_applies_and_ignores_stale():
    train = ch.ChirpTrain(P)
    agent = cc.TransmitterAgent(2, train)
    assert agent.handle(cc.ControlMessage(cc.MessageKind.ASSIGN_OFFSET, 2, 0.004, 1, 3))
    assert train.offset_of(2) == 0.0 and train.offset_of(3) == 0.004
    assert not agent.handle(cc.ControlMessage(cc.MessageKind.REASSIGN, 2, 0.008, 1, 5))
    assert not agent.handle(cc.ControlMessage(cc.MessageKind.REASSIGN, 3, 0.008, 2, 5))
    assert train.offset_of(9) == 0.004


# -- merge detection and reassignment ------------------------------------------------------

def test_merge_flagged():
    slots = [slot(1, 0.01), slot(2, 0.01 + 0.8 / P.B), slot(3, 0.02)]
    assert cc.detect_merge(slots, P) == [(1, 2)]


def test_separated_slots_not_flagged():
    slots = [slot(i + 1, t) for i, t in enumerate(cc.slot_targets(4, P))]
    assert cc.detect_merge(slots, P) == []
    assert cc.reassign(slots, P, 2, 10) == []


def test_reassign_even_spacing():
    targets = cc.slot_targets(4, P)
    slots = [slot(i + 1, t, vo=0.001 * i) for i, t in enumerate(targets)]
    slots[1].current_toa = 0.0168
    old = {s.tx_id: s.virtual_offset for s in slots}
    msgs = cc.reassign(slots, P, 2, 10)
    assert {m.tx_id for m in msgs} == {1, 2, 3, 4}
    assert all(m.kind is cc.MessageKind.REASSIGN and m.epoch == 2 for m in msgs)
    new_toa = sorted(s.true_delay + next(m.virtual_offset for m in msgs if m.tx_id == s.tx_id)
                     for s in slots)
    np.testing.assert_allclose(np.diff(new_toa), P.T / 8, atol=1e-15)
    assert cc.max_outage(msgs, old) <= P.T / 4


def test_coordinator_epochs():
    link = cc.ControlChannel()
    co = cc.Coordinator(P, link)
    co.assign({1: 0.002, 2: 0.003}, 5)
    assert co.epoch == 1 and len(link) == 2
    assert co.check([slot(1, 0.01), slot(2, 0.03)], 9) == []
    msgs = co.check([slot(1, 0.01), slot(2, 0.0101)], 9)
    assert co.epoch == 2 and len(msgs) == 2 and len(co.history) == 4


# -- receiver ------------------------------------------------------------------------------

def render(trains, paths, dur, snr_db=np.inf, seed=0):
    blk = ch.render(trains, ch.ChannelModel(paths, snr_db=snr_db, reference_amplitude=1.0),
                    dur, P.fs, seed=seed)
    s, buf = AnalyticStream(P.fs), RxBuffer(P.fs)
    buf.append(*s.push(blk.samples))
    buf.append(*s.flush())
    return buf


def test_single_transmitter_reduces_to_plain_tracker():
    mot = ch.sinusoid([0.6, 0, 0], [0.02, 0, 0], 0.5)
    vo = 96 / P.fs
    sched = PseudoSchedule(0.0, P.period)
    path = ch.direct_path(mot, MIC, P.c)
    plain_buf = render(ch.ChirpTrain(P), [path], 1.0)
    shifted_buf = render(ch.ChirpTrain(P, [(0, vo)]), [path], 1.0)

    t0 = 0.5 * P.period
    d0, v0 = ch.ground_truth(mot, [t0], MIC)
    plain = ChannelTracker(P, sched, fixed_snr_db=30.0)
    plain.seed(float(d0[0]), float(v0[0]), t0, 1)
    base = plain.run(plain_buf)

    rx = cc.ConcurrentReceiver(P, sched, fixed_snr_db=30.0)
    toa = float(d0[0]) / P.c + vo
    rx.add(cc.TransmitterSlot(1, vo, toa, toa))
    rx.seed(1, float(d0[0]), float(v0[0]), t0 + vo, 1)
    conc = rx.run(shifted_buf)[1]
    n = min(len(base), len(conc))
    assert n > 30
    # the shifted train samples the motion vo later, so compare errors against truth
    tb = np.array([e.t for e in base[:n]])
    tc = np.array([e.t for e in conc[:n]])
    eb = np.array([e.d for e in base[:n]]) - ch.ground_truth(mot, tb, MIC)[0]
    ec = np.array([e.d for e in conc[:n]]) - ch.ground_truth(mot, tc, MIC)[0]
    assert np.max(np.abs(eb - ec)) < 1e-5
    assert np.max(np.abs(tc - tb - vo)) < 1e-3


def per_tx_median(run, motions):
    out = {}
    for tx, ests in run.estimates.items():
        ests = [e for e in ests if e.chirp_index > len(motions) + 1]
        t = np.array([e.t for e in ests])
        g, _ = ch.ground_truth(motions[tx], t, MIC)
        out[tx] = (float(np.median(np.abs(np.array([e.d for e in ests]) - g))), np.diff(t))
    return out


def truth_of(m):
    return lambda t: tuple(float(a[0]) for a in ch.ground_truth(m, [t], MIC))


def multipath(mot, rng, n=5, aggregate=0.6):
    """Direct path plus ``n`` scatterers within 30 cm of the transmitter."""
    tx = mot.position(np.zeros(1))[0]
    w = rng.dirichlet(np.ones(n)) * aggregate
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    pts = tx + dirs * rng.uniform(0.01, 0.3, n)[:, None]
    ph = rng.uniform(0, 2 * np.pi, n)
    return [ch.direct_path(mot, MIC, P.c)] + [ch.scatter_path(mot, MIC, pts[j], P.c, w[j], ph[j])
                                              for j in range(n)]


def test_two_transmitters_match_single_runs():
    motions = {1: ch.static([0.8, 0, 0]), 2: ch.static([1.2, 0.05, 0])}
    truth = {tx: truth_of(m) for tx, m in motions.items()}
    both, alone = {1: [], 2: []}, {1: [], 2: []}
    for seed in (1, 2, 3):
        rng = np.random.default_rng(seed)
        paths = {tx: multipath(m, rng) for tx, m in motions.items()}
        res = per_tx_median(cc.simulate_concurrent(P, paths, 2.0, 20.0, seed, truth), motions)
        for tx in motions:
            single = cc.simulate_concurrent(P, {tx: paths[tx]}, 2.0, 20.0, seed, {tx: truth[tx]})
            both[tx].append(res[tx][0])
            alone[tx].append(per_tx_median(single, {tx: motions[tx]})[tx][0])
            np.testing.assert_allclose(res[tx][1], P.period / 2, atol=1e-3)
    for tx in motions:
        assert np.mean(both[tx]) == pytest.approx(np.mean(alone[tx]), rel=0.2)


def test_reassignment_is_continuous():
    motions = {1: ch.static([0.5, 0, 0]), 2: ch.min_jerk([2.4, 0, 0], [0.62, 0, 0], 0.5, 2.0),
               3: ch.static([1.0, 0.1, 0]), 4: ch.static([1.3, 0, 0.1])}
    paths = {tx: [ch.direct_path(m, MIC, P.c)] for tx, m in motions.items()}
    truth = {tx: truth_of(m) for tx, m in motions.items()}
    run = cc.simulate_concurrent(P, paths, 3.5, np.inf, 1, truth=truth, fixed_snr_db=30.0)
    assert run.shifts, "the converging transmitter should force a reassignment"
    assert max(abs(v) for s in run.shifts for v in s.values()) <= P.T / len(motions)
    k_switch = min(m.effective_chirp for m in run.messages if m.kind is cc.MessageKind.REASSIGN)
    for tx, ests in run.estimates.items():
        t = np.array([e.t for e in ests])
        g, _ = ch.ground_truth(motions[tx], t, MIC)
        err = np.array([e.d for e in ests]) - g
        k = np.array([e.chirp_index for e in ests])
        before, after = err[k < k_switch][-1], err[k >= k_switch][0]
        assert abs(after - before) < 1e-3
        assert np.max(np.abs(err)) < 2e-3


def test_broadcast_to_many_receivers():
    mot = ch.static([0.7, 0.1, 0.0])
    mics = [np.array([0, y, 0.0]) for y in (-0.2, 0.0, 0.3)]
    sched = PseudoSchedule(0.0, P.period)

    def track(mic, seed):
        buf = render(ch.ChirpTrain(P), [ch.direct_path(mot, mic, P.c)], 0.8, 20.0, seed)
        trk = ChannelTracker(P, sched, fixed_snr_db=20.0)
        d0, _ = ch.ground_truth(mot, [0.5 * P.period], mic)
        trk.seed(float(d0[0]), 0.0, 0.5 * P.period, 1)
        return np.array([e.d for e in trk.run(buf)])

    together = [track(m, i) for i, m in enumerate(mics)]
    for i, m in enumerate(mics):
        d_ref, _ = ch.ground_truth(mot, [0.0], m)
        np.testing.assert_array_equal(track(m, i), together[i])
        assert np.median(np.abs(together[i] - d_ref[0])) < 5e-4
