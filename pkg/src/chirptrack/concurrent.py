"""Concurrent multi-transmitter operation.

Each transmitter delays its chirps by a virtual offset so that, at the
receiver, the direct paths land at evenly spaced apparent delays
``i*T/(2N)``. A single shared receive buffer then feeds one tracker per
transmitter, each with its own narrow band-pass filter. A coordinator
watches the tracked delays and hands out fresh offsets when two slots drift
too close together.

Control messages use a small binary wire format::

    u32  payload length (bytes that follow)
    4s   magic b"CTRL"
    u8   version (1)
    u8   kind (1 = assign, 2 = reassign)
    u16  tx_id
    u32  epoch
    f64  virtual_offset  [s]
    i64  effective_chirp (first chirp index that uses the offset)

All fields are little-endian.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
import warnings
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChirpTrain
from .chirp import ChirpParams
from .dsp import PseudoSchedule, RxBuffer
from .errors import ConfigurationError, FrameUnderrun, IngestError
from .tracker import ChannelTracker, ChirpResult, RangeEstimate, p_bin

log = logging.getLogger(__name__)

MAX_TRANSMITTERS = 5
MERGE_BINS = 3.0
MESSAGE_MAGIC = b"CTRL"
MESSAGE_VERSION = 1
_BODY = struct.Struct("<4sBBHIdq")
_LEN = struct.Struct("<I")


class CapacityWarning(UserWarning):
    """More transmitters than the slot layout comfortably supports."""


class MessageKind(enum.IntEnum):
    ASSIGN_OFFSET = 1
    REASSIGN = 2


@dataclass
class TransmitterSlot:
    """One transmitter's place in the shared beat spectrum.

    ``virtual_offset`` is the transmit delay relative to the shared schedule;
    it is negative when the slot lies before the transmitter's true delay.
    """

    tx_id: int
    virtual_offset: float
    target_toa: float
    current_toa: float

    @property
    def true_delay(self) -> float:
        return self.current_toa - self.virtual_offset


@dataclass(frozen=True)
class ControlMessage:
    kind: MessageKind
    tx_id: int
    virtual_offset: float
    epoch: int
    effective_chirp: int = 0

    def to_bytes(self) -> bytes:
        body = _BODY.pack(MESSAGE_MAGIC, MESSAGE_VERSION, int(self.kind), self.tx_id,
                          self.epoch, self.virtual_offset, self.effective_chirp)
        return _LEN.pack(len(body)) + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ControlMessage":
        if len(data) < _LEN.size:
            raise IngestError("control message truncated")
        (n,) = _LEN.unpack_from(data)
        if n != _BODY.size or len(data) < _LEN.size + n:
            raise IngestError(f"bad control message length {n}")
        magic, ver, kind, tx, epoch, vo, k = _BODY.unpack_from(data, _LEN.size)
        if magic != MESSAGE_MAGIC:
            raise IngestError("bad control message magic")
        if ver != MESSAGE_VERSION:
            raise IngestError(f"unsupported control message version {ver}")
        return cls(MessageKind(kind), tx, vo, epoch, k)


class ControlChannel:
    """Reliable ordered in-process queue carrying serialized messages."""

    def __init__(self):
        self._q: deque[bytes] = deque()

    def send(self, msg: ControlMessage) -> None:
        self._q.append(msg.to_bytes())

    def receive(self) -> ControlMessage | None:
        return ControlMessage.from_bytes(self._q.popleft()) if self._q else None

    def drain(self) -> list[ControlMessage]:
        out = []
        while (m := self.receive()) is not None:
            out.append(m)
        return out

    def __len__(self) -> int:
        return len(self._q)


# --------------------------------------------------------------------------
# slot arithmetic
# --------------------------------------------------------------------------

def slot_targets(n: int, p: ChirpParams) -> np.ndarray:
    """Apparent delays ``i*T/(2N)`` for ``i = 1..N``."""
    if n < 1:
        raise ConfigurationError("need at least one transmitter")
    return np.arange(1, n + 1) * p.T / (2 * n)


def _check_capacity(n: int) -> None:
    if n > MAX_TRANSMITTERS:
        warnings.warn(f"{n} transmitters exceed the supported {MAX_TRANSMITTERS}; "
                      "neighbouring slots will interfere", CapacityWarning, stacklevel=3)


def assign_slots(measured_toa: dict[int, float], p: ChirpParams, epoch: int = 0,
                 effective_chirp: int = 0) -> dict[int, ControlMessage]:
    """Offsets moving each measured TOA to its slot; slots follow tx_id order."""
    _check_capacity(len(measured_toa))
    targets = slot_targets(len(measured_toa), p)
    return {tx: ControlMessage(MessageKind.ASSIGN_OFFSET, tx, float(targets[i] - measured_toa[tx]),
                               epoch, effective_chirp)
            for i, tx in enumerate(sorted(measured_toa))}


def slots_from_messages(msgs: dict[int, ControlMessage], measured_toa: dict[int, float],
                        p: ChirpParams) -> dict[int, TransmitterSlot]:
    out = {}
    for tx, m in msgs.items():
        toa = measured_toa[tx] + m.virtual_offset
        out[tx] = TransmitterSlot(tx, m.virtual_offset, toa, toa)
    return out


def detect_merge(slots, p: ChirpParams, threshold_bins: float = MERGE_BINS) -> list[tuple[int, int]]:
    """Pairs of transmitters whose tracked beat tones are closer than ``threshold_bins``."""
    s = sorted(_as_list(slots), key=lambda x: x.tx_id)
    pairs = []
    for i in range(len(s)):
        for j in range(i + 1, len(s)):
            if abs(s[i].current_toa - s[j].current_toa) * p.B < threshold_bins:
                pairs.append((s[i].tx_id, s[j].tx_id))
    return pairs


def reassign(slots, p: ChirpParams, epoch: int, effective_chirp: int,
             threshold_bins: float = MERGE_BINS) -> list[ControlMessage]:
    """Fresh even assignment ordered by current TOA; empty when nothing merged.

    Ordering by the current apparent delay keeps every transmitter's move
    short.
    """
    s = _as_list(slots)
    if not detect_merge(s, p, threshold_bins):
        return []
    _check_capacity(len(s))
    targets = slot_targets(len(s), p)
    order = sorted(s, key=lambda x: (x.current_toa, x.tx_id))
    return [ControlMessage(MessageKind.REASSIGN, sl.tx_id, float(targets[i] - sl.true_delay),
                           epoch, effective_chirp)
            for i, sl in enumerate(order)]


def _as_list(slots) -> list[TransmitterSlot]:
    return list(slots.values()) if isinstance(slots, dict) else list(slots)


# --------------------------------------------------------------------------
# actors
# --------------------------------------------------------------------------

class TransmitterAgent:
    """Transmit side: applies received offsets to its chirp train."""

    def __init__(self, tx_id: int, train: ChirpTrain):
        self.tx_id = tx_id
        self.train = train
        self.epoch = -1

    def handle(self, msg: ControlMessage) -> bool:
        if msg.tx_id != self.tx_id or msg.epoch <= self.epoch:
            return False
        self.epoch = msg.epoch
        self.train.schedule_offset(msg.effective_chirp, msg.virtual_offset)
        return True


@dataclass
class _Pending:
    offset: float
    chirp: int
    epoch: int


@dataclass
class SlotTrack:
    slot: TransmitterSlot
    tracker: ChannelTracker
    epoch: int = -1
    pending: list[_Pending] = field(default_factory=list)
    suspended: bool = False


class ConcurrentReceiver:
    """One tracker per transmitter slot over a shared analytic buffer.

    Each tracker reports ``c*(apparent delay - virtual_offset)``. Offset
    changes are applied at their effective chirp; the tracker's predicted
    apparent distance moves by the offset change so no re-calibration is
    needed. Chirps during which a transmitter's schedule was cut short are
    skipped for that transmitter.
    """

    def __init__(self, p: ChirpParams, schedule: PseudoSchedule, mic_id: int = 0,
                 fixed_snr_db: float | None = None):
        self.p = p
        self.schedule = schedule
        self.mic_id = mic_id
        self.fixed_snr_db = fixed_snr_db
        self.tracks: dict[int, SlotTrack] = {}
        self.events: list[str] = []

    def add(self, slot: TransmitterSlot, epoch: int = 0) -> ChannelTracker:
        trk = ChannelTracker(self.p, self.schedule, self.mic_id, slot.tx_id, slot.virtual_offset,
                             self.fixed_snr_db)
        self.tracks[slot.tx_id] = SlotTrack(slot, trk, epoch)
        return trk

    def slot_bins(self, tx_id: int) -> tuple[float, float]:
        """Beat-bin search range around a slot, half a slot spacing each side."""
        n = max(len(self.tracks), 1)
        half = self.p.T / (4 * n) * self.p.B
        centre = self.tracks[tx_id].slot.target_toa * self.p.B
        return centre - half, centre + half

    def seed(self, tx_id: int, d: float, v: float, t: float, next_chirp: int) -> None:
        st = self.tracks[tx_id]
        st.tracker.seed(st.tracker.apparent(d), v, t, next_chirp)

    def bootstrap(self, buf: RxBuffer, tx_id: int, k: int) -> float:
        st = self.tracks[tx_id]
        d_app = st.tracker.bootstrap(buf, k, self.slot_bins(tx_id))
        return d_app - st.slot.virtual_offset * self.p.c

    def handle(self, msg: ControlMessage) -> bool:
        st = self.tracks.get(msg.tx_id)
        if st is None or msg.epoch <= st.epoch:
            return False
        st.epoch = msg.epoch
        st.pending.append(_Pending(msg.virtual_offset, msg.effective_chirp, msg.epoch))
        return True

    def _apply_pending(self, st: SlotTrack) -> None:
        trk, gap = st.tracker, self.p.period - self.p.T
        for q in st.pending:
            if q.chirp == trk.next_chirp + 1 and q.offset - trk.virtual_offset < -gap:
                # the transmitter cuts this chirp short to start the next one early
                skipped = trk.next_chirp
                trk.next_chirp += 1
                trk.state = replace(trk.state, chirp_index=skipped)
                self.events.append(f"tx {st.slot.tx_id}: chirp {skipped} skipped for offset change")
                break
        due = [q for q in st.pending if q.chirp <= trk.next_chirp]
        if not due:
            return
        st.pending = [q for q in st.pending if q.chirp > trk.next_chirp]
        q = due[-1]
        delta = q.offset - trk.virtual_offset
        trk.virtual_offset = q.offset
        s = trk.state
        d_app = s.d_end + delta * self.p.c
        trk.state = replace(s, d_end=d_app, filter_cfg=s.filter_cfg.with_center(p_bin(self.p, d_app)))
        st.slot.virtual_offset = q.offset
        st.slot.current_toa = st.slot.target_toa = d_app / self.p.c
        self.events.append(f"tx {st.slot.tx_id}: offset {q.offset * 1e3:.3f} ms from chirp "
                           f"{q.chirp} (epoch {q.epoch})")

    def step(self, buf: RxBuffer) -> dict[int, ChirpResult]:
        """Advance every tracker that has a full frame buffered."""
        out = {}
        for tx, st in self.tracks.items():
            trk = st.tracker
            if trk.state is None or st.suspended:
                continue
            self._apply_pending(st)
            try:
                res = trk.step(buf)
            except FrameUnderrun:
                continue
            if res is None:
                continue
            st.slot.current_toa = trk.state.d_end / self.p.c
            out[tx] = res
        return out

    def run(self, buf: RxBuffer) -> dict[int, list[RangeEstimate]]:
        out: dict[int, list[RangeEstimate]] = {tx: [] for tx in self.tracks}
        while True:
            res = self.step(buf)
            if not res:
                return out
            for tx, r in res.items():
                out[tx].extend(r.estimates)

    @property
    def settled(self) -> bool:
        """No offset change is waiting to take effect."""
        return not any(st.pending for st in self.tracks.values())

    @property
    def slots(self) -> dict[int, TransmitterSlot]:
        return {tx: st.slot for tx, st in self.tracks.items()}


class Coordinator:
    """Single logical actor that owns the slot plan and emits control messages."""

    def __init__(self, p: ChirpParams, channel: ControlChannel, threshold_bins: float = MERGE_BINS):
        self.p = p
        self.channel = channel
        self.threshold_bins = threshold_bins
        self.epoch = 0
        self.history: list[ControlMessage] = []

    def assign(self, measured_toa: dict[int, float], effective_chirp: int) -> dict[int, ControlMessage]:
        self.epoch += 1
        msgs = assign_slots(measured_toa, self.p, self.epoch, effective_chirp)
        for m in msgs.values():
            self._send(m)
        return msgs

    def check(self, slots, effective_chirp: int) -> list[ControlMessage]:
        """Reassign if any pair merged; new offsets apply from ``effective_chirp``."""
        if not detect_merge(slots, self.p, self.threshold_bins):
            return []
        self.epoch += 1
        msgs = reassign(slots, self.p, self.epoch, effective_chirp, self.threshold_bins)
        log.info("slot merge detected; reassigning from chirp %d", effective_chirp)
        for m in msgs:
            self._send(m)
        return msgs

    def _send(self, m: ControlMessage) -> None:
        self.history.append(m)
        self.channel.send(m)


def time_division_chirps(tx_ids, first_chirp: int = 0) -> dict[int, int]:
    """Bootstrap chirp index per transmitter: ascending tx_id, one chirp each."""
    return {tx: first_chirp + i for i, tx in enumerate(sorted(tx_ids))}


def max_outage(msgs: list[ControlMessage], old_offsets: dict[int, float]) -> float:
    """Largest schedule shift a reassignment imposes on any transmitter, in seconds."""
    return max((abs(m.virtual_offset - old_offsets[m.tx_id]) for m in msgs), default=0.0)


def demux_track(buf: RxBuffer, slots, p: ChirpParams, schedule: PseudoSchedule,
                seeds: dict[int, tuple[float, float, float, int]] | None = None,
                bootstrap_chirp: int | None = None,
                fixed_snr_db: float | None = None) -> dict[int, list[RangeEstimate]]:
    """Track every slot of an already-rendered buffer.

    Trackers start either from ``seeds`` (``tx -> (d, v, t, next_chirp)``)
    or from a DFT bootstrap on ``bootstrap_chirp`` restricted to each slot.
    """
    rx = ConcurrentReceiver(p, schedule, fixed_snr_db=fixed_snr_db)
    for s in _as_list(slots):
        rx.add(replace(s))
    for tx in rx.tracks:
        if seeds is not None:
            rx.seed(tx, *seeds[tx])
        elif bootstrap_chirp is not None:
            rx.bootstrap(buf, tx, bootstrap_chirp)
        else:
            raise ConfigurationError("need seeds or a bootstrap chirp")
    return rx.run(buf)


def slot_spacing(slots) -> np.ndarray:
    t = np.sort([s.current_toa for s in _as_list(slots)])
    return np.diff(t)


# --------------------------------------------------------------------------
# closed-loop simulation
# --------------------------------------------------------------------------

@dataclass
class ConcurrentRun:
    estimates: dict[int, list[RangeEstimate]]
    bootstrap_toa: dict[int, float]
    messages: list[ControlMessage]
    events: list[str]
    shifts: list[dict[int, float]]


def simulate_concurrent(p: ChirpParams, tx_paths: dict[int, list], duration: float,
                        snr_db: float = np.inf, seed=None, truth=None,
                        fixed_snr_db: float | None = None, block_s: float = 0.01,
                        threshold_bins: float = MERGE_BINS) -> ConcurrentRun:
    """Run bootstrap, slot assignment, tracking and reassignment end to end.

    ``tx_paths`` maps each transmitter id to its propagation paths (whose
    ``source`` fields are rewritten here). During the time-division phase
    transmitter ``i`` (in ascending id order) sends only chirp ``i``; all
    are silent for one further chirp, then transmit concurrently with their
    assigned offsets. Trackers start from the DFT bootstrap unless
    ``truth`` supplies ``tx -> callable(t) -> (d, v)`` used to seed them
    (a stand-in for per-device touch calibration).
    """
    from .channel import ChannelModel, Renderer
    from .dsp import AnalyticStream

    txs = sorted(tx_paths)
    n = len(txs)
    td = time_division_chirps(txs)
    live = n + 1
    trains, paths = {}, []
    for i, tx in enumerate(txs):
        trains[tx] = ChirpTrain(p, muted=[k for k in range(live) if k != td[tx]])
        for path in tx_paths[tx]:
            paths.append(replace(path, source=i))
    renderer = Renderer([trains[tx] for tx in txs], ChannelModel(paths, snr_db=snr_db), p.fs, seed)
    stream = AnalyticStream(p.fs)
    buf = RxBuffer(p.fs)
    schedule = PseudoSchedule(0.0, p.period)
    link = ControlChannel()
    coord = Coordinator(p, link, threshold_bins)
    agents = {tx: TransmitterAgent(tx, trains[tx]) for tx in txs}
    rx = ConcurrentReceiver(p, schedule, fixed_snr_db=fixed_snr_db)
    boot = {tx: ChannelTracker(p, schedule, tx_id=tx) for tx in txs}
    toa: dict[int, float] = {}
    out: dict[int, list[RangeEstimate]] = {tx: [] for tx in txs}
    shifts: list[dict[int, float]] = []
    blk = max(int(round(block_s * p.fs)), 1)
    total = int(math.ceil(duration * p.fs))

    def deliver():
        for m in link.drain():
            agents[m.tx_id].handle(m)
            rx.handle(m)

    while renderer.samples_rendered < total:
        first, y = stream.push(renderer.render(min(blk, total - renderer.samples_rendered)).samples)
        buf.append(first, y)
        if len(toa) < n:
            for tx in txs:
                if tx in toa or not boot[tx].frame_ready(buf, td[tx], 0.0):
                    continue
                toa[tx] = boot[tx].bootstrap(buf, td[tx]) / p.c
            if len(toa) == n:
                msgs = coord.assign(toa, live)
                for tx, m in msgs.items():
                    tr = rx.add(TransmitterSlot(tx, 0.0, toa[tx], toa[tx]), coord.epoch - 1)
                    if truth is None:
                        tr.state = boot[tx].state
                    else:
                        t0 = schedule.receive_time(toa[tx], td[tx])
                        d0, v0 = truth[tx](t0)
                        tr.seed(d0, v0, t0, live)
                        tr.virtual_offset = 0.0
                    tr.next_chirp = live
                deliver()
            continue
        while res := rx.step(buf):
            for tx, r in res.items():
                out[tx].extend(r.estimates)
        if rx.settled:
            k_safe = int(math.floor(renderer.time / p.period)) + 2
            before = {tx: s.virtual_offset for tx, s in rx.slots.items()}
            msgs = coord.check(rx.slots, k_safe)
            if msgs:
                shifts.append({m.tx_id: m.virtual_offset - before[m.tx_id] for m in msgs})
            deliver()
        keep = min(int(math.floor(schedule.receive_time(0.0, st.tracker.next_chirp) * p.fs))
                   for st in rx.tracks.values())
        buf.discard_before(keep - 8)
    first, y = stream.flush()
    buf.append(first, y)
    for tx, lst in rx.run(buf).items():
        out[tx].extend(lst)
    return ConcurrentRun(out, toa, coord.history, rx.events, shifts)
