"""On-disk formats for range estimates and poses.

Range estimates are CSV with a header row. Poses are a binary stream of
records, each a little-endian ``u32`` payload length followed by the
payload ``f64 t, f64 x, f64 y, f64 z, u8 quality`` (quality codes from
:data:`chirptrack.fusion.QUALITY_CODES`). A reader stops cleanly at a
partially written final record, so a file can be tailed while it grows.
"""

from __future__ import annotations

import csv
import struct
import time
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

from .errors import IngestError
from .fusion import QUALITY_CODES, Pose3D, PoseQuality
from .tracker import Quality, RangeEstimate

ESTIMATE_COLUMNS = ("chirp_index", "t", "mic_id", "tx_id", "window", "d", "v", "quality", "method")
_POSE = struct.Struct("<ddddB")
_LEN = struct.Struct("<I")
_CODE_TO_QUALITY = {v: k for k, v in QUALITY_CODES.items()}


def write_estimates_csv(estimates: Iterable[RangeEstimate], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_COLUMNS)
        for e in estimates:
            w.writerow([e.chirp_index, repr(e.t), e.mic_id, e.tx_id, e.window, repr(e.d),
                        repr(e.v), e.quality.value, e.method])
    return path


def read_estimates_csv(path) -> list[RangeEstimate]:
    out = []
    with Path(path).open(newline="") as fh:
        r = csv.DictReader(fh)
        if tuple(r.fieldnames or ()) != ESTIMATE_COLUMNS:
            raise IngestError(f"{path}: unexpected estimate columns {r.fieldnames}")
        for row in r:
            out.append(RangeEstimate(int(row["chirp_index"]), float(row["t"]), int(row["mic_id"]),
                                     float(row["d"]), float(row["v"]), Quality(row["quality"]),
                                     int(row["window"]), int(row["tx_id"]), row["method"]))
    return out


def encode_pose(pose: Pose3D) -> bytes:
    body = _POSE.pack(pose.t, pose.x, pose.y, pose.z, QUALITY_CODES[pose.quality])
    return _LEN.pack(len(body)) + body


def write_poses(fh: BinaryIO, poses: Iterable[Pose3D]) -> int:
    n = 0
    for pose in poses:
        fh.write(encode_pose(pose))
        n += 1
    fh.flush()
    return n


def decode_poses(data: bytes) -> tuple[list[Pose3D], int]:
    """Decode complete records; returns the poses and the bytes consumed."""
    out, pos = [], 0
    while pos + _LEN.size <= len(data):
        (n,) = _LEN.unpack_from(data, pos)
        if n != _POSE.size:
            raise IngestError(f"bad pose record length {n} at byte {pos}")
        if pos + _LEN.size + n > len(data):
            break
        t, x, y, z, q = _POSE.unpack_from(data, pos + _LEN.size)
        if q not in _CODE_TO_QUALITY:
            raise IngestError(f"bad pose quality code {q} at byte {pos}")
        out.append(Pose3D(t, x, y, z, _CODE_TO_QUALITY[q]))
        pos += _LEN.size + n
    return out, pos


def read_poses(path) -> list[Pose3D]:
    return decode_poses(Path(path).read_bytes())[0]


def tail_poses(path, follow: bool = False, poll_s: float = 0.2,
               idle_timeout: float | None = None) -> Iterator[Pose3D]:
    """Yield poses from ``path``; with ``follow`` keep waiting for new records.

    Following stops after ``idle_timeout`` seconds without new data (never,
    if ``None``).
    """
    path = Path(path)
    offset = 0
    idle = 0.0
    while True:
        data = path.read_bytes()[offset:] if path.exists() else b""
        poses, used = decode_poses(data)
        offset += used
        yield from poses
        if not follow:
            return
        if poses:
            idle = 0.0
        else:
            if idle_timeout is not None and idle >= idle_timeout:
                return
            time.sleep(poll_s)
            idle += poll_s


def pose_quality(code: int) -> PoseQuality:
    return _CODE_TO_QUALITY[code]
