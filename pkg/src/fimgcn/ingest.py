"""Reading raw skeleton recordings and turning them into clean fixed-length sequences.

Cleaning order: interpolate gaps -> median filter -> moving average -> prune
extremity joints -> cut a fixed-length segment.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

DEFAULT_FRAME_RATE = 30.0
DEFAULT_WINDOW = 15
SEGMENT_LENGTH = 150


class JointId(enum.IntEnum):
    SpineBase = 0
    SpineMid = 1
    SpineShoulder = 2
    Neck = 3
    Head = 4
    ShoulderLeft = 5
    ShoulderRight = 6
    ElbowLeft = 7
    ElbowRight = 8
    WristLeft = 9
    WristRight = 10
    HipLeft = 11
    HipRight = 12
    KneeLeft = 13
    KneeRight = 14
    AnkleLeft = 15
    AnkleRight = 16


JOINT_NAMES: tuple[str, ...] = tuple(j.name for j in JointId)

# Kinect v2 ordering of the 25-joint capture skeleton.
KINECT25_NAMES: tuple[str, ...] = (
    "SpineBase", "SpineMid", "Neck", "Head",
    "ShoulderLeft", "ElbowLeft", "WristLeft", "HandLeft",
    "ShoulderRight", "ElbowRight", "WristRight", "HandRight",
    "HipLeft", "KneeLeft", "AnkleLeft", "FootLeft",
    "HipRight", "KneeRight", "AnkleRight", "FootRight",
    "SpineShoulder", "HandTipLeft", "ThumbLeft", "HandTipRight", "ThumbRight",
)

PRUNED_JOINTS: frozenset[str] = frozenset({
    "HandLeft", "HandRight", "HandTipLeft", "HandTipRight",
    "ThumbLeft", "ThumbRight", "FootLeft", "FootRight",
})

ACTIONS = ("Sit", "Std", "SitULE", "SitFR", "StdFR", "SitDRR", "SitDLR",
           "StdDRR", "StdDLR", "Squat", "Walk")


class IngestError(ValueError):
    """Base class for malformed or unusable input data."""


class MalformedLine(IngestError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class DuplicateFrame(IngestError):
    pass


class UnknownJoint(IngestError):
    pass


class UninterpolatableJoint(IngestError):
    pass


class TooShort(IngestError):
    pass


@dataclass
class RawSequence:
    """Frames as ``(index, {joint: xyz or None})`` pairs, sorted by index."""

    frames: list[tuple[int, dict[str, tuple[float, float, float] | None]]]
    frame_rate: float = DEFAULT_FRAME_RATE
    skeleton: str | None = None

    def joint_names(self) -> tuple[str, ...]:
        if self.skeleton == "pruned17":
            return JOINT_NAMES
        if self.skeleton == "kinect25":
            return KINECT25_NAMES
        seen = {name for _, joints in self.frames for name in joints}
        return KINECT25_NAMES if seen - set(JOINT_NAMES) else JOINT_NAMES


@dataclass
class DenseSequence:
    """Gap-free positions [T, J, 3] in meters with named joints."""

    positions: np.ndarray
    joint_names: tuple[str, ...]
    frame_rate: float = DEFAULT_FRAME_RATE
    start_index: int = 0


@dataclass
class CleanSequence:
    positions: np.ndarray  # [T, J, 3], meters
    frame_interval: float
    joint_names: tuple[str, ...] = field(default=JOINT_NAMES)

    def __post_init__(self):
        if self.frame_interval <= 0:
            raise ValueError("frame_interval must be positive")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("clean sequence contains non-finite values")

    @property
    def T(self) -> int:
        return self.positions.shape[0]

    @property
    def J(self) -> int:
        return self.positions.shape[1]


# -- parsing -----------------------------------------------------------------

def parse_sequence(stream: IO[bytes] | IO[str] | Iterable[str | bytes]) -> RawSequence:
    """Parse a JSON-Lines skeleton recording."""
    known = set(KINECT25_NAMES)
    frames: dict[int, dict] = {}
    frame_rate = DEFAULT_FRAME_RATE
    skeleton = None
    for line_no, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLine(line_no, f"invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise MalformedLine(line_no, "expected a JSON object")
        if "t" not in obj:
            if "frame_rate" in obj or "skeleton" in obj:
                if frames:
                    raise MalformedLine(line_no, "header must precede frames")
                frame_rate = float(obj.get("frame_rate", DEFAULT_FRAME_RATE))
                if frame_rate <= 0:
                    raise MalformedLine(line_no, "frame_rate must be positive")
                skeleton = obj.get("skeleton")
                if skeleton not in (None, "kinect25", "pruned17"):
                    raise MalformedLine(line_no, f"unknown skeleton {skeleton!r}")
                continue
            raise MalformedLine(line_no, "missing frame index 't'")
        t = obj["t"]
        if not isinstance(t, int) or isinstance(t, bool):
            raise MalformedLine(line_no, "frame index 't' must be an integer")
        if t in frames:
            raise DuplicateFrame(f"line {line_no}: duplicate frame index {t}")
        joints_in = obj.get("joints", {})
        if not isinstance(joints_in, dict):
            raise MalformedLine(line_no, "'joints' must be an object")
        joints = {}
        for name, xyz in joints_in.items():
            if name not in known:
                raise UnknownJoint(f"line {line_no}: unknown joint {name!r}")
            if xyz is None:
                joints[name] = None
                continue
            if (not isinstance(xyz, list) or len(xyz) != 3
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in xyz)):
                raise MalformedLine(line_no, f"joint {name!r} must be [x, y, z] or null")
            joints[name] = (float(xyz[0]), float(xyz[1]), float(xyz[2]))
        frames[t] = joints
    return RawSequence(sorted(frames.items()), frame_rate=frame_rate, skeleton=skeleton)


def read_sequence(path: str | Path) -> RawSequence:
    with open(path, "rb") as fh:
        return parse_sequence(fh)


def write_sequence(path: str | Path, seq: RawSequence):
    with open(path, "w", encoding="utf-8") as fh:
        header = {"frame_rate": seq.frame_rate}
        if seq.skeleton:
            header["skeleton"] = seq.skeleton
        fh.write(json.dumps(header) + "\n")
        for t, joints in seq.frames:
            record = {"t": t, "joints": {k: None if v is None else list(v) for k, v in joints.items()}}
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


@dataclass
class ManifestRow:
    sequence_path: Path
    subject_id: str
    action: str
    fim_item: str
    fim_score: int


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"sequence_path", "subject_id", "action", "fim_item", "fim_score"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise IngestError(f"{path}: manifest lacks columns {sorted(missing)}")
        for line_no, rec in enumerate(reader, start=2):
            if rec["action"] not in ACTIONS:
                raise IngestError(f"{path}:{line_no}: unknown action {rec['action']!r}")
            try:
                score = int(rec["fim_score"])
            except ValueError:
                raise IngestError(f"{path}:{line_no}: fim_score must be an integer") from None
            if not 1 <= score <= 7:
                raise IngestError(f"{path}:{line_no}: fim_score {score} outside 1..7")
            seq_path = Path(rec["sequence_path"])
            if not seq_path.is_absolute():
                seq_path = path.parent / seq_path
            rows.append(ManifestRow(seq_path, rec["subject_id"], rec["action"],
                                    rec["fim_item"], score))
    return rows


def write_manifest(path: str | Path, rows: Iterable[ManifestRow]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence_path", "subject_id", "action", "fim_item", "fim_score"])
        for r in rows:
            writer.writerow([str(r.sequence_path), r.subject_id, r.action, r.fim_item, r.fim_score])


# -- cleaning ----------------------------------------------------------------

def interpolate_missing(seq: RawSequence) -> DenseSequence:
    """Fill every frame between the first and last index by per-axis linear interpolation.

    Leading and trailing gaps hold the nearest observed value. Observed values
    are never modified.
    """
    if not seq.frames:
        raise IngestError("sequence has no frames")
    names = seq.joint_names()
    indices = np.array([t for t, _ in seq.frames])
    first, last = int(indices[0]), int(indices[-1])
    grid = np.arange(first, last + 1)
    out = np.empty((grid.size, len(names), 3))
    for j, name in enumerate(names):
        obs_t, obs_p = [], []
        for t, joints in seq.frames:
            p = joints.get(name)
            if p is not None:
                obs_t.append(t)
                obs_p.append(p)
        if len(obs_t) < 2:
            raise UninterpolatableJoint(
                f"joint {name} observed in {len(obs_t)} frame(s); need at least 2")
        obs_t = np.array(obs_t)
        obs_p = np.array(obs_p)
        for axis in range(3):
            # np.interp holds the end values outside the observed range
            out[:, j, axis] = np.interp(grid, obs_t, obs_p[:, axis])
        out[obs_t - first, j] = obs_p
    return DenseSequence(out, names, seq.frame_rate, first)


def _check_window(window: int):
    if not isinstance(window, (int, np.integer)) or window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window!r}")


def _windows(x: np.ndarray, window: int) -> np.ndarray:
    """Centered windows over axis 0, NaN-padded so reductions see truncated windows."""
    half = window // 2
    pad = np.full((half,) + x.shape[1:], np.nan)
    padded = np.concatenate([pad, np.asarray(x, dtype=float), pad], axis=0)
    return sliding_window_view(padded, window, axis=0)


def median_filter(x: np.ndarray, window: int) -> np.ndarray:
    """Centered running median along axis 0; windows are truncated at the edges.

    A truncated window of even length takes its lower middle value, so the
    output is always one of the observed samples.
    """
    _check_window(window)
    if window == 1:
        return np.array(x, dtype=float)
    ordered = np.sort(_windows(x, window), axis=-1)  # NaN padding sorts last
    middle = (np.sum(~np.isnan(ordered), axis=-1, keepdims=True) - 1) // 2
    return np.take_along_axis(ordered, middle, axis=-1)[..., 0]


def moving_average(x: np.ndarray, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Centered running mean along axis 0; windows are truncated at the edges."""
    _check_window(window)
    if window == 1:
        return np.array(x, dtype=float)
    return np.nanmean(_windows(x, window), axis=-1)


def prune_joints(positions: np.ndarray, joint_names: Iterable[str]) -> np.ndarray:
    """Drop the 8 hand/foot extremity joints and reorder to ``JointId`` codes."""
    joint_names = tuple(joint_names)
    if len(joint_names) == len(JOINT_NAMES) and set(joint_names) == set(JOINT_NAMES):
        log.warning("sequence already has the 17-joint layout; pruning skipped")
        order = [joint_names.index(n) for n in JOINT_NAMES]
        return positions[:, order]
    if set(joint_names) != set(KINECT25_NAMES):
        raise IngestError(f"expected the 25-joint capture skeleton, got {len(joint_names)} joints")
    order = [joint_names.index(n) for n in JOINT_NAMES]
    return positions[:, order]


def segment(positions: np.ndarray, frame_rate: float = DEFAULT_FRAME_RATE,
            length: int = SEGMENT_LENGTH) -> CleanSequence:
    """Take the first ``length`` frames."""
    if positions.shape[0] < length:
        raise TooShort(f"sequence has {positions.shape[0]} frames; need {length}")
    return CleanSequence(np.array(positions[:length]), 1.0 / frame_rate)


def clean(seq: RawSequence, window: int = DEFAULT_WINDOW,
          length: int = SEGMENT_LENGTH) -> CleanSequence:
    dense = interpolate_missing(seq)
    pos = median_filter(dense.positions, window)
    pos = moving_average(pos, window)
    pos = prune_joints(pos, dense.joint_names)
    return segment(pos, dense.frame_rate, length)


def load_clean(path: str | Path, window: int = DEFAULT_WINDOW,
               length: int = SEGMENT_LENGTH) -> CleanSequence:
    return clean(read_sequence(path), window, length)
