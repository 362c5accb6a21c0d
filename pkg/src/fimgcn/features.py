"""Per-joint position, velocity and angle features assembled into a [9, T, J] tensor."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .graph import SkeletonGraph
from .ingest import CleanSequence

CHANNELS = ("p_x", "p_y", "p_z", "s_x", "s_y", "s_z", "a_x", "a_y", "a_z")
FEATURE_GROUPS = {"coords": slice(0, 3), "vel": slice(3, 6), "ang": slice(6, 9)}
FEATURE_SETS = {
    "coords": frozenset({"coords"}),
    "coords+vel+ang": frozenset({"coords", "vel", "ang"}),
}
DEGENERATE_NORM = 1e-8

FEATURE_MAGIC = b"FGF1"
FEATURE_VERSION = 1


def velocity(seq: CleanSequence) -> np.ndarray:
    """Frame-difference velocity [3, T, J]; frame 0 copies frame 1."""
    if seq.T < 2:
        raise ValueError("velocity needs at least 2 frames")
    p = seq.positions
    s = np.empty_like(p)
    s[1:] = (p[1:] - p[:-1]) / seq.frame_interval
    s[0] = s[1]
    return s.transpose(2, 0, 1)


def angles(seq: CleanSequence, graph: SkeletonGraph) -> np.ndarray:
    """Angles [3, T, J] between each joint's center-ward bone and the +x, +y, +z axes."""
    p = seq.positions
    parent = np.array(graph.parent)
    bone = p - p[:, parent]
    norm = np.linalg.norm(bone, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < DEGENERATE_NORM
    cos = np.clip(bone / np.where(norm < DEGENERATE_NORM, 1.0, norm), -1.0, 1.0)
    a = np.arccos(cos)
    a[degenerate] = np.pi / 2
    a[:, graph.root] = 0.0
    return a.transpose(2, 0, 1)


def assemble(seq: CleanSequence, graph: SkeletonGraph,
             groups: frozenset[str] | set[str] | None = None) -> np.ndarray:
    """Stack positions, velocities and angles; channel groups not in ``groups`` are zeroed."""
    if seq.J != graph.node_count:
        raise ValueError(f"sequence has {seq.J} joints, graph has {graph.node_count}")
    X = np.concatenate([seq.positions.transpose(2, 0, 1), velocity(seq), angles(seq, graph)])
    if groups is not None:
        unknown = set(groups) - set(FEATURE_GROUPS)
        if unknown:
            raise ValueError(f"unknown feature groups {sorted(unknown)}")
        X = X * channel_mask(groups)[:, None, None]
    return X


def channel_mask(groups) -> np.ndarray:
    mask = np.zeros(len(CHANNELS))
    for g in groups:
        mask[FEATURE_GROUPS[g]] = 1.0
    return mask


def write_features(path: str | Path, X: np.ndarray):
    C, T, J = X.shape
    if C != len(CHANNELS):
        raise ValueError(f"expected {len(CHANNELS)} channels, got {C}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, T, J))
        fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())


def read_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature dump")
    version, T, J = struct.unpack("<III", data[4:16])
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature dump version {version}")
    X = np.frombuffer(data, dtype="<f4", offset=16)
    if X.size != len(CHANNELS) * T * J:
        raise ValueError(f"{path}: truncated feature dump")
    return X.reshape(len(CHANNELS), T, J).astype(np.float32)
