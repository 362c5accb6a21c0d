"""Deterministic synthetic skeleton recordings with a known, velocity-borne class signal.

Every joint oscillates sinusoidally around a neutral standing pose. On the
designated signal joints, class 1 ("independent", FIM 7) moves with amplitude
``amplitude`` at ``frequency``; class 0 (FIM 3) with ``amplitude * (1 - gap)``
at ``(1 - 0.8 * gap)`` times the frequency, i.e. 0.6x at the default gap of 0.5,
so a zero gap makes the classes identical. Other joints draw their motion from one distribution
shared by both classes. Noise, dropped frames and spikes are added last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import default_graph
from .ingest import JOINT_NAMES, KINECT25_NAMES, SEGMENT_LENGTH, ManifestRow, RawSequence, write_manifest, write_sequence

FREQUENCY_GAP_SLOPE = 0.8
SCORE_BY_CLASS = {1: 7, 0: 3}

# extremity joints ride on their parent with a fixed offset (meters)
EXTREMITY_OFFSETS = {
    "HandLeft": ("WristLeft", (-0.01, -0.08, 0.01)),
    "HandTipLeft": ("WristLeft", (-0.015, -0.16, 0.02)),
    "ThumbLeft": ("WristLeft", (0.03, -0.06, 0.03)),
    "HandRight": ("WristRight", (0.01, -0.08, 0.01)),
    "HandTipRight": ("WristRight", (0.015, -0.16, 0.02)),
    "ThumbRight": ("WristRight", (-0.03, -0.06, 0.03)),
    "FootLeft": ("AnkleLeft", (0.0, -0.05, 0.12)),
    "FootRight": ("AnkleRight", (0.0, -0.05, 0.12)),
}


@dataclass(frozen=True)
class SynthConfig:
    n_sequences: int = 250
    class_balance: float = 0.5
    amplitude_gap: float = 0.5
    signal_joints: tuple[str, ...] = ("ElbowLeft", "WristRight", "KneeRight")
    noise_std: float = 0.01
    missing_rate: float = 0.0
    outlier_rate: float = 0.0
    seed: int = 0
    n_frames: int = 180
    frame_rate: float = 30.0
    amplitude: float = 0.15
    frequency: float = 0.6
    spike_size: float = 0.3
    action: str = "SitFR"
    fim_item: str = "bed_chair_wheelchair"

    def __post_init__(self):
        object.__setattr__(self, "signal_joints", tuple(self.signal_joints))
        if not 0 < self.class_balance < 1:
            raise ValueError("class_balance must lie in (0, 1)")
        if not 0 <= self.missing_rate < 1 or not 0 <= self.outlier_rate < 1:
            raise ValueError("missing_rate and outlier_rate must lie in [0, 1)")
        if not 0 <= self.amplitude_gap <= 1:
            raise ValueError("amplitude_gap must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        unknown = set(self.signal_joints) - set(JOINT_NAMES)
        if unknown:
            raise ValueError(f"unknown signal joints {sorted(unknown)}")

    def class_motion(self, label: int) -> tuple[float, float]:
        """(amplitude, frequency) of signal joints for a class."""
        if label == 1:
            return self.amplitude, self.frequency
        slowdown = 1 - FREQUENCY_GAP_SLOPE * self.amplitude_gap
        return self.amplitude * (1 - self.amplitude_gap), self.frequency * slowdown


@dataclass
class SyntheticSequence:
    label: int
    positions: np.ndarray  # [T, 25, 3] before corruption, Kinect order
    raw: RawSequence  # corrupted recording as written to disk

    def clean_positions17(self) -> np.ndarray:
        order = [KINECT25_NAMES.index(n) for n in JOINT_NAMES]
        return self.positions[:, order]


def _signal_directions() -> dict[str, np.ndarray]:
    # fixed per joint so every sequence of a class moves the same way
    rng = np.random.default_rng(20240601)
    dirs = {}
    for name in JOINT_NAMES:
        v = rng.normal(size=3)
        dirs[name] = v / np.linalg.norm(v)
    return dirs


def _class_labels(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n1 = int(math.floor(config.n_sequences * config.class_balance + 0.5))
    labels = np.array([1] * n1 + [0] * (config.n_sequences - n1))
    return rng.permutation(labels)


def _simulate(label: int, config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    pose = default_graph().reference_pose
    t = np.arange(config.n_frames) / config.frame_rate
    dirs = _signal_directions()
    base = np.empty((config.n_frames, len(JOINT_NAMES), 3))
    amp_sig, freq_sig = config.class_motion(label)
    for j, name in enumerate(JOINT_NAMES):
        phase = rng.uniform(0, 2 * np.pi)
        if name in config.signal_joints:
            amp, freq, direction = amp_sig, freq_sig, dirs[name]
        else:
            amp = rng.uniform(0.01, 0.04)
            freq = rng.uniform(0.2, 0.8)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
        base[:, j] = pose[j] + amp * np.sin(2 * np.pi * freq * t + phase)[:, None] * direction
    full = np.empty((config.n_frames, len(KINECT25_NAMES), 3))
    for k, name in enumerate(KINECT25_NAMES):
        if name in EXTREMITY_OFFSETS:
            parent, offset = EXTREMITY_OFFSETS[name]
            full[:, k] = base[:, JOINT_NAMES.index(parent)] + np.array(offset)
        else:
            full[:, k] = base[:, JOINT_NAMES.index(name)]
    return full


def _corrupt(positions: np.ndarray, config: SynthConfig, rng: np.random.Generator) -> RawSequence:
    T, J, _ = positions.shape
    noisy = positions + rng.normal(0.0, config.noise_std, size=positions.shape) if config.noise_std else positions.copy()
    if config.outlier_rate:
        spikes = rng.random((T, J)) < config.outlier_rate
        direction = rng.normal(size=(T, J, 3))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        noisy = noisy + spikes[..., None] * config.spike_size * direction
    keep = np.ones(T, dtype=bool)
    if config.missing_rate:
        keep[1:-1] = rng.random(T - 2) >= config.missing_rate
    frames = []
    for t in np.flatnonzero(keep):
        joints = {name: tuple(round(float(v), 6) for v in noisy[t, k])
                  for k, name in enumerate(KINECT25_NAMES)}
        frames.append((int(t), joints))
    return RawSequence(frames, frame_rate=config.frame_rate, skeleton="kinect25")


def generate_sequences(config: SynthConfig) -> list[SyntheticSequence]:
    root = np.random.SeedSequence(config.seed)
    label_seed, *seq_seeds = root.spawn(config.n_sequences + 1)
    labels = _class_labels(config, np.random.default_rng(label_seed))
    out = []
    for label, ss in zip(labels, seq_seeds):
        rng = np.random.default_rng(ss)
        positions = _simulate(int(label), config, rng)
        raw = _corrupt(positions, config, rng)
        out.append(SyntheticSequence(int(label), positions, raw))
    return out


def generate(config: SynthConfig, out_dir: str | Path) -> list[ManifestRow]:
    """Write one JSONL recording per sequence plus ``manifest.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, seq in enumerate(generate_sequences(config)):
        name = f"seq_{i:04d}.jsonl"
        write_sequence(out_dir / name, seq.raw)
        rows.append(ManifestRow(Path(name), f"S{i:04d}", config.action, config.fim_item,
                                SCORE_BY_CLASS[seq.label]))
    write_manifest(out_dir / "manifest.csv", rows)
    return rows


def mean_signal_speed(positions17: np.ndarray, config: SynthConfig,
                      length: int = SEGMENT_LENGTH) -> float:
    """Mean frame-to-frame speed (m/s) of the signal joints over the first ``length`` frames."""
    idx = [JOINT_NAMES.index(n) for n in config.signal_joints]
    p = np.asarray(positions17)[:length, idx]
    speed = np.linalg.norm(np.diff(p, axis=0), axis=-1) * config.frame_rate
    return float(speed.mean())


def expected_signal_speed(label: int, config: SynthConfig) -> float:
    """Phase-averaged mean speed of a sampled sinusoid: (2/pi) * 2A sin(w dt / 2) / dt."""
    amp, freq = config.class_motion(label)
    dt = 1.0 / config.frame_rate
    return (2 / np.pi) * 2 * amp * abs(np.sin(np.pi * freq * dt)) / dt


def oracle_label(positions17: np.ndarray, config: SynthConfig, length: int = SEGMENT_LENGTH) -> int:
    """Threshold the signal-joint mean speed at the midpoint of the two class expectations."""
    threshold = 0.5 * (expected_signal_speed(0, config) + expected_signal_speed(1, config))
    return int(mean_signal_speed(positions17, config, length) > threshold)
