"""Pose sequences: loading, synthesis, preprocessing, pooling and the MPJPE metric.

All coordinates are millimetres. A pose is a ``(J, 3)`` array; a sequence stores
its frames as one ``(T, J, 3)`` array. Coordinate rows used by the network are
ordered ``x1, y1, z1, x2, ...`` (row ``3 * joint + axis``).
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FRAME_RATE = 25
HORIZONS_MS = (80, 160, 320, 400, 560, 1000)
SPLITS = ("train", "val", "test")


class DataError(Exception):
    pass


class IngestionError(DataError):
    pass


class FormatError(DataError):
    pass


class ShapeError(ValueError):
    pass


class MetricError(ValueError):
    pass


@dataclass
class PoseSequence:
    frames: np.ndarray  # (T, J, 3) in mm
    fps: float
    subject_id: str
    action_label: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ShapeError(f"expected (T>=1, J, D) frames, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("non-finite coordinates in pose sequence")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames: np.ndarray, fps: float | None = None) -> "PoseSequence":
        return PoseSequence(frames, self.fps if fps is None else fps, self.subject_id, self.action_label)


@dataclass
class Dataset:
    sequences: list[PoseSequence] = field(default_factory=list)
    splits: list[str] = field(default_factory=list)
    hierarchy: "PoolingHierarchy | None" = None

    def __len__(self):
        return len(self.sequences)

    def split(self, name: str) -> list[PoseSequence]:
        return [s for s, sp in zip(self.sequences, self.splits) if sp == name]

    @property
    def subjects(self) -> list[str]:
        return sorted({s.subject_id for s in self.sequences})

    @property
    def actions(self) -> list[str]:
        return sorted({s.action_label for s in self.sequences})


# --- pooling hierarchy -------------------------------------------------------

# Joint layout of the synthetic skeleton (22 joints).
JOINT_NAMES = (
    "r_hip", "r_knee", "r_ankle", "r_toe",
    "l_hip", "l_knee", "l_ankle", "l_toe",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "l_hand",
    "r_shoulder", "r_elbow", "r_wrist", "r_hand",
    "l_thumb", "r_thumb",
)

# Limb grouping for 22 -> 12 -> 7 -> 4 joints.
DEFAULT_JOINT_GROUPS = (
    [[0], [1], [2, 3], [4], [5], [6, 7], [8, 9], [10, 11], [12, 13], [14, 15, 20], [16, 17], [18, 19, 21]],
    [[0, 1], [2], [3, 4], [5], [6, 7], [8, 9], [10, 11]],
    [[0, 1], [2, 3], [4], [5, 6]],
)


@dataclass(frozen=True)
class PoolingHierarchy:
    """Coordinate-row groupings for each descent between consecutive scales.

    ``group_maps[l][c]`` lists the rows at scale ``l`` averaged into row ``c``
    at scale ``l + 1``.
    """

    level_sizes: tuple[int, ...]
    group_maps: tuple[tuple[tuple[int, ...], ...], ...]

    def __post_init__(self):
        if len(self.group_maps) != len(self.level_sizes) - 1:
            raise ShapeError("need one group map per descent")
        for l, groups in enumerate(self.group_maps):
            if len(groups) != self.level_sizes[l + 1]:
                raise ShapeError(f"descent {l}: {len(groups)} groups for {self.level_sizes[l + 1]} coarse rows")
            covered = sorted(i for g in groups for i in g)
            if covered != list(range(self.level_sizes[l])):
                raise ShapeError(f"descent {l}: groups do not cover {self.level_sizes[l]} rows exactly once")

    @classmethod
    def from_joint_groups(cls, n_joints: int, joint_groups: Sequence[Sequence[Sequence[int]]], dim: int = 3):
        sizes = [n_joints * dim]
        maps = []
        for groups in joint_groups:
            coord_groups = []
            for g in groups:
                for axis in range(dim):
                    coord_groups.append(tuple(dim * j + axis for j in g))
            # coarse row order: group-major, axis-minor, matching the fine layout
            maps.append(tuple(coord_groups))
            sizes.append(len(groups) * dim)
        return cls(tuple(sizes), tuple(maps))

    @classmethod
    def default(cls) -> "PoolingHierarchy":
        return cls.from_joint_groups(22, DEFAULT_JOINT_GROUPS)

    def pool_matrix(self, level: int) -> np.ndarray:
        """``(K_{l+1}, K_l)`` averaging matrix."""
        groups = self.group_maps[level]
        P = np.zeros((self.level_sizes[level + 1], self.level_sizes[level]))
        for c, g in enumerate(groups):
            P[c, list(g)] = 1.0 / len(g)
        return P

    def unpool_matrix(self, level: int) -> np.ndarray:
        """``(K_l, K_{l+1})`` copy matrix: each fine row receives its group's coarse row."""
        return (self.pool_matrix(level) > 0).astype(np.float64).T

    def to_json(self) -> dict:
        return {"level_sizes": list(self.level_sizes), "group_maps": [[list(g) for g in m] for m in self.group_maps]}

    @classmethod
    def from_json(cls, obj: dict) -> "PoolingHierarchy":
        if "joint_groups" in obj:
            return cls.from_joint_groups(int(obj["n_joints"]), obj["joint_groups"], int(obj.get("dim", 3)))
        return cls(tuple(obj["level_sizes"]), tuple(tuple(tuple(g) for g in m) for m in obj["group_maps"]))


def pool_joints(features: np.ndarray, hierarchy: PoolingHierarchy, level: int) -> np.ndarray:
    """Average each group of fine rows into one coarse row. Works on ``(..., K_l, F)``."""
    if level not in range(len(hierarchy.group_maps)):
        raise ShapeError(f"level must be in [0, {len(hierarchy.group_maps)}), got {level}")
    features = np.asarray(features)
    if features.shape[-2] != hierarchy.level_sizes[level]:
        raise ShapeError(f"expected {hierarchy.level_sizes[level]} rows at level {level}, got {features.shape[-2]}")
    return hierarchy.pool_matrix(level) @ features


def unpool_joints(features: np.ndarray, hierarchy: PoolingHierarchy, level: int) -> np.ndarray:
    """Copy each coarse row at scale ``level + 1`` back to its group members."""
    features = np.asarray(features)
    if features.shape[-2] != hierarchy.level_sizes[level + 1]:
        raise ShapeError(f"expected {hierarchy.level_sizes[level + 1]} rows, got {features.shape[-2]}")
    return hierarchy.unpool_matrix(level) @ features


# --- preprocessing -----------------------------------------------------------

def replicate_pad(seq: PoseSequence, T: int) -> PoseSequence:
    if T < 0:
        raise ValueError("T must be >= 0")
    if len(seq) == 0:
        raise ValueError("cannot pad an empty sequence")
    tail = np.repeat(seq.frames[-1:], T, axis=0)
    return seq.with_frames(np.concatenate([seq.frames, tail], axis=0))


def temporal_downsample(seq: PoseSequence, factor: int) -> PoseSequence:
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    return seq.with_frames(seq.frames[::factor], fps=seq.fps / factor)


def ms_to_frames(ms: float, fps: float = FRAME_RATE) -> int:
    frames = ms * fps / 1000.0
    if abs(frames - round(frames)) > 1e-9:
        raise ValueError(f"{ms} ms is not a whole number of frames at {fps} fps")
    return int(round(frames))


def frames_to_ms(frames: int, fps: float = FRAME_RATE) -> int:
    return int(round(frames * 1000.0 / fps))


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean joint error over every frame and joint (unsquared norm)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        return 0.0
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def zero_velocity_baseline(observed: PoseSequence | np.ndarray, T: int) -> np.ndarray:
    frames = observed.frames if isinstance(observed, PoseSequence) else np.asarray(observed)
    if frames.shape[0] == 0:
        raise ValueError("observed sequence is empty")
    return np.repeat(frames[-1:], T, axis=0)


def sequence_windows(seq: PoseSequence, length: int, stride: int = 1) -> list[int]:
    """Start indices of every full window of ``length`` frames."""
    return list(range(0, len(seq) - length + 1, stride))


# --- file formats ------------------------------------------------------------

def read_pose_csv(path: Path, n_joints: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"pose file not found: {path}")
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if values.shape[1] % 3 != 0:
        raise FormatError(f"{path}: {values.shape[1]} columns is not divisible by 3")
    if n_joints is not None and values.shape[1] != 3 * n_joints:
        raise FormatError(f"{path}: expected {3 * n_joints} columns, got {values.shape[1]}")
    return values.reshape(values.shape[0], -1, 3)


def write_pose_csv(path: Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    np.savetxt(path, frames.reshape(frames.shape[0], -1), delimiter=",", fmt="%.4f")


def load_manifest(path: str | Path) -> Dataset:
    """Load a JSON manifest of CSV pose files.

    Manifest layout::

        {"n_joints": 22,
         "pooling": {...optional, see PoolingHierarchy.from_json...},
         "entries": [{"path": "seq_000.csv", "subject_id": "S1",
                      "action_label": "walk", "split": "train", "fps": 50}]}

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    entries = manifest.get("entries", [])
    hierarchy = PoolingHierarchy.from_json(manifest["pooling"]) if "pooling" in manifest else None
    if not entries:
        warnings.warn(f"manifest {path} lists no sequences")
        return Dataset(hierarchy=hierarchy)
    n_joints = manifest.get("n_joints")
    dataset = Dataset(hierarchy=hierarchy)
    for entry in entries:
        split = entry.get("split", "train")
        if split not in SPLITS:
            raise FormatError(f"{path}: unknown split {split!r}")
        frames = read_pose_csv(path.parent / entry["path"], n_joints)
        dataset.sequences.append(PoseSequence(
            frames, float(entry.get("fps", manifest.get("fps", FRAME_RATE))),
            str(entry["subject_id"]), str(entry["action_label"]),
        ))
        dataset.splits.append(split)
    if not dataset.split("train"):
        warnings.warn(f"manifest {path} has an empty train split")
    return dataset


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (seq, split) in enumerate(zip(dataset.sequences, dataset.splits)):
        name = f"seq_{i:04d}.csv"
        write_pose_csv(out_dir / name, seq.frames)
        entries.append({"path": name, "subject_id": seq.subject_id, "action_label": seq.action_label,
                        "split": split, "fps": seq.fps})
    manifest = {"n_joints": dataset.sequences[0].n_joints if dataset.sequences else None, "entries": entries}
    if dataset.hierarchy is not None:
        manifest["pooling"] = dataset.hierarchy.to_json()
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest_path


# --- synthetic motion --------------------------------------------------------

# Standing rest pose (mm), y up.
REST_POSE = np.array([
    [-100, 900, 0], [-100, 480, 20], [-100, 80, 0], [-100, 0, 120],
    [100, 900, 0], [100, 480, 20], [100, 80, 0], [100, 0, 120],
    [0, 1100, 0], [0, 1350, 0], [0, 1500, 0], [0, 1650, 20],
    [180, 1420, 0], [330, 1180, 0], [420, 950, 20], [450, 870, 40],
    [-180, 1420, 0], [-330, 1180, 0], [-420, 950, 20], [-450, 870, 40],
    [470, 900, 60], [-470, 900, 60],
], dtype=np.float64)

# Which limbs a task drives, by joint index.
_LIMBS = {
    "legs": [0, 1, 2, 3, 4, 5, 6, 7],
    "arms": [12, 13, 14, 15, 16, 17, 18, 19, 20, 21],
    "trunk": [8, 9, 10, 11],
}


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 2
    n_tasks: int = 3
    seqs_per_pair: int = 4
    length: int = 100  # frames at ``fps``
    n_joints: int = 22
    fps: float = 50.0
    amplitude_scale: float = 1.0
    amplitude_range: tuple[float, float] = (30.0, 90.0)
    noise_std: float = 1.0
    freq_bank: tuple[float, ...] = (0.35, 0.5, 0.7, 0.9, 1.1, 1.4)
    n_train: int | None = None  # default: 5/6 of all sequences


SYNTH_PRESETS = {
    "default": SynthConfig(),
    "desk": SynthConfig(seqs_per_pair=40, n_train=200),
}


def _task_profile(task: int, n_joints: int, bank: Sequence[float], rng: np.random.Generator):
    """Frequencies and per-joint activation for one task."""
    freqs = np.array([bank[task % len(bank)], bank[(task * 2 + 3) % len(bank)]])
    limb_sets = [["legs", "trunk"], ["arms"], ["arms", "legs"], ["trunk", "arms"]]
    active = np.full(n_joints, 0.15)
    for limb in limb_sets[task % len(limb_sets)]:
        idx = [j for j in _LIMBS[limb] if j < n_joints]
        active[idx] = 1.0
    # task-specific axis emphasis keeps tasks separable within a short window
    axis_gain = rng.uniform(0.3, 1.0, size=3)
    return freqs, active, axis_gain


def synth_motion(config: SynthConfig = SynthConfig(), seed: int = 0) -> Dataset:
    """Sinusoidal motion: task fixes the frequencies, subject fixes amplitude and phase."""
    c = config
    if min(c.n_subjects, c.n_tasks, c.seqs_per_pair, c.length, c.n_joints) < 1:
        raise ValueError("all synth counts must be >= 1")
    rng = np.random.default_rng(seed)
    rest = REST_POSE[: c.n_joints] if c.n_joints <= len(REST_POSE) else np.vstack(
        [REST_POSE, rng.uniform(-500, 1500, size=(c.n_joints - len(REST_POSE), 3))])
    tasks = [_task_profile(t, c.n_joints, c.freq_bank, rng) for t in range(c.n_tasks)]
    n_freq = 2
    subjects = []
    for _ in range(c.n_subjects):
        amp = rng.uniform(*c.amplitude_range, size=(c.n_joints, 3, n_freq))
        phase = rng.uniform(0, 2 * np.pi, size=(c.n_joints, 3, n_freq))
        scale = rng.uniform(0.9, 1.1)
        subjects.append((amp, phase, scale))

    t = np.arange(c.length) / c.fps
    sequences = []
    for s, (amp, phase, body_scale) in enumerate(subjects):
        for k, (freqs, active, axis_gain) in enumerate(tasks):
            for _ in range(c.seqs_per_pair):
                offset = rng.uniform(0, 10.0)
                arg = 2 * np.pi * freqs[None, None, None, :] * (t[:, None, None, None] + offset) + phase[None]
                motion = (amp[None] * np.sin(arg)).sum(-1)
                motion *= active[None, :, None] * axis_gain[None, None, :]
                noise = rng.normal(0.0, c.noise_std, size=motion.shape)
                frames = rest[None] * body_scale + c.amplitude_scale * (motion + noise)
                sequences.append(PoseSequence(frames, c.fps, f"S{s + 1}", f"task{k}"))

    n = len(sequences)
    n_train = c.n_train if c.n_train is not None else int(round(n * 5 / 6))
    n_train = min(n_train, n)
    order = rng.permutation(n)
    splits = ["test"] * n
    for i in order[:n_train]:
        splits[i] = "train"
    hierarchy = PoolingHierarchy.default() if c.n_joints == 22 else None
    return Dataset(sequences, splits, hierarchy)


def horizon_frames(ms: Sequence[int] = HORIZONS_MS, fps: float = FRAME_RATE) -> list[int]:
    return [ms_to_frames(m, fps) for m in ms]
