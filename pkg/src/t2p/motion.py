"""Scenes, skeletons and the split of global motion into hip trajectory plus local pose."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

PART_NAMES = ("torso", "left_arm", "right_arm", "left_leg", "right_leg")


class ShapeError(ValueError):
    """Array extents disagree with what an operation expects."""


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    hip_index: int
    parts: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        flat = sorted(j for part in self.parts for j in part)
        if len(self.parts) != 5:
            raise ValueError(f"expected 5 body parts, got {len(self.parts)}")
        if flat != list(range(self.joint_count)):
            raise ValueError("body-part partition must cover every joint exactly once")
        if self.hip_index not in self.parts[0]:
            raise ValueError("hip joint must belong to the torso part")

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    @classmethod
    def default(cls) -> "Skeleton":
        names = (
            "hip", "spine", "head",
            "l_shoulder", "l_elbow", "l_wrist",
            "r_shoulder", "r_elbow", "r_wrist",
            "l_hip", "l_knee", "l_ankle",
            "r_hip", "r_knee", "r_ankle",
        )
        parts = ((0, 1, 2), (3, 4, 5), (6, 7, 8), (9, 10, 11), (12, 13, 14))
        return cls(names, 0, parts)

    def to_json(self) -> dict:
        return {"joint_names": list(self.joint_names), "hip_index": self.hip_index,
                "parts": [list(p) for p in self.parts]}

    @classmethod
    def from_json(cls, obj: dict) -> "Skeleton":
        return cls(tuple(obj["joint_names"]), int(obj["hip_index"]),
                   tuple(tuple(int(j) for j in p) for p in obj["parts"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Skeleton":
        return cls.from_json(json.loads(Path(path).read_text()))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GlobalPoseSequence:
    """World-frame joint positions, shape ``(N_A, T, J, 3)`` in meters."""

    positions: np.ndarray
    agent_ids: tuple[str, ...]
    frame_rate: float = 10.0
    scene_id: str = ""

    def __post_init__(self):
        pos = _frozen(self.positions)
        if pos.ndim != 4 or pos.shape[-1] != 3:
            raise ShapeError(f"positions must be (agents, frames, joints, 3), got {pos.shape}")
        if pos.shape[0] < 1 or pos.shape[1] < 1:
            raise ShapeError("need at least one agent and one frame")
        if not np.isfinite(pos).all():
            raise ValueError("positions must be finite")
        ids = tuple(str(a) for a in self.agent_ids)
        if len(ids) != pos.shape[0]:
            raise ShapeError(f"{len(ids)} agent ids for {pos.shape[0]} agents")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "agent_ids", ids)

    @property
    def num_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def num_frames(self) -> int:
        return self.positions.shape[1]

    @property
    def num_joints(self) -> int:
        return self.positions.shape[2]

    def frames(self, start: int, stop: int) -> "GlobalPoseSequence":
        return GlobalPoseSequence(self.positions[:, start:stop], self.agent_ids, self.frame_rate, self.scene_id)


@dataclass(frozen=True)
class TrajectorySequence:
    hip_positions: np.ndarray  # (N_A, T, 3)

    def __post_init__(self):
        object.__setattr__(self, "hip_positions", _frozen(self.hip_positions))


@dataclass(frozen=True)
class LocalPoseSequence:
    """Hip-relative joint offsets ``(N_A, T, J, 3)``.

    ``residual`` holds the rounding error of ``offsets`` (at most one ulp) so
    that :func:`recompose` restores the source positions bit-exactly.
    """

    offsets: np.ndarray
    residual: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "offsets", _frozen(self.offsets))
        if self.residual is not None:
            object.__setattr__(self, "residual", _frozen(self.residual))


def _two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@dataclass(frozen=True)
class ScenarioConfig:
    past_steps: int = 10
    future_steps: int = 20
    modes: int = 6
    interaction_radius: float | None = None  # None = unbounded

    def __post_init__(self):
        if self.past_steps < 2:
            raise ValueError("past_steps must be >= 2")
        if self.future_steps < 1:
            raise ValueError("future_steps must be >= 1")
        if self.modes < 1:
            raise ValueError("modes must be >= 1")


def decompose(scene: GlobalPoseSequence, skel: Skeleton) -> tuple[TrajectorySequence, LocalPoseSequence]:
    if scene.num_joints != skel.joint_count:
        raise ShapeError(f"scene joint axis has {scene.num_joints} entries, skeleton has {skel.joint_count} joints")
    pos = scene.positions
    hip = pos[:, :, skel.hip_index]
    offsets, residual = _two_sum(pos, -hip[:, :, None, :])
    offsets[:, :, skel.hip_index] = 0.0
    residual[:, :, skel.hip_index] = 0.0
    return TrajectorySequence(hip), LocalPoseSequence(offsets, residual)


def recompose(traj: TrajectorySequence, local: LocalPoseSequence, agent_ids: Iterable[str] | None = None,
              frame_rate: float = 10.0, scene_id: str = "") -> GlobalPoseSequence:
    hip, off = traj.hip_positions, local.offsets
    if hip.shape[:2] != off.shape[:2]:
        raise ShapeError(f"trajectory (agents, frames) {hip.shape[:2]} != local pose {off.shape[:2]}")
    ids = tuple(agent_ids) if agent_ids is not None else tuple(str(i) for i in range(hip.shape[0]))
    if local.residual is None:
        pos = hip[:, :, None, :] + off
    else:
        s, err = _two_sum(np.broadcast_to(hip[:, :, None, :], off.shape), off)
        pos = s + (err + local.residual)
    return GlobalPoseSequence(pos, ids, frame_rate, scene_id)


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_z(points: np.ndarray, yaw) -> np.ndarray:
    """Rotate ``(..., 3)`` points about the z axis by ``yaw`` (broadcasts over leading axes)."""
    c, s = np.cos(yaw), np.sin(yaw)
    x, y = points[..., 0], points[..., 1]
    rx, ry = c * x - s * y, s * x + c * y
    return np.stack([rx, ry, np.broadcast_to(points[..., 2], rx.shape)], axis=-1)


def apply_se2_points(points: np.ndarray, yaw: float, shift=(0.0, 0.0)) -> np.ndarray:
    out = rotate_z(np.asarray(points, dtype=np.float64), yaw)
    out[..., 0] += shift[0]
    out[..., 1] += shift[1]
    return out


def apply_se2(scene: GlobalPoseSequence, yaw: float, shift=(0.0, 0.0)) -> GlobalPoseSequence:
    """Rotate the scene about world z by ``yaw``, then translate by ``shift`` in xy."""
    return GlobalPoseSequence(apply_se2_points(scene.positions, yaw, shift), scene.agent_ids,
                              scene.frame_rate, scene.scene_id)


# ----------------------------------------------------------------------------
# scene files: one JSON object per line


def scene_to_json(scene: GlobalPoseSequence) -> dict:
    return {
        "scene_id": scene.scene_id,
        "frame_rate": scene.frame_rate,
        "agents": [{"id": aid, "joints": scene.positions[n].tolist()} for n, aid in enumerate(scene.agent_ids)],
    }


def scene_from_json(obj: dict) -> GlobalPoseSequence:
    agents = obj["agents"]
    if not agents:
        raise ShapeError("scene has no agents")
    pos = np.array([a["joints"] for a in agents], dtype=np.float64)
    return GlobalPoseSequence(pos, tuple(str(a["id"]) for a in agents), float(obj.get("frame_rate", 10.0)),
                              str(obj.get("scene_id", "")))


def write_scenes(path: str | Path, scenes: Iterable[GlobalPoseSequence]) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_json(s)) + "\n")


class SceneFileError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


def iter_scenes(path: str | Path) -> Iterator[GlobalPoseSequence]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield scene_from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise SceneFileError(path, lineno, str(exc)) from exc


def read_scenes(path: str | Path) -> list[GlobalPoseSequence]:
    return list(iter_scenes(path))
