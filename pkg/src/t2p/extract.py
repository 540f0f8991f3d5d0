"""Build world-frame pose sequences from per-camera 3D pose detections.

Stages per (timestamp, camera): match detections to 2D annotations (filter),
pull each joint onto its annotation line (refine), move the hip onto the box
center (center), rotate into the robot frame (rotate), then register tracks by
agent id and cut fixed-length windows.

Frames: detections live in the camera optical frame (x right, y down, z
depth). The camera's level frame has x forward, y left, z up; the robot
(world) frame is the level frame rotated about z by the camera yaw and
lifted by the camera height. Box centers are given in the world frame.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .motion import GlobalPoseSequence, Skeleton, rotate_z

log = logging.getLogger(__name__)

INPUT_FILES = {"detections": "detections.jsonl", "annotations": "annotations.jsonl",
               "boxes": "boxes.jsonl", "cameras": "cameras.jsonl"}


class ExtractionInputError(ValueError):
    def __init__(self, path, lineno: int | None, reason: str):
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{where}: {reason}")
        self.lineno = lineno


@dataclass(frozen=True)
class CameraModel:
    K: np.ndarray
    yaw: float
    index: int = 0
    height: float = 0.0  # optical center above the world ground plane

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValueError(f"intrinsics must be 3x3, got {K.shape}")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("intrinsics matrix is singular")
        object.__setattr__(self, "K", K)

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pinhole projection of optical-frame points ``(..., 3)`` to pixels ``(..., 2)``."""
        uvw = points @ self.K.T
        return uvw[..., :2] / uvw[..., 2:3]


@dataclass
class Detection:
    t: int
    cam: int
    joints_3d: np.ndarray  # (J, 3) optical frame, meters
    joints_2d: np.ndarray  # (J, 2) pixels


@dataclass
class Annotation:
    t: int
    cam: int
    agent_id: str
    joints_2d: np.ndarray  # (J, 2)


@dataclass
class Box:
    t: int
    agent_id: str
    cx: float
    cy: float


@dataclass
class ExtractionScene:
    cameras: dict[int, CameraModel]
    detections: list[Detection]
    annotations: list[Annotation]
    boxes: list[Box]


@dataclass(frozen=True)
class ExtractionConfig:
    tau: float = 20.0
    max_range: float = 4.5
    min_agents: int = 3
    stride_frames: int = 15
    window_frames: int = 30
    frame_rate: float = 10.0
    camera_count: int | None = None  # None = whatever the camera file lists

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError("tau must be >= 0")
        if self.stride_frames < 1 or self.window_frames < 1:
            raise ValueError("stride_frames and window_frames must be >= 1")


@dataclass
class StageReport:
    detections: int = 0
    rejected: int = 0  # no annotation closer than tau
    accepted: int = 0
    degenerate_joints: int = 0
    unboxed: int = 0  # accepted but no box for the agent at that time
    duplicates: int = 0  # agent already registered at that time by an earlier camera
    registered: int = 0
    agents: int = 0
    range_exclusions: int = 0  # (window, agent) pairs dropped for leaving max_range
    windows_considered: int = 0
    windows_emitted: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


# ----------------------------------------------------------------------------
# operators


def mean_pixel_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1).mean())


def match_filter(detections: Sequence[np.ndarray], annotations: Sequence[np.ndarray], tau: float) -> list[int | None]:
    """Greedy one-to-one matching of detection 2D poses to annotation 2D poses.

    Pairs are taken in ascending mean per-joint distance; a pair is accepted
    only when that distance is strictly below ``tau``. Returns, per detection,
    the matched annotation index or None.
    """
    out: list[int | None] = [None] * len(detections)
    if not detections or not annotations:
        return out
    dist = np.array([[mean_pixel_distance(d, a) for a in annotations] for d in detections])
    order = np.argsort(dist, axis=None, kind="stable")
    used_d, used_a = set(), set()
    for flat in order:
        i, j = divmod(int(flat), len(annotations))
        if dist[i, j] >= tau:
            break
        if i in used_d or j in used_a:
            continue
        out[i] = j
        used_d.add(i)
        used_a.add(j)
    return out


def align_mean_x(annotation_2d: np.ndarray, detection_2d: np.ndarray) -> np.ndarray:
    """Shift the annotation horizontally so its mean x equals the detection's."""
    out = np.array(annotation_2d, dtype=np.float64)
    out[:, 0] += np.mean(detection_2d[:, 0]) - np.mean(out[:, 0])
    return out


def refine_joint(point: np.ndarray, pixel: np.ndarray, K_inv: np.ndarray) -> tuple[np.ndarray, bool]:
    """Closest point to ``point`` on the line through ``(0, 0, z)`` and ``z * K^-1 (X, Y, 1)``.

    Returns ``(refined, degenerate)``; a degenerate line leaves the point unchanged.
    """
    p = np.asarray(point, dtype=np.float64)
    z = p[2]
    a = np.array([0.0, 0.0, z])
    b = z * (K_inv @ np.array([pixel[0], pixel[1], 1.0]))
    d = b - a
    dd = float(d @ d)
    if dd == 0.0:
        return p.copy(), True
    return a + ((p - a) @ d / dd) * d, False


def refine_pose(joints_3d: np.ndarray, annotation_2d: np.ndarray, K, detection_2d: np.ndarray | None = None):
    """Refine every joint against the annotation; returns ``(joints, degenerate_count)``.

    With ``detection_2d`` the annotation is first mean-x aligned to it.
    """
    K_inv = np.linalg.inv(np.asarray(K, dtype=np.float64))
    ann = align_mean_x(annotation_2d, detection_2d) if detection_2d is not None else np.asarray(annotation_2d)
    out = np.empty_like(np.asarray(joints_3d, dtype=np.float64))
    bad = 0
    for j, (p, px) in enumerate(zip(joints_3d, ann)):
        out[j], degenerate = refine_joint(p, px, K_inv)
        bad += degenerate
    if bad:
        log.warning("refine_pose: %d degenerate joint line(s) left unchanged", bad)
    return out, bad


def optical_to_level(points: np.ndarray, height: float = 0.0) -> np.ndarray:
    """Optical (x right, y down, z depth) → level (x forward, y left, z up) plus camera height."""
    p = np.asarray(points, dtype=np.float64)
    return np.stack([p[..., 2], -p[..., 0], -p[..., 1] + height], axis=-1)


def level_to_optical(points: np.ndarray, height: float = 0.0) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return np.stack([-p[..., 1], -(p[..., 2] - height), p[..., 0]], axis=-1)


def center(pose: np.ndarray, box_xy, hip_index: int = 0) -> np.ndarray:
    """Translate the pose in xy so the hip sits at ``box_xy``; z is untouched."""
    pose = np.asarray(pose, dtype=np.float64)
    shift = np.zeros(3)
    shift[:2] = np.asarray(box_xy, dtype=np.float64) - pose[hip_index, :2]
    return pose + shift


def rotate_to_world(pose: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Rotate level-frame joints about z by the camera yaw."""
    return rotate_z(np.asarray(pose, dtype=np.float64), cam.yaw)


def box_in_level_frame(box: Box, cam: CameraModel) -> np.ndarray:
    return rotate_z(np.array([box.cx, box.cy, 0.0]), -cam.yaw)[:2]


# ----------------------------------------------------------------------------
# pipeline


def process_frame(dets: Sequence[Detection], anns: Sequence[Annotation], boxes: dict[str, Box], cam: CameraModel,
                  cfg: ExtractionConfig, hip_index: int, report: StageReport) -> list[tuple[str, np.ndarray]]:
    """Filter, refine, center and rotate the detections of one (timestamp, camera)."""
    report.detections += len(dets)
    matches = match_filter([d.joints_2d for d in dets], [a.joints_2d for a in anns], cfg.tau)
    out = []
    for det, m in zip(dets, matches):
        if m is None:
            report.rejected += 1
            continue
        report.accepted += 1
        ann = anns[m]
        joints, bad = refine_pose(det.joints_3d, ann.joints_2d, cam.K, det.joints_2d)
        report.degenerate_joints += bad
        box = boxes.get(ann.agent_id)
        if box is None:
            report.unboxed += 1
            continue
        level = optical_to_level(joints, cam.height)
        level = center(level, box_in_level_frame(box, cam), hip_index)
        out.append((ann.agent_id, rotate_to_world(level, cam)))
    return out


def register(tracks: dict[str, dict[int, np.ndarray]], cfg: ExtractionConfig, report: StageReport | None = None,
             scene_prefix: str = "gmp") -> list[GlobalPoseSequence]:
    """Cut fixed-length windows from registered tracks ``{agent_id: {t: (J, 3)}}``.

    An agent enters a window when it is present and within ``max_range`` (xy
    distance of the hip from the robot) on every frame of it; windows with fewer
    than ``min_agents`` such agents are dropped.
    """
    report = report if report is not None else StageReport()
    if not tracks:
        return []
    times = [t for tr in tracks.values() for t in tr]
    t0, t1 = min(times), max(times)
    span = cfg.window_frames
    out = []
    for start in range(t0, t1 - span + 2, cfg.stride_frames):
        frames = range(start, start + span)
        report.windows_considered += 1
        members = []
        for aid in sorted(tracks):
            tr = tracks[aid]
            if not all(t in tr for t in frames):
                continue
            seq = np.stack([tr[t] for t in frames])
            if np.any(np.linalg.norm(seq[:, 0, :2], axis=-1) > cfg.max_range):
                report.range_exclusions += 1
                continue
            members.append((aid, seq))
        if len(members) < cfg.min_agents:
            continue
        report.windows_emitted += 1
        out.append(GlobalPoseSequence(np.stack([s for _, s in members]), tuple(a for a, _ in members),
                                      cfg.frame_rate, f"{scene_prefix}-{start}"))
    return out


def extract(scene: ExtractionScene, cfg: ExtractionConfig, skel: Skeleton | None = None,
            scene_prefix: str = "gmp") -> tuple[list[GlobalPoseSequence], StageReport]:
    skel = skel or Skeleton.default()
    if cfg.camera_count is not None and len(scene.cameras) != cfg.camera_count:
        raise ValueError(f"expected {cfg.camera_count} cameras, found {len(scene.cameras)}")
    report = StageReport()
    dets, anns = defaultdict(list), defaultdict(list)
    for d in scene.detections:
        dets[(d.t, d.cam)].append(d)
    for a in scene.annotations:
        anns[(a.t, a.cam)].append(a)
    boxes = defaultdict(dict)
    for b in scene.boxes:
        boxes[b.t][b.agent_id] = b
    for key in dets:
        if key[1] not in scene.cameras:
            raise ValueError(f"detection references unknown camera {key[1]}")
    tracks: dict[str, dict[int, np.ndarray]] = defaultdict(dict)
    # timestamps ascending, cameras in index order: the first registration wins
    for t, cam in sorted(dets):
        for aid, pose in process_frame(dets[(t, cam)], anns.get((t, cam), []), boxes.get(t, {}),
                                       scene.cameras[cam], cfg, skel.hip_index, report):
            if t in tracks[aid]:
                report.duplicates += 1
                continue
            tracks[aid][t] = pose
            report.registered += 1
    report.agents = len(tracks)
    return register(dict(tracks), cfg, report, scene_prefix), report


# ----------------------------------------------------------------------------
# files


def _read_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExtractionInputError(path, lineno, f"malformed JSON: {exc.msg}") from exc


def _parse(path: Path, build) -> list:
    out = []
    for lineno, obj in _read_jsonl(path):
        try:
            out.append(build(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise ExtractionInputError(path, lineno, f"bad record: {exc!r}") from exc
    return out


def load_inputs(directory: str | Path) -> ExtractionScene:
    root = Path(directory)
    paths = {k: root / v for k, v in INPUT_FILES.items()}
    if not paths["cameras"].exists():
        raise ExtractionInputError(paths["cameras"], None, "camera file missing")
    for k, p in paths.items():
        if not p.exists():
            raise ExtractionInputError(p, None, f"{k} file missing")

    def camera(o):
        return CameraModel(np.array(o["K"], dtype=np.float64).reshape(3, 3), float(o["yaw"]), int(o["cam"]),
                           float(o.get("height", 0.0)))

    def detection(o):
        j3, j2 = np.array(o["joints_3d"], dtype=np.float64), np.array(o["joints_2d"], dtype=np.float64)
        if j3.ndim != 2 or j3.shape[1] != 3 or j2.shape != (j3.shape[0], 2):
            raise ValueError("joints_3d must be (J, 3) and joints_2d (J, 2)")
        return Detection(int(o["t"]), int(o["cam"]), j3, j2)

    def annotation(o):
        j2 = np.array(o["joints_2d"], dtype=np.float64)
        if j2.ndim != 2 or j2.shape[1] != 2:
            raise ValueError("joints_2d must be (J, 2)")
        return Annotation(int(o["t"]), int(o["cam"]), str(o["agent_id"]), j2)

    cams = _parse(paths["cameras"], camera)
    return ExtractionScene(
        {c.index: c for c in cams},
        _parse(paths["detections"], detection),
        _parse(paths["annotations"], annotation),
        _parse(paths["boxes"], lambda o: Box(int(o["t"]), str(o["agent_id"]), float(o["cx"]), float(o["cy"]))),
    )


def save_inputs(directory: str | Path, scene: ExtractionScene) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)

    def dump(name, rows):
        with open(root / INPUT_FILES[name], "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")

    dump("cameras", [{"cam": c.index, "K": c.K.ravel().tolist(), "yaw": c.yaw, "height": c.height}
                     for c in scene.cameras.values()])
    dump("detections", [{"t": d.t, "cam": d.cam, "joints_3d": d.joints_3d.tolist(), "joints_2d": d.joints_2d.tolist()}
                        for d in scene.detections])
    dump("annotations", [{"t": a.t, "cam": a.cam, "agent_id": a.agent_id, "joints_2d": a.joints_2d.tolist()}
                         for a in scene.annotations])
    dump("boxes", [{"t": b.t, "agent_id": b.agent_id, "cx": b.cx, "cy": b.cy} for b in scene.boxes])


# ----------------------------------------------------------------------------
# synthetic capture


def ring_cameras(count: int = 5, focal: float = 500.0, size: tuple[int, int] = (752, 480),
                 height: float = 0.7) -> dict[int, CameraModel]:
    """Evenly spaced outward-facing pinhole cameras around the robot."""
    K = np.array([[focal, 0.0, size[0] / 2], [0.0, focal, size[1] / 2], [0.0, 0.0, 1.0]])
    return {i: CameraModel(K, 2 * np.pi * i / count, i, height) for i in range(count)}


def capture(scenes_world: dict[str, np.ndarray], cameras: dict[int, CameraModel], rng: np.random.Generator,
            noise: float = 0.03, offset_share: float = 0.8, hip_index: int = 0) -> ExtractionScene:
    """Render world tracks ``{agent_id: (T, J, 3)}`` into noisy detections and exact annotations.

    Each agent is seen by the camera whose axis is closest to its bearing.
    Detection noise is a per-detection rigid offset (the translation and depth
    ambiguity of monocular lifting) plus per-joint jitter, scaled so the mean
    joint displacement is about ``noise`` meters; ``offset_share`` is the
    offset's fraction of the noise variance.
    """
    # E|x| = s * sqrt(8 / pi) for an isotropic Gaussian with per-axis std s
    s = noise / np.sqrt(8.0 / np.pi)
    s_off, s_jit = s * np.sqrt(offset_share), s * np.sqrt(1.0 - offset_share)
    dets, anns, boxes = [], [], []
    yaws = np.array([c.yaw for c in cameras.values()])
    cam_ids = list(cameras)
    for aid, track in scenes_world.items():
        for t, pose in enumerate(track):
            hip = pose[hip_index]
            boxes.append(Box(t, aid, float(hip[0]), float(hip[1])))
            bearing = np.arctan2(hip[1], hip[0])
            cam = cameras[cam_ids[int(np.argmin(np.abs(np.angle(np.exp(1j * (bearing - yaws))))))]]
            optical = level_to_optical(rotate_z(pose, -cam.yaw), cam.height)
            noisy = optical + rng.normal(0, s_off, 3) + rng.normal(0, s_jit, optical.shape)
            dets.append(Detection(t, cam.index, noisy, cam.project(noisy)))
            anns.append(Annotation(t, cam.index, aid, cam.project(optical)))
    return ExtractionScene(dict(cameras), dets, anns, boxes)
