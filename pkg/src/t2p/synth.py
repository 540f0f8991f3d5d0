"""Seeded synthetic multi-agent scenes: social point walkers dressed with a parametric gait."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .motion import GlobalPoseSequence, Skeleton

STYLES = ("straight", "turn", "bimodal-fork", "stationary-gesture")
HIP_HEIGHT = 0.95
STRIDE = 1.3  # meters per full gait cycle
REPULSION_RANGE = 1.0
RELAX_TIME = 0.5  # seconds to reach the desired velocity


@dataclass(frozen=True)
class SynthSpec:
    agent_count: int = 3
    frames: int = 30
    frame_rate: float = 10.0
    style: str = "straight"
    avoidance: float = 1.0
    seed: int = 0
    fork_frame: int = 10  # bimodal: first frame whose motion depends on the label
    fork_angle: float = np.pi / 3
    speed: tuple[float, float] = (1.0, 1.4)

    def __post_init__(self):
        if self.agent_count < 1:
            raise ValueError("agent_count must be >= 1")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}; expected one of {STYLES}")
        if self.style == "bimodal-fork" and not 0 < self.fork_frame < self.frames:
            raise ValueError("fork_frame must fall inside the scene")


def _unit(angle: np.ndarray) -> np.ndarray:
    return np.stack([np.cos(angle), np.sin(angle)], axis=-1)


def simulate(start: np.ndarray, velocity: np.ndarray, desired: np.ndarray, speed: np.ndarray,
             frame_rate: float, avoidance: float) -> np.ndarray:
    """Social point model; returns xy positions ``(N, T, 2)``.

    ``desired`` ``(N, T)`` is each agent's desired heading per frame. Agents relax
    towards ``speed`` along it and repel each other inside ``REPULSION_RANGE``.
    """
    n, frames = desired.shape
    dt = 1.0 / frame_rate
    pos = np.empty((n, frames, 2))
    p, v = start.astype(np.float64).copy(), velocity.astype(np.float64).copy()
    pos[:, 0] = p
    for t in range(1, frames):
        acc = (speed[:, None] * _unit(desired[:, t - 1]) - v) / RELAX_TIME
        if n > 1 and avoidance > 0:
            diff = p[:, None, :] - p[None, :, :]
            dist = np.linalg.norm(diff, axis=-1)
            np.fill_diagonal(dist, np.inf)
            push = np.clip(1.0 - dist / REPULSION_RANGE, 0.0, None) * 6.0 * avoidance
            away = diff / np.maximum(dist, 1e-9)[..., None]
            # a sideways share so head-on pairs pass each other instead of stalling
            side = np.stack([away[..., 1], -away[..., 0]], axis=-1)
            acc = acc + (push[..., None] * (away + side)).sum(axis=1)
        v = v + acc * dt
        p = p + v * dt
        pos[:, t] = p
    return pos


# ----------------------------------------------------------------------------
# gait


def _limb(root: np.ndarray, length: float, pitch: np.ndarray) -> np.ndarray:
    """Point ``length`` below ``root`` swung forward by ``pitch`` (body frame, x forward, z up)."""
    return root + length * np.stack([np.sin(pitch), np.zeros_like(pitch), -np.cos(pitch)], axis=-1)


def body_pose(phase: np.ndarray, amplitude: np.ndarray, arm_left: np.ndarray, arm_right: np.ndarray,
              head_nod: np.ndarray) -> np.ndarray:
    """Hip-relative joints in the body frame for per-frame gait parameters; ``(T, 15, 3)``."""
    t = phase.shape[0]

    def fixed(x, y, z):
        return np.broadcast_to(np.array([x, y, z]), (t, 3))

    hip = fixed(0.0, 0.0, 0.0)
    spine = fixed(0.0, 0.0, 0.25)
    head = spine + 0.35 * np.stack([np.sin(head_nod), np.zeros(t), np.cos(head_nod)], axis=-1)
    swing = amplitude * np.sin(phase)
    joints = [hip, spine, head]
    for side, arm in ((1.0, arm_left), (-1.0, arm_right)):
        shoulder = fixed(0.0, 0.2 * side, 0.45)
        elbow = _limb(shoulder, 0.28, arm)
        wrist = _limb(elbow, 0.25, arm + 0.25 + 0.3 * np.abs(arm))
        joints += [shoulder, elbow, wrist]
    for side, sign in ((1.0, 1.0), (-1.0, -1.0)):
        root = fixed(0.0, 0.1 * side, -0.05)
        thigh = sign * swing
        knee = _limb(root, 0.45, thigh)
        bend = 0.5 * amplitude * np.clip(np.sin(phase * sign + np.pi / 2), 0.0, None)
        ankle = _limb(knee, 0.45, thigh - bend)
        joints += [root, knee, ankle]
    return np.stack(joints, axis=1)


def _headings(xy: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Body heading per frame from the velocity; holds the last heading while (nearly) still."""
    vel = np.gradient(xy, axis=1) if xy.shape[1] > 1 else np.zeros_like(xy)
    out = np.empty(xy.shape[:2])
    for i in range(xy.shape[0]):
        h = fallback[i]
        for t in range(xy.shape[1]):
            if np.hypot(*vel[i, t]) > 1e-3:
                h = np.arctan2(vel[i, t, 1], vel[i, t, 0])
            out[i, t] = h
    return out


def dress(xy: np.ndarray, facing: np.ndarray, frame_rate: float, rng: np.random.Generator,
          gesture: np.ndarray) -> np.ndarray:
    """Attach a gait (or gesture, for still agents) to hip paths ``(N, T, 2)`` → ``(N, T, 15, 3)``."""
    n, frames = xy.shape[:2]
    dt = 1.0 / frame_rate
    speed = np.linalg.norm(np.gradient(xy, axis=1), axis=-1) / dt if frames > 1 else np.zeros((n, frames))
    heading = _headings(xy, facing)
    tt = np.arange(frames) * dt
    out = np.empty((n, frames, 15, 3))
    for i in range(n):
        phase = rng.uniform(0, 2 * np.pi) + np.cumsum(2 * np.pi * speed[i] * dt / STRIDE)
        amp = 0.35 * np.clip(speed[i] / 1.2, 0.0, 1.3)
        swing = amp * np.sin(phase)
        arm_l, arm_r = -0.6 * swing, 0.6 * swing
        nod = np.full(frames, 0.05)
        if gesture[i]:
            f = rng.uniform(0.3, 1.2, size=3)
            ph = rng.uniform(0, 2 * np.pi, size=3)
            arm_l = arm_l + 0.8 * (1 + np.sin(2 * np.pi * f[0] * tt + ph[0])) * rng.uniform(0.3, 1.0)
            arm_r = arm_r + 0.6 * (1 + np.sin(2 * np.pi * f[1] * tt + ph[1])) * rng.uniform(0.0, 1.0)
            nod = nod + 0.15 * np.sin(2 * np.pi * f[2] * tt + ph[2])
        local = body_pose(phase, amp, arm_l, arm_r, nod)
        c, s = np.cos(heading[i]), np.sin(heading[i])
        world = np.empty_like(local)
        world[..., 0] = c[:, None] * local[..., 0] - s[:, None] * local[..., 1]
        world[..., 1] = s[:, None] * local[..., 0] + c[:, None] * local[..., 1]
        world[..., 2] = local[..., 2]
        bob = 0.02 * np.cos(2 * phase)
        hip = np.concatenate([xy[i], (HIP_HEIGHT + bob)[:, None]], axis=-1)
        out[i] = world + hip[:, None, :]
    return out


# ----------------------------------------------------------------------------
# scenes


def _scatter(rng: np.random.Generator, n: int, extent: float, min_gap: float = 1.2) -> np.ndarray:
    """Start points at least ``min_gap`` apart (best effort)."""
    pts = []
    for _ in range(n):
        for _ in range(100):
            cand = rng.uniform(-extent, extent, size=2)
            if all(np.linalg.norm(cand - q) >= min_gap for q in pts):
                break
        pts.append(cand)
    return np.array(pts)


def _desired_headings(spec: SynthSpec, rng: np.random.Generator, base: np.ndarray, label: str | None) -> np.ndarray:
    n, frames = spec.agent_count, spec.frames
    t = np.arange(frames) / spec.frame_rate
    desired = np.repeat(base[:, None], frames, axis=1)
    if spec.style == "turn":
        rate = rng.uniform(0.3, 0.8, size=n) * rng.choice([-1.0, 1.0], size=n)
        onset = rng.uniform(0.0, t[-1], size=n)
        desired = desired + rate[:, None] * np.clip(t[None] - onset[:, None], 0.0, None)
    elif spec.style == "bimodal-fork":
        sign = 1.0 if label == "left" else -1.0
        since = np.clip(t - (spec.fork_frame - 1) / spec.frame_rate, 0.0, None)
        # ramp to the fork angle over half a second
        desired = desired + sign * np.minimum(spec.fork_angle, 2.0 * spec.fork_angle * since)[None]
    return desired


def generate(spec: SynthSpec, label: str | None = None) -> tuple[GlobalPoseSequence, str | None]:
    """One scene and, for bimodal forks, its intent label ("left" / "right")."""
    rng = np.random.default_rng(spec.seed)
    n = spec.agent_count
    speed = rng.uniform(*spec.speed, size=n)
    gesture = np.zeros(n, dtype=bool)
    if spec.style == "bimodal-fork":
        # a group walking abreast that turns together after the observed window
        yaw = rng.uniform(-np.pi, np.pi)
        lateral = (np.arange(n) - (n - 1) / 2) * 1.6 + rng.normal(0, 0.1, size=n)
        along = rng.normal(0, 0.2, size=n)
        start = rng.uniform(-2, 2, size=2) + np.outer(along, _unit(yaw)) + np.outer(lateral, _unit(yaw + np.pi / 2))
        base = np.full(n, yaw)
        speed = np.full(n, rng.uniform(*spec.speed))
        # drawn before anything label-dependent so both branches share the past
        dress_seed = rng.integers(2**63)
        if label is None:
            label = "left" if rng.random() < 0.5 else "right"
        if label not in ("left", "right"):
            raise ValueError(f"fork label must be 'left' or 'right', got {label!r}")
    else:
        if label is not None:
            raise ValueError("labels only apply to bimodal-fork scenes")
        start = _scatter(rng, n, 1.0 + n)
        base = rng.uniform(-np.pi, np.pi, size=n)
        dress_seed = rng.integers(2**63)
    desired = _desired_headings(spec, rng, base, label)
    if spec.style == "stationary-gesture":
        xy = np.repeat(start[:, None], spec.frames, axis=1)
        gesture[:] = True
    else:
        xy = simulate(start, speed[:, None] * _unit(base), desired, speed, spec.frame_rate, spec.avoidance)
    positions = dress(xy, base, spec.frame_rate, np.random.default_rng(dress_seed), gesture)
    ids = tuple(f"a{i}" for i in range(n))
    scene_id = f"{spec.style}-{spec.seed}"
    return GlobalPoseSequence(positions, ids, spec.frame_rate, scene_id), label


def generate_many(spec: SynthSpec, count: int) -> list[GlobalPoseSequence]:
    """``count`` scenes with seeds derived from ``spec.seed``."""
    seeds = np.random.SeedSequence(spec.seed).generate_state(count, dtype=np.uint64)
    out = []
    for i, s in enumerate(seeds):
        scene, _ = generate(replace(spec, seed=int(s)))
        out.append(GlobalPoseSequence(scene.positions, scene.agent_ids, scene.frame_rate,
                                      f"{spec.style}-{spec.seed}-{i}"))
    return out


def generate_bimodal(spec: SynthSpec, count: int) -> list[tuple[GlobalPoseSequence, str]]:
    """``count`` fork scenes with an exactly balanced (for even counts) shuffled set of labels."""
    spec = replace(spec, style="bimodal-fork")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(7,)))
    labels = ["left", "right"] * (count // 2) + ([str(rng.choice(["left", "right"]))] if count % 2 else [])
    labels = [labels[i] for i in rng.permutation(count)]
    seeds = np.random.SeedSequence(spec.seed).generate_state(count, dtype=np.uint64)
    out = []
    for i, (s, lab) in enumerate(zip(seeds, labels)):
        scene, _ = generate(replace(spec, seed=int(s)), label=lab)
        out.append((GlobalPoseSequence(scene.positions, scene.agent_ids, scene.frame_rate,
                                       f"fork-{spec.seed}-{i}"), lab))
    return out


def skeleton() -> Skeleton:
    """The joint layout produced by :func:`body_pose`."""
    return Skeleton.default()
