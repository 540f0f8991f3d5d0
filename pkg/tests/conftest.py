"""Shared fixtures: a narrow model configuration and random walking scenes."""

import numpy as np
import pytest

from t2p.model import ModelConfig
from t2p.motion import GlobalPoseSequence


def tiny_config(**overrides) -> ModelConfig:
    """Full architecture at toy widths, for gradient checks and property tests."""
    base = dict(past_steps=6, future_steps=8, modes=3, d_pose=16, d_traj=12, heads=2, d_k=4, pose_ff=16,
                temporal_ff=16, pose_encoder_layers=1, pose_decoder_layers=1, temporal_layers=1, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def walking_scene(rng: np.random.Generator, agents: int = 3, frames: int = 14, joints: int = 15) -> GlobalPoseSequence:
    """Agents moving with clearly nonzero velocity plus random body shapes and jitter."""
    start = rng.uniform(-3, 3, size=(agents, 1, 3))
    start[..., 2] = 0.9
    heading = rng.uniform(-np.pi, np.pi, size=agents)
    speed = rng.uniform(0.5, 1.5, size=agents)
    t = np.arange(frames) * 0.1
    vel = np.stack([np.cos(heading), np.sin(heading), np.zeros(agents)], axis=-1) * speed[:, None]
    hips = start + t[None, :, None] * vel[:, None, :] + rng.normal(0, 0.005, size=(agents, frames, 3))
    body = rng.normal(0, 0.3, size=(agents, 1, joints, 3)) + rng.normal(0, 0.02, size=(agents, frames, joints, 3))
    body[:, :, 0] = 0.0
    return GlobalPoseSequence(hips[:, :, None, :] + body, tuple(f"a{i}" for i in range(agents)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
