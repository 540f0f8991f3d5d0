"""Trajectory-conditioned local pose decoder and final joint-wise composition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .dct import dct_matrix
from .interaction import TrajectoryFeatures
from .pose_encoder import PoseEmbedding
from .traj_decoder import to_world


@dataclass
class ForecastBundle:
    """F-mode forecast of one scene (world frame, meters).

    trajectories ``(F, N, T_f, 3)``, local ``(F, N, T_f, J, 3)``, composed ``(F, N, T_f, J, 3)``.
    """

    trajectories: np.ndarray
    local: np.ndarray
    composed: np.ndarray

    @property
    def modes(self) -> int:
        return self.trajectories.shape[0]


def init_pose_decoder(store: nn.ParameterStore, rng, joints: int, past_steps: int, future_steps: int,
                      d_pose: int = 128, d_traj: int = 96, layers: int = 2, d_ff: int = 1024,
                      heads: int = 8, d_k: int = 64) -> None:
    nn.init_linear(store, "pose_dec.query", d_pose + d_traj, d_pose, rng)
    for layer in range(layers):
        nn.init_encoder_layer(store, f"pose_dec.layer{layer}", d_pose, d_ff, rng, heads, d_k)
    total = past_steps + future_steps
    nn.init_mlp(store, "pose_dec.head", [d_pose, d_pose, d_pose, joints * 3 * total], rng)


def decode_poses(store: nn.ParameterStore, pose_emb: PoseEmbedding, latents: ag.Tensor, base_coeffs: np.ndarray,
                 feats: TrajectoryFeatures, past_steps: int, hip_index: int, *, layers: int = 2, heads: int = 8,
                 d_k: int = 64, keep: int | None = None, dropout_rate: float = 0.2, training: bool = False,
                 rng=None, condition_on_trajectory: bool = True) -> ag.Tensor:
    """Local pose forecast per mode, ``(F, B, N, T_f, J, 3)`` in world axes with zero hip.

    ``base_coeffs`` ``(B, N, J, 3, T_p + T_f)`` is the DCT of the replicate-padded
    past in agent frames; the head predicts a residual on top of it.
    """
    modes = latents.shape[0]
    pooled = ag.broadcast_to(ag.expand_dims(pose_emb.pooled, 0), (modes,) + pose_emb.pooled.shape)
    q_traj = latents if condition_on_trajectory else ag.Tensor(np.zeros(latents.shape))
    x = nn.linear(store, ag.concat([pooled, q_traj], axis=-1), "pose_dec.query")
    x = ag.expand_dims(x, -2)  # (F, B, N, 1, d)
    for layer in range(layers):
        x = nn.encoder_layer(store, x, f"pose_dec.layer{layer}", memory=pose_emb.per_part, heads=heads, d_k=d_k,
                             dropout_rate=dropout_rate, training=training, rng=rng)
    coeffs = nn.mlp(store, x.reshape(x.shape[:-2] + (x.shape[-1],)), "pose_dec.head", 3)
    joints, total = base_coeffs.shape[-3], base_coeffs.shape[-1]
    coeffs = coeffs.reshape(coeffs.shape[:-1] + (joints, 3, total))
    if keep is not None and keep < total:
        band = np.zeros(total)
        band[:keep] = 1.0
        coeffs = coeffs * band
    coeffs = coeffs + base_coeffs
    # only the future part of the inverse transform is needed
    frames = ag.matmul(coeffs, dct_matrix(total)[:, past_steps:])  # (F, B, N, J, 3, T_f)
    frames = ag.transpose(frames, tuple(range(frames.ndim - 3)) + (frames.ndim - 1, frames.ndim - 3, frames.ndim - 2))
    world = to_world(frames, feats, anchor=False, inner_axes=1)
    hip_zero = np.ones((joints, 1))
    hip_zero[hip_index] = 0.0
    return world * hip_zero


def compose(trajectories, local):
    """Joint-wise addition of hip trajectories ``(..., T_f, 3)`` and local poses ``(..., T_f, J, 3)``."""
    t_shape = trajectories.shape
    l_shape = local.shape
    if t_shape[:-1] != l_shape[:-2]:
        raise ValueError(f"trajectory shape {t_shape} does not match local pose shape {l_shape}")
    if isinstance(trajectories, ag.Tensor) or isinstance(local, ag.Tensor):
        return ag.expand_dims(ag.as_tensor(trajectories), -2) + local
    return np.asarray(trajectories)[..., None, :] + np.asarray(local)


def make_bundle(trajectories: np.ndarray, local: np.ndarray) -> ForecastBundle:
    return ForecastBundle(np.asarray(trajectories), np.asarray(local), compose(trajectories, local))
