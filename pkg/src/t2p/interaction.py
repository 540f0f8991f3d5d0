"""Rotation-invariant trajectory embedding, traj-pose fusion and gated graph attention.

Shapes use a leading scene-batch axis ``B``; ``N`` is the agent count and
``S = T_p - 1`` the number of hip displacement segments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .motion import TrajectorySequence, rotate_z, yaw_matrix

STATIONARY_EPS = 1e-6


@dataclass(frozen=True)
class AgentFrame:
    heading: float
    origin: np.ndarray  # hip position at the last observed frame

    @property
    def rotation(self) -> np.ndarray:
        """World -> agent frame; maps the heading direction onto +x."""
        return yaw_matrix(-self.heading)


@dataclass
class TrajectoryFeatures:
    segments: np.ndarray  # (B, N, S, 3)
    headings: np.ndarray  # (B, N)
    origins: np.ndarray  # (B, N, 3)

    def frames(self, b: int = 0) -> list[AgentFrame]:
        return [AgentFrame(float(h), o) for h, o in zip(self.headings[b], self.origins[b])]


def segments(hips: np.ndarray) -> np.ndarray:
    """``v_t = x_t - x_{t-1}`` of the hip along the time axis (second to last)."""
    return np.diff(hips, axis=-2)


def headings(segs: np.ndarray) -> np.ndarray:
    """Heading from the latest xy displacement.

    A latest displacement shorter than 1e-6 m falls back to the earliest segment
    that is long enough; a fully stationary agent gets heading 0.
    """
    xy = segs[..., :2]
    length = np.linalg.norm(xy, axis=-1)
    moving = length >= STATIONARY_EPS
    first = np.argmax(moving, axis=-1)
    pick = np.where(moving[..., -1], segs.shape[-2] - 1, first)
    chosen = np.take_along_axis(xy, pick[..., None, None], axis=-2)[..., 0, :]
    h = np.arctan2(chosen[..., 1], chosen[..., 0])
    return np.where(moving.any(axis=-1), h, 0.0)


def trajectory_features(hips: np.ndarray) -> TrajectoryFeatures:
    hips = np.asarray(hips, dtype=np.float64)
    if hips.shape[-2] < 2:
        raise ValueError("need at least two observed frames")
    segs = segments(hips)
    return TrajectoryFeatures(segs, headings(segs), hips[..., -1, :])


def neighbor_mask(origins: np.ndarray, radius: float | None, include_self: bool = True) -> np.ndarray:
    """``mask[b, i, j]`` is True when agent j is within ``radius`` (xy) of agent i."""
    n = origins.shape[-2]
    if radius is None:
        mask = np.ones(origins.shape[:-2] + (n, n), dtype=bool)
    else:
        d = np.linalg.norm(origins[..., :, None, :2] - origins[..., None, :, :2], axis=-1)
        mask = d <= radius
    eye = np.eye(n, dtype=bool)
    return mask | eye if include_self else mask & ~eye


def init_interaction(store: nn.ParameterStore, rng, d_traj: int = 96, d_pose: int = 128, d_k: int = 64) -> None:
    nn.init_mlp(store, "traj_enc.ref", [3, d_traj, d_traj], rng)
    nn.init_mlp(store, "traj_enc.nbr", [6, d_traj, d_traj], rng)
    nn.init_linear(store, "fuse.pose", d_pose, d_traj, rng)
    nn.init_linear(store, "fuse.self", 2 * d_traj, d_traj, rng)
    nn.init_linear(store, "fuse.nbr", 2 * d_traj, d_traj, rng)
    init_gated_attention(store, "traj_pose_attn", d_traj, d_traj, rng, d_k)


def embed_trajectory(store: nn.ParameterStore, feats: TrajectoryFeatures):
    """Reference and neighbor embeddings in each reference agent's frame.

    Returns ``(z_ref, z_nbr)`` with shapes ``(B, N, S, d)`` and ``(B, N_i, S, N_j, d)``.
    """
    segs, yaw = feats.segments, feats.headings
    ref_local = rotate_z(segs, -yaw[..., None])  # (B, N, S, 3)
    # neighbor j's segments in reference agent i's frame
    nbr_local = rotate_z(segs[..., None, :, :, :], -yaw[..., :, None, None])  # (B, i, j, S, 3)
    nbr_local = np.swapaxes(nbr_local, -3, -2)  # (B, i, S, j, 3)
    ref_rep = np.broadcast_to(ref_local[..., :, :, None, :], nbr_local.shape)
    pair_in = np.concatenate([nbr_local, ref_rep], axis=-1)
    z_ref = nn.mlp(store, ref_local, "traj_enc.ref", 2)
    z_nbr = nn.mlp(store, pair_in, "traj_enc.nbr", 2)
    return z_ref, z_nbr


def fuse(store: nn.ParameterStore, z_ref: ag.Tensor, z_nbr: ag.Tensor, pose_pooled: ag.Tensor | None):
    """Concatenate trajectory and (reduced) pose embeddings and mix back to ``d_traj``.

    ``pose_pooled=None`` drops the pose branch (pose-ablation mode).
    """
    b_n_s = z_ref.shape[:-1]
    d = z_ref.shape[-1]
    if pose_pooled is None:
        p = ag.Tensor(np.zeros(z_ref.shape[:-2] + (d,)))
    else:
        if pose_pooled.shape[-2] != z_ref.shape[-3]:
            raise ValueError(f"pose embedding has {pose_pooled.shape[-2]} agents, trajectory has {z_ref.shape[-3]}")
        p = nn.linear(store, pose_pooled, "fuse.pose")  # (B, N, d)
    p_self = ag.broadcast_to(ag.expand_dims(p, -2), b_n_s + (d,))
    z_self = nn.linear(store, ag.concat([z_ref, p_self], axis=-1), "fuse.self")
    # pose of neighbor j for every (i, s)
    p_pair = ag.broadcast_to(ag.expand_dims(ag.expand_dims(p, -3), -3), z_nbr.shape[:-1] + (d,))
    z_pair = nn.linear(store, ag.concat([z_nbr, p_pair], axis=-1), "fuse.nbr")
    return z_self, z_pair


def init_gated_attention(store: nn.ParameterStore, name: str, d: int, d_pair: int, rng, d_k: int = 64) -> None:
    nn.init_linear(store, f"{name}.q", d, d_k, rng)
    nn.init_linear(store, f"{name}.k", d_pair, d_k, rng)
    nn.init_linear(store, f"{name}.v", d_pair, d, rng)
    nn.init_linear(store, f"{name}.gate", 2 * d, d, rng)
    nn.init_linear(store, f"{name}.self", d, d, rng, bias=False)


def gated_attention(store: nn.ParameterStore, name: str, x_self, x_pair, mask: np.ndarray):
    """Gated graph attention update.

    ``x_self`` is ``(..., d)``, ``x_pair`` is ``(..., K, d_pair)`` and ``mask``
    ``(..., K)`` marks the neighbors. Returns ``(updated, alpha, gate)``; an agent
    with no neighbors receives a zero message.
    """
    q = ag.expand_dims(nn.linear(store, x_self, f"{name}.q"), -2)  # (..., 1, d_k)
    k = nn.linear(store, x_pair, f"{name}.k")
    v = nn.linear(store, x_pair, f"{name}.v")
    m, alpha = nn.attention(q, k, v, mask[..., None, :], d_k=q.shape[-1])
    m = m.reshape(m.shape[:-2] + (m.shape[-1],))
    gate = ag.sigmoid(nn.linear(store, ag.concat([x_self, m], axis=-1), f"{name}.gate"))
    own = nn.linear(store, x_self, f"{name}.self")
    out = gate * own + (1.0 - gate) * m
    return out, alpha.data[..., 0, :], gate.data


def graph_attend(store: nn.ParameterStore, z_self: ag.Tensor, z_pair: ag.Tensor, neighbors: np.ndarray):
    """Per-timestep interaction over neighbor sets.

    ``neighbors`` is ``(B, N, N)``. Returns ``(z_tilde, alpha, pair_scores)``
    where ``pair_scores[b] = S * sum_i |N_i|`` counts the attention logits computed.
    """
    steps = z_self.shape[-2]
    mask = np.broadcast_to(neighbors[..., :, None, :], z_pair.shape[:-1])
    z, alpha, _ = gated_attention(store, "traj_pose_attn", z_self, z_pair, mask)
    pair_scores = steps * neighbors.sum(axis=(-1, -2))
    return z, alpha, pair_scores


def holistic_pair_count(steps: int, agents: int, joints: int) -> int:
    """Attention logits of joint-level attention over all agents and timesteps."""
    return steps**2 * agents**2 * joints**2


def trajectory_sequence_features(traj: TrajectorySequence) -> TrajectoryFeatures:
    return trajectory_features(traj.hip_positions[None])
