"""Per-agent local pose encoder: frequency-domain body-part tokens + intra-agent transformer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .dct import dct_matrix, replicate_pad, truncate
from .motion import LocalPoseSequence, Skeleton


@dataclass
class PoseEmbedding:
    per_part: ag.Tensor  # (..., N_A, 5, d_pose)
    pooled: ag.Tensor  # (..., N_A, d_pose)


def init_pose_encoder(store: nn.ParameterStore, skel: Skeleton, past_steps: int, future_steps: int, rng,
                      d_pose: int = 128, layers: int = 2, d_ff: int = 1024, heads: int = 8, d_k: int = 64) -> None:
    total = past_steps + future_steps
    for k, part in enumerate(skel.parts):
        nn.init_linear(store, f"pose_enc.part{k}", 3 * len(part) * total, d_pose, rng)
    for layer in range(layers):
        nn.init_encoder_layer(store, f"pose_enc.layer{layer}", d_pose, d_ff, rng, heads, d_k)


def frequency_channels(local_past: np.ndarray, future_steps: int, keep: int | None = None) -> np.ndarray:
    """DCT of replicate-padded joint channels.

    ``local_past`` is ``(..., T_p, J, 3)``; the result is ``(..., J, 3, T_p + T_f)``.
    """
    x = np.moveaxis(np.asarray(local_past, dtype=np.float64), -3, -1)
    padded = replicate_pad(x, future_steps)
    return truncate(padded @ dct_matrix(padded.shape[-1]).T, keep)


def build_mpbp_tokens(store: nn.ParameterStore, local_past, skel: Skeleton, future_steps: int,
                      keep: int | None = None) -> ag.Tensor:
    """One 128-d token per (agent, body part) from frequency-domain joint channels."""
    if isinstance(local_past, LocalPoseSequence):
        local_past = local_past.offsets
    local_past = np.asarray(local_past)
    if local_past.shape[-2] != skel.joint_count:
        raise ValueError(f"pose has {local_past.shape[-2]} joints, skeleton has {skel.joint_count}")
    for part in skel.parts:
        if max(part) >= local_past.shape[-2] or min(part) < 0:
            raise ValueError(f"body part {part} references joints outside 0..{local_past.shape[-2] - 1}")
    coeffs = frequency_channels(local_past, future_steps, keep)
    lead = coeffs.shape[:-3]
    tokens = []
    for k, part in enumerate(skel.parts):
        flat = coeffs[..., list(part), :, :].reshape(*lead, -1)
        tokens.append(nn.linear(store, flat, f"pose_enc.part{k}"))
    return ag.stack(tokens, axis=-2)


def encode(store: nn.ParameterStore, tokens: ag.Tensor, layers: int = 2, heads: int = 8, d_k: int = 64,
           dropout_rate: float = 0.2, training: bool = False, rng=None) -> PoseEmbedding:
    """Self-attention over the part tokens of each agent separately (no cross-agent attention)."""
    x = tokens
    for layer in range(layers):
        x = nn.encoder_layer(store, x, f"pose_enc.layer{layer}", heads=heads, d_k=d_k,
                             dropout_rate=dropout_rate, training=training, rng=rng)
    return PoseEmbedding(x, ag.mean(x, axis=-2))
