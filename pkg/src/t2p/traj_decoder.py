"""Temporal encoder, agent-frame aggregator, mode spanning and the hip trajectory head."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import nn
from .interaction import TrajectoryFeatures, gated_attention, init_gated_attention, neighbor_mask
from .motion import rotate_z


def init_traj_decoder(store: nn.ParameterStore, rng, past_steps: int, future_steps: int, modes: int,
                      d: int = 96, layers: int = 4, d_ff: int = 384, heads: int = 8, d_k: int = 64) -> None:
    store.create("temporal.token", (1, d), rng, fan=(d, d))
    store.create("temporal.pos", (past_steps, d), rng, fan=(d, d))
    for layer in range(layers):
        nn.init_encoder_layer(store, f"temporal.layer{layer}", d, d_ff, rng, heads, d_k)
    nn.init_linear(store, "aggr.edge", 4, d, rng)
    nn.init_layer_norm(store, "aggr.edge_ln", d)
    init_gated_attention(store, "aggr.attn", d, 2 * d, rng, d_k)
    store.create("span.w1", (modes, d, d), rng, fan=(d, d))
    store.create("span.b1", (modes, 1, d), init="zeros")
    store.create("span.ln.scale", (modes, 1, d), init="ones")
    store.create("span.ln.shift", (modes, 1, d), init="zeros")
    store.create("span.w2", (modes, d, d), rng, fan=(d, d))
    store.create("span.b2", (modes, 1, d), init="zeros")
    nn.init_mlp(store, "traj_head", [2 * d, d, future_steps * 3], rng)


def temporal_encode(store: nn.ParameterStore, z: ag.Tensor, valid: np.ndarray | None = None, layers: int = 4,
                    heads: int = 8, d_k: int = 64, dropout_rate: float = 0.2, training: bool = False, rng=None):
    """Summarize each agent's timestep sequence through a prepended learnable token.

    ``z`` is ``(B, N, S, d)``; ``valid`` ``(B, N, S)`` masks padded timesteps
    (default all visible). Returns ``(B, N, d)``.
    """
    lead = z.shape[:-2]
    d = z.shape[-1]
    token = ag.broadcast_to(store.leaf("temporal.token"), lead + (1, d))
    seq = ag.concat([token, z], axis=-2) + store.leaf("temporal.pos")
    if valid is None:
        valid = np.ones(z.shape[:-1], dtype=bool)
    keys = np.concatenate([np.ones(lead + (1,), dtype=bool), valid], axis=-1)
    mask = keys[..., None, :]
    for layer in range(layers):
        seq = nn.encoder_layer(store, seq, f"temporal.layer{layer}", mask=mask, heads=heads, d_k=d_k,
                               dropout_rate=dropout_rate, training=training, rng=rng)
    return seq[..., 0, :]


def edge_attributes(feats: TrajectoryFeatures) -> np.ndarray:
    """``[dx, dy, cos, sin]`` of agent j relative to receiver i, in i's frame: ``(B, N_i, N_j, 4)``."""
    o, yaw = feats.origins, feats.headings
    rel = o[..., None, :, :] - o[..., :, None, :]  # j - i
    rel = rotate_z(rel, -yaw[..., :, None])
    dyaw = yaw[..., None, :] - yaw[..., :, None]
    return np.stack([rel[..., 0], rel[..., 1], np.cos(dyaw), np.sin(dyaw)], axis=-1)


def aggregate(store: nn.ParameterStore, summaries: ag.Tensor, feats: TrajectoryFeatures,
              radius: float | None = None) -> ag.Tensor:
    """One message-passing round over the other agents using relative pose edge features."""
    n = summaries.shape[-2]
    d = summaries.shape[-1]
    attrs = edge_attributes(feats)
    edge = ag.relu(nn.layer_norm(store, nn.linear(store, attrs, "aggr.edge"), "aggr.edge_ln"))
    nbr = ag.broadcast_to(ag.expand_dims(summaries, -3), summaries.shape[:-2] + (n, n, d))
    pair = ag.concat([nbr, edge], axis=-1)
    mask = neighbor_mask(feats.origins, radius, include_self=False)
    out, _, _ = gated_attention(store, "aggr.attn", summaries, pair, mask)
    return out


def span_modes(store: nn.ParameterStore, aggregated: ag.Tensor, base: ag.Tensor, modes: int) -> ag.Tensor:
    """Per-mode MLP of the aggregated embedding plus the repeated pre-aggregation base.

    Returns ``(F, B, N, d)``; mode f uses only the ``[f]`` slices of the ``span.*`` weights.
    """
    lead = aggregated.shape[:-1]
    d = aggregated.shape[-1]
    x = aggregated.reshape(1, -1, d)
    h = ag.matmul(x, store.leaf("span.w1")) + store.leaf("span.b1")
    h = ag.standardize(h) * store.leaf("span.ln.scale") + store.leaf("span.ln.shift")
    h = ag.relu(h)
    h = ag.matmul(h, store.leaf("span.w2")) + store.leaf("span.b2")
    h = h.reshape((modes,) + lead + (d,))
    return h + ag.expand_dims(base, 0)


def to_world(local: ag.Tensor, feats: TrajectoryFeatures, anchor: bool = True, inner_axes: int = 0) -> ag.Tensor:
    """Rotate agent-frame row vectors to the world frame.

    ``local`` is ``(..., B, N, *inner, R, 3)`` with ``inner_axes`` axes between
    the agent axis and the rows. With ``anchor`` the agent's last hip position
    is added.
    """
    c, s = np.cos(feats.headings), np.sin(feats.headings)
    zero, one = np.zeros_like(c), np.ones_like(c)
    # row-vector convention: world = local @ R^T, R = Rz(heading)
    rt = np.stack([np.stack([c, s, zero], -1), np.stack([-s, c, zero], -1), np.stack([zero, zero, one], -1)], -2)
    rt = rt.reshape(rt.shape[:-2] + (1,) * inner_axes + (3, 3))
    out = ag.matmul(local, rt)
    if anchor:
        out = out + feats.origins.reshape(feats.origins.shape[:-1] + (1,) * (inner_axes + 1) + (3,))
    return out


def trajectory_head(store: nn.ParameterStore, latents: ag.Tensor, aggregated: ag.Tensor,
                    feats: TrajectoryFeatures, future_steps: int) -> ag.Tensor:
    """Agent-frame hip displacements mapped to world positions: ``(F, B, N, T_f, 3)``."""
    agg = ag.broadcast_to(ag.expand_dims(aggregated, 0), latents.shape)
    out = nn.mlp(store, ag.concat([latents, agg], axis=-1), "traj_head", 2)
    out = out.reshape(out.shape[:-1] + (future_steps, 3))
    return to_world(out, feats)
