"""Full forecaster: pose encoder -> interaction encoder -> trajectory decoder -> pose decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import nn
from .interaction import TrajectoryFeatures, embed_trajectory, fuse, graph_attend, init_interaction, \
    neighbor_mask, trajectory_features
from .motion import GlobalPoseSequence, ScenarioConfig, Skeleton, rotate_z
from .pose_decoder import ForecastBundle, decode_poses, init_pose_decoder, make_bundle
from .pose_encoder import PoseEmbedding, build_mpbp_tokens, encode, frequency_channels, init_pose_encoder
from .traj_decoder import aggregate, init_traj_decoder, span_modes, temporal_encode, trajectory_head


@dataclass(frozen=True)
class ModelConfig:
    past_steps: int = 10
    future_steps: int = 20
    modes: int = 6
    interaction_radius: float | None = None
    d_pose: int = 128
    d_traj: int = 96
    heads: int = 8
    d_k: int = 64
    pose_ff: int = 1024
    temporal_ff: int = 384
    pose_encoder_layers: int = 2
    pose_decoder_layers: int = 2
    temporal_layers: int = 4
    dropout: float = 0.2
    dct_keep: int | None = None
    use_pose_embedding: bool = True
    condition_on_trajectory: bool = True
    skeleton: dict = field(default_factory=lambda: Skeleton.default().to_json())

    def __post_init__(self):
        if self.past_steps < 2:
            raise ValueError("past_steps must be >= 2")
        if self.future_steps < 1 or self.modes < 1:
            raise ValueError("future_steps and modes must be >= 1")

    @property
    def skel(self) -> Skeleton:
        return Skeleton.from_json(self.skeleton)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def scenario(self) -> ScenarioConfig:
        return ScenarioConfig(self.past_steps, self.future_steps, self.modes, self.interaction_radius)

    @classmethod
    def from_scenario(cls, scenario: ScenarioConfig, **overrides) -> "ModelConfig":
        return cls(past_steps=scenario.past_steps, future_steps=scenario.future_steps, modes=scenario.modes,
                   interaction_radius=scenario.interaction_radius, **overrides)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class SceneBatch:
    """Model inputs for ``B`` scenes sharing the agent count."""

    past: np.ndarray  # (B, N, T_p, J, 3) world
    feats: TrajectoryFeatures
    local_agent: np.ndarray  # (B, N, T_p, J, 3) hip-relative, rotated into agent frames
    neighbors: np.ndarray  # (B, N, N), includes self
    future: np.ndarray | None = None  # (B, N, T_f, J, 3) world ground truth

    @property
    def size(self) -> int:
        return self.past.shape[0]


def prepare_batch(pasts: Sequence[np.ndarray], cfg: ModelConfig,
                  futures: Sequence[np.ndarray] | None = None) -> SceneBatch:
    past = np.stack([np.asarray(p, dtype=np.float64) for p in pasts])
    if past.shape[2] != cfg.past_steps:
        raise ValueError(f"expected {cfg.past_steps} past frames, got {past.shape[2]}")
    skel = cfg.skel
    hips = past[..., skel.hip_index, :]
    feats = trajectory_features(hips)
    local = past - hips[..., None, :]
    local[..., skel.hip_index, :] = 0.0
    local_agent = rotate_z(local, -feats.headings[..., None, None])
    fut = None if futures is None else np.stack([np.asarray(f, dtype=np.float64) for f in futures])
    return SceneBatch(past, feats, local_agent, neighbor_mask(feats.origins, cfg.interaction_radius), fut)


def batch_from_scenes(scenes: Sequence[GlobalPoseSequence], cfg: ModelConfig, with_future: bool = True) -> SceneBatch:
    tp, tf = cfg.past_steps, cfg.future_steps
    pasts = [s.positions[:, :tp] for s in scenes]
    futures = [s.positions[:, tp:tp + tf] for s in scenes] if with_future else None
    if with_future and any(f.shape[1] != tf for f in futures):
        raise ValueError(f"scenes need {tp + tf} frames for training/evaluation")
    return prepare_batch(pasts, cfg, futures)


@dataclass
class ForwardOutput:
    trajectories: ag.Tensor  # (F, B, N, T_f, 3)
    local: ag.Tensor  # (F, B, N, T_f, J, 3)
    composed: ag.Tensor  # (F, B, N, T_f, J, 3)
    pose_embedding: PoseEmbedding
    latents: ag.Tensor  # (F, B, N, d_traj)
    alpha: np.ndarray
    pair_scores: np.ndarray  # (B,)

    def bundle(self, b: int = 0) -> ForecastBundle:
        return make_bundle(self.trajectories.data[:, b], self.local.data[:, b])


def init_params(cfg: ModelConfig, seed: int = 0) -> nn.ParameterStore:
    rng = np.random.default_rng(seed)
    store = nn.ParameterStore()
    skel = cfg.skel
    init_pose_encoder(store, skel, cfg.past_steps, cfg.future_steps, rng, cfg.d_pose, cfg.pose_encoder_layers,
                      cfg.pose_ff, cfg.heads, cfg.d_k)
    init_interaction(store, rng, cfg.d_traj, cfg.d_pose, cfg.d_k)
    init_traj_decoder(store, rng, cfg.past_steps, cfg.future_steps, cfg.modes, cfg.d_traj, cfg.temporal_layers,
                      cfg.temporal_ff, cfg.heads, cfg.d_k)
    init_pose_decoder(store, rng, skel.joint_count, cfg.past_steps, cfg.future_steps, cfg.d_pose, cfg.d_traj,
                      cfg.pose_decoder_layers, cfg.pose_ff, cfg.heads, cfg.d_k)
    return store


def encode_pose(store, batch: SceneBatch, cfg: ModelConfig, training=False, rng=None) -> PoseEmbedding:
    tokens = build_mpbp_tokens(store, batch.local_agent, cfg.skel, cfg.future_steps, cfg.dct_keep)
    return encode(store, tokens, cfg.pose_encoder_layers, cfg.heads, cfg.d_k, cfg.dropout, training, rng)


def encode_interaction(store, batch: SceneBatch, pose: PoseEmbedding, cfg: ModelConfig):
    z_ref, z_nbr = embed_trajectory(store, batch.feats)
    z_self, z_pair = fuse(store, z_ref, z_nbr, pose.pooled if cfg.use_pose_embedding else None)
    return graph_attend(store, z_self, z_pair, batch.neighbors)


def forward(store: nn.ParameterStore, batch: SceneBatch, cfg: ModelConfig, training: bool = False,
            rng: np.random.Generator | None = None) -> ForwardOutput:
    if training and cfg.dropout > 0 and rng is None:
        raise ValueError("training with dropout needs an explicit rng")
    pose = encode_pose(store, batch, cfg, training, rng)
    z, alpha, pair_scores = encode_interaction(store, batch, pose, cfg)
    summary = temporal_encode(store, z, None, cfg.temporal_layers, cfg.heads, cfg.d_k, cfg.dropout, training, rng)
    agg = aggregate(store, summary, batch.feats, cfg.interaction_radius)
    latents = span_modes(store, agg, summary, cfg.modes)
    traj = trajectory_head(store, latents, agg, batch.feats, cfg.future_steps)
    base = frequency_channels(batch.local_agent, cfg.future_steps, cfg.dct_keep)
    local = decode_poses(store, pose, latents, base, batch.feats, cfg.past_steps, cfg.skel.hip_index,
                         layers=cfg.pose_decoder_layers, heads=cfg.heads, d_k=cfg.d_k, keep=cfg.dct_keep,
                         dropout_rate=cfg.dropout, training=training, rng=rng,
                         condition_on_trajectory=cfg.condition_on_trajectory)
    composed = ag.expand_dims(traj, -2) + local
    return ForwardOutput(traj, local, composed, pose, latents, alpha, pair_scores)


class Forecaster:
    """Parameters plus configuration; the object the training loop and CLI pass around."""

    def __init__(self, cfg: ModelConfig, store: nn.ParameterStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.store = store if store is not None else init_params(cfg, seed)

    def forward(self, batch: SceneBatch, training: bool = False, rng=None) -> ForwardOutput:
        return forward(self.store, batch, self.cfg, training, rng)

    def predict(self, scene: GlobalPoseSequence) -> ForecastBundle:
        """Forecast from the first ``past_steps`` frames of ``scene``."""
        batch = batch_from_scenes([scene], self.cfg, with_future=False)
        return self.forward(batch).bundle(0)

    def predict_past(self, past: np.ndarray) -> ForecastBundle:
        return self.forward(prepare_batch([past], self.cfg)).bundle(0)
