"""Winner-takes-all loss, the optimization step and the seeded training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import NumericalError
from .model import Forecaster, ModelConfig, SceneBatch, batch_from_scenes
from .motion import GlobalPoseSequence, ScenarioConfig, ShapeError
from .pose_decoder import ForecastBundle

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.npz"
TRACE_NAME = "loss_trace.csv"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    weight_decay: float = 0.01
    steps: int = 1000
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only at the end
    warmup_steps: int = 0  # linear ramp to learning_rate; 0 = constant rate
    cosine_decay: bool = False  # after warmup, anneal to zero over the remaining steps
    independent_modes: bool = False  # pick the trajectory and pose winners separately
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 0 or self.warmup_steps < 0:
            raise ValueError("steps, checkpoint_every and warmup_steps must be >= 0, batch_size >= 1")

    def rate_at(self, step: int) -> float:
        """Learning rate of optimizer step ``step`` (0-based)."""
        if self.warmup_steps and step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        if self.cosine_decay and self.steps > self.warmup_steps:
            frac = (step - self.warmup_steps) / (self.steps - self.warmup_steps)
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))
        return self.learning_rate

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["scenario"] = ScenarioConfig(**obj.get("scenario", {}))
        return cls(**obj)


@dataclass
class LossReport:
    L_Tr: float
    L_Po: float
    L: float
    winning_mode: np.ndarray  # (B,) winner per scene

    def histogram(self, modes: int) -> np.ndarray:
        return np.bincount(self.winning_mode, minlength=modes)


# ----------------------------------------------------------------------------
# loss


def _mode_errors(traj: np.ndarray, local: np.ndarray, future: np.ndarray, hip_index: int):
    """Per-mode, per-scene summed trajectory and non-hip pose errors, each ``(F, B)``."""
    gt_hip = future[..., hip_index, :]
    gt_local = future - gt_hip[..., None, :]
    tr = np.linalg.norm(traj - gt_hip, axis=-1).sum(axis=(-1, -2))
    po_all = np.linalg.norm(local - gt_local, axis=-1)
    po = po_all.sum(axis=(-1, -2, -3)) - po_all[..., hip_index].sum(axis=(-1, -2))
    return tr, po


def wta_loss(traj, local, future: np.ndarray, hip_index: int = 0, independent: bool = False):
    """Winner-takes-all loss on batched forecasts.

    ``traj`` ``(F, B, N, T_f, 3)`` and ``local`` ``(F, B, N, T_f, J, 3)`` may be
    tensors; ``future`` is ``(B, N, T_f, J, 3)``. Only the winning mode of each
    scene contributes, so the other modes receive exactly zero gradient.
    Returns ``(loss tensor, LossReport)`` with losses averaged over scenes.
    """
    traj, local = ag.as_tensor(traj), ag.as_tensor(local)
    future = np.asarray(future, dtype=np.float64)
    if local.shape[1:] != future.shape or traj.shape != local.shape[:-2] + (3,):
        raise ShapeError(f"forecast shapes {traj.shape}/{local.shape} do not match ground truth {future.shape}")
    modes, scenes = traj.shape[0], traj.shape[1]
    if modes == 0:
        raise ValueError("need at least one mode")
    tr_sum, po_sum = _mode_errors(traj.data, local.data, future, hip_index)
    if independent:
        k_tr, k_po = np.argmin(tr_sum, axis=0), np.argmin(po_sum, axis=0)
    else:
        # the winner minimizes the loss itself, so more modes never raise it
        k_tr = k_po = np.argmin(tr_sum + po_sum, axis=0)
    rows = np.arange(scenes)
    gt_hip = future[..., hip_index, :]
    gt_local = future - gt_hip[..., None, :]
    tr = ag.norm(traj[k_tr, rows] - gt_hip)  # (B, N, T)
    not_hip = np.ones(future.shape[-2])
    not_hip[hip_index] = 0.0
    po = ag.norm(local[k_po, rows] - gt_local) * not_hip  # (B, N, T, J)
    l_tr = ag.tsum(tr) * (1.0 / scenes)
    l_po = ag.tsum(po) * (1.0 / scenes)
    loss = l_tr + l_po
    report = LossReport(float(l_tr.data), float(l_po.data), float(loss.data), k_tr if not independent else k_po)
    return loss, report


def compute_loss(bundle: ForecastBundle, gt, hip_index: int = 0, independent: bool = False) -> LossReport:
    """Loss of one scene's forecast against its future frames (scene or ``(N, T_f, J, 3)`` array)."""
    future = gt.positions if isinstance(gt, GlobalPoseSequence) else np.asarray(gt, dtype=np.float64)
    _, report = wta_loss(bundle.trajectories[:, None], bundle.local[:, None], future[None], hip_index, independent)
    return report


# ----------------------------------------------------------------------------
# optimization


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Dropout randomness of one optimizer step; a pure function of (seed, step)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, step)))


def train_step(model: Forecaster, batch: SceneBatch, cfg: TrainConfig, rng: np.random.Generator | None = None,
               learning_rate: float | None = None) -> LossReport:
    """Zero gradients, forward, loss, backward and one AdamW update."""
    if batch.future is None:
        raise ValueError("training batch has no ground-truth future")
    store = model.store
    if not store.grads_clear:
        store.zero_grad()
    store.grads_clear = False
    if rng is None:
        rng = step_rng(cfg.seed, store.step)
    out = model.forward(batch, training=True, rng=rng)
    loss, report = wta_loss(out.trajectories, out.local, batch.future, model.cfg.skel.hip_index,
                            cfg.independent_modes)
    if not math.isfinite(report.L):
        culprit = ag.Tape.record(loss).first_nan()
        where = culprit.op if culprit is not None else "unknown operation"
        raise NumericalError(f"non-finite loss at step {store.step}; first NaN produced by {where}")
    ag.backward(loss)
    lr = cfg.rate_at(store.step) if learning_rate is None else learning_rate
    nn.adamw_step(store, lr=lr, weight_decay=cfg.weight_decay, clear_grad=True)
    return report


def epoch_plan(dataset: Sequence[GlobalPoseSequence], batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Shuffled mini-batches of scene indices; each batch shares one agent count."""
    order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, epoch))).permutation(len(dataset))
    buckets: dict[int, list[int]] = {}
    for i in order:
        buckets.setdefault(dataset[i].num_agents, []).append(int(i))
    chunks = [b[k:k + batch_size] for b in buckets.values() for k in range(0, len(b), batch_size)]
    position = {int(i): p for p, i in enumerate(order)}
    return sorted(chunks, key=lambda c: position[c[0]])


@dataclass
class TraceRow:
    step: int
    L_Tr: float
    L_Po: float
    L: float
    histogram: tuple[int, ...]


@dataclass
class FitResult:
    model: Forecaster
    trace: list[TraceRow]


def write_trace(path: Path, rows: Sequence[TraceRow], modes: int, append: bool = False) -> None:
    new = not (append and path.exists())
    with open(path, "a" if not new else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "L_Tr", "L_Po", "L"] + [f"wins_mode{k}" for k in range(modes)])
        for r in rows:
            w.writerow([r.step, repr(r.L_Tr), repr(r.L_Po), repr(r.L), *r.histogram])


def read_trace(path: str | Path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [TraceRow(int(r[0]), float(r[1]), float(r[2]), float(r[3]), tuple(int(x) for x in r[4:])) for r in rows]


def _checkpoint_config(model: Forecaster, cfg: TrainConfig) -> dict:
    return {"model": model.cfg.to_dict(), "train": cfg.to_dict()}


def save_model(path: str | Path, model: Forecaster, cfg: TrainConfig | None = None) -> None:
    config = {"model": model.cfg.to_dict()}
    if cfg is not None:
        config["train"] = cfg.to_dict()
    nn.save_checkpoint(path, model.store, config)


def load_model(path: str | Path) -> tuple[Forecaster, dict]:
    store, meta = nn.load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["config"]["model"])
    return Forecaster(cfg, store), meta


def fit(dataset: Sequence[GlobalPoseSequence], cfg: TrainConfig, model: Forecaster | None = None,
        out_dir: str | Path | None = None, resume: str | Path | None = None,
        log_every: int = 0) -> FitResult:
    """Train for ``cfg.steps`` optimizer steps in total (counting resumed ones).

    The batch at global step ``s`` and its dropout draws depend only on
    ``(seed, s)``, so resuming from a checkpoint continues an unbroken run exactly.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training dataset is empty")
    if resume is not None:
        model, _ = load_model(resume)
    elif model is None:
        model = Forecaster(ModelConfig.from_scenario(cfg.scenario), seed=cfg.seed)
    mcfg = model.cfg
    span = mcfg.past_steps + mcfg.future_steps
    short = [s.scene_id for s in dataset if s.num_frames < span]
    if short:
        raise ValueError(f"scenes shorter than {span} frames: {short[:5]}")
    windows = [s.frames(0, span) for s in dataset]
    start = model.store.step
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        trace_path = out / TRACE_NAME
        if trace_path.exists():
            # keep only rows that precede the first step of this run
            kept = [r for r in read_trace(trace_path) if r.step < start] if resume is not None else []
            trace_path.unlink()
            write_trace(trace_path, kept, mcfg.modes, append=True)

    plans: dict[int, list[list[int]]] = {}
    per_epoch = len(epoch_plan(windows, cfg.batch_size, cfg.seed, 0))
    trace: list[TraceRow] = []
    pending: list[TraceRow] = []
    for step in range(start, cfg.steps):
        epoch, slot = divmod(step, per_epoch)
        if epoch not in plans:
            plans = {epoch: epoch_plan(windows, cfg.batch_size, cfg.seed, epoch)}
        batch = batch_from_scenes([windows[i] for i in plans[epoch][slot]], mcfg)
        report = train_step(model, batch, cfg)
        row = TraceRow(step, report.L_Tr, report.L_Po, report.L, tuple(report.histogram(mcfg.modes).tolist()))
        trace.append(row)
        pending.append(row)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d  L=%.4f  L_Tr=%.4f  L_Po=%.4f", step + 1, row.L, row.L_Tr, row.L_Po)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            write_trace(out / TRACE_NAME, pending, mcfg.modes, append=True)
            pending = []
            nn.save_checkpoint(out / f"checkpoint_{step + 1:06d}.npz", model.store, _checkpoint_config(model, cfg))
    if out is not None:
        write_trace(out / TRACE_NAME, pending, mcfg.modes, append=True)
        nn.save_checkpoint(out / CHECKPOINT_NAME, model.store, _checkpoint_config(model, cfg))
    return FitResult(model, trace)
