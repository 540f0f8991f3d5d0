"""JPE / APE / FDE in millimeters with scene-level min-JPE mode selection.

Arrays follow the forecast layout: predictions and ground truth are
``(N, T_f, J, 3)`` world-frame meters; ``t`` is an index into the future block.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .pose_decoder import ForecastBundle

MM = 1000.0


def _check(pred: np.ndarray, gt: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if not 0 <= t < gt.shape[-3]:
        raise IndexError(f"timestep {t} outside horizon of {gt.shape[-3]} frames")
    return pred, gt


def time_to_index(seconds: float, frame_rate: float, horizon: int) -> int:
    """Future-block index of an evaluation time: ``floor(t * fps - 1)``."""
    # tolerate 0.3 * 10 = 2.9999999999999996 style products
    idx = math.floor(seconds * frame_rate - 1.0 + 1e-9)
    if not 0 <= idx < horizon:
        raise IndexError(f"t={seconds}s maps to frame {idx}, outside horizon of {horizon} frames")
    return idx


def jpe(pred, gt, t: int) -> float:
    """Mean joint distance over agents and joints at future step ``t``, mm."""
    pred, gt = _check(pred, gt, t)
    return float(np.linalg.norm(pred[:, t] - gt[:, t], axis=-1).mean() * MM)


def ape(pred, gt, t: int, hip_index: int = 0) -> float:
    """JPE after subtracting each frame's hip from both sequences, mm."""
    pred, gt = _check(pred, gt, t)
    p = pred[:, t] - pred[:, t, hip_index:hip_index + 1]
    g = gt[:, t] - gt[:, t, hip_index:hip_index + 1]
    return float(np.linalg.norm(p - g, axis=-1).mean() * MM)


def fde(pred, gt, t: int, hip_index: int = 0) -> float:
    """Mean hip distance over agents at future step ``t``, mm."""
    pred, gt = _check(pred, gt, t)
    return float(np.linalg.norm(pred[:, t, hip_index] - gt[:, t, hip_index], axis=-1).mean() * MM)


def mode_errors(composed: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Scene-level JPE of every mode, averaged over agents, steps and joints, mm."""
    composed = np.asarray(composed, dtype=np.float64)
    if composed.shape[1:] != np.shape(gt):
        raise ValueError(f"forecast shape {composed.shape} does not match ground truth {np.shape(gt)}")
    return np.linalg.norm(composed - gt, axis=-1).mean(axis=(1, 2, 3)) * MM


def select_mode(bundle: ForecastBundle, gt) -> int:
    """Index of the mode with the lowest scene-level JPE; ties go to the lowest index."""
    return int(np.argmin(mode_errors(bundle.composed, gt)))


def timestamp_key(seconds: float) -> str:
    return f"{float(seconds)}s"


@dataclass
class MetricReport:
    scene_id: str
    selected_mode: int
    timestamps: tuple[float, ...]
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id, "selected_mode": self.selected_mode, "metrics": self.metrics}


def evaluate(bundle: ForecastBundle, gt, timestamps: Sequence[float], frame_rate: float,
             hip_index: int = 0, scene_id: str = "") -> MetricReport:
    """Score one scene's forecast with its min-JPE mode at each timestamp (seconds)."""
    gt = np.asarray(gt, dtype=np.float64)
    k = select_mode(bundle, gt)
    pred = bundle.composed[k]
    out = {}
    for ts in timestamps:
        t = time_to_index(ts, frame_rate, gt.shape[1])
        out[timestamp_key(ts)] = {"jpe": jpe(pred, gt, t), "ape": ape(pred, gt, t, hip_index),
                                  "fde": fde(pred, gt, t, hip_index)}
    return MetricReport(scene_id, k, tuple(float(s) for s in timestamps), out)


def aggregate(reports: Iterable[MetricReport]) -> dict[str, dict[str, float]]:
    """Per-timestamp means over scenes."""
    reports = list(reports)
    if not reports:
        return {}
    keys = reports[0].metrics.keys()
    return {k: {m: float(np.mean([r.metrics[k][m] for r in reports])) for m in ("jpe", "ape", "fde")}
            for k in keys}


def write_report(path: str | Path, reports: Sequence[MetricReport]) -> dict:
    doc = {"scenes": [r.to_json() for r in reports], "aggregate": aggregate(reports)}
    Path(path).write_text(json.dumps(doc, indent=2))
    return doc
