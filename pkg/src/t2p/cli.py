"""Command line: synth, extract, train, predict and eval.

Every command takes ``--config FILE`` (plain ``key = value`` lines, ``#``
comments); flags override file values, unknown keys are rejected, and the
effective configuration is written as ``config.txt`` into the output directory.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import extract as gmp
from . import metrics, synth, training
from .autograd import NumericalError
from .model import Forecaster, ModelConfig
from .motion import GlobalPoseSequence, ScenarioConfig, SceneFileError, read_scenes, write_scenes
from .pose_decoder import ForecastBundle, make_bundle

log = logging.getLogger("t2p")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ----------------------------------------------------------------------------
# key=value configuration


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _radius(text: str) -> float | None:
    low = text.strip().lower()
    if low in ("none", "inf", "unbounded", ""):
        return None
    value = float(low)
    if value <= 0:
        raise ValueError("radius must be positive")
    return value


def _times(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in str(text).split(",") if t.strip())


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() == "none" else int(text)


SCENARIO_KEYS: dict[str, Callable] = {"seed": int, "modes": int, "radius": _radius, "tp": int, "tf": int}

SCHEMAS: dict[str, dict[str, Callable]] = {
    "synth": {"seed": int, "count": int, "agents": int, "frames": int, "frame_rate": float, "style": str,
              "avoidance": float, "fork_frame": int},
    "extract": {"seed": int, "tau": float, "max_range": float, "min_agents": int, "stride_frames": int,
                "window_frames": int, "frame_rate": float, "camera_count": _opt_int, "tp": int, "tf": int},
    "train": {**SCENARIO_KEYS, "steps": int, "batch_size": int, "learning_rate": float, "weight_decay": float,
              "warmup_steps": int, "cosine_decay": _bool, "checkpoint_every": int, "independent_modes": _bool,
              "dropout": float, "dct_keep": _opt_int, "use_pose_embedding": _bool, "condition_on_trajectory": _bool,
              "log_every": int},
    "predict": {"seed": int},
    "eval": {"seed": int, "eval_at": _times, "plot": _bool},
}

DEFAULTS: dict[str, dict] = {
    "synth": {"seed": 0, "count": 10, "agents": 3, "frames": 30, "frame_rate": 10.0, "style": "straight",
              "avoidance": 1.0, "fork_frame": 10},
    "extract": {"seed": 0, "tau": 20.0, "max_range": 4.5, "min_agents": 3, "stride_frames": 15,
                "window_frames": None, "frame_rate": 10.0, "camera_count": None, "tp": 10, "tf": 20},
    "train": {"seed": 0, "modes": 6, "radius": None, "tp": 10, "tf": 20, "steps": 1000, "batch_size": 4,
              "learning_rate": 0.003, "weight_decay": 0.01, "warmup_steps": 0, "cosine_decay": False,
              "checkpoint_every": 0, "independent_modes": False, "dropout": 0.2, "dct_keep": None,
              "use_pose_embedding": True, "condition_on_trajectory": True, "log_every": 50},
    "predict": {"seed": 0},
    "eval": {"seed": 0, "eval_at": (1.0, 2.0), "plot": False},
}


def read_config(path: str | Path, schema: dict[str, Callable]) -> dict:
    """Parse ``key = value`` lines against ``schema``; unknown keys are a usage error."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in schema:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = schema[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return out


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def effective_config(command: str, args: argparse.Namespace) -> dict:
    schema = SCHEMAS[command]
    cfg = dict(DEFAULTS[command])
    if args.config:
        cfg.update(read_config(args.config, schema))
    for key in schema:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def echo_config(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = f"# t2p {command}\n" + "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(cfg.items()))
    (out / "config.txt").write_text(text)
    sys.stdout.write(text)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("T2P_THREADS", "1")))
    except ValueError:
        return 1


# ----------------------------------------------------------------------------
# scene I/O helpers


def scene_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.jsonl"))
    elif path.exists():
        files = [path]
    else:
        raise DataError(f"no such file or directory: {path}")
    if not files:
        raise DataError(f"no scene files (*.jsonl) in {path}")
    return files


def load_scenes(path: Path) -> list[GlobalPoseSequence]:
    scenes = []
    for f in scene_files(path):
        scenes.extend(read_scenes(f))
    return scenes


def bundle_to_json(scene_id: str, bundle: ForecastBundle, frame_rate: float, past_steps: int) -> dict:
    return {"scene_id": scene_id, "modes": bundle.modes, "frame_rate": frame_rate, "past_steps": past_steps,
            "trajectories": bundle.trajectories.tolist(), "local": bundle.local.tolist()}


def bundle_from_json(obj: dict) -> ForecastBundle:
    return make_bundle(np.array(obj["trajectories"], dtype=np.float64), np.array(obj["local"], dtype=np.float64))


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: dict) -> int:
    out = Path(args.out)
    spec = synth.SynthSpec(agent_count=cfg["agents"], frames=cfg["frames"], frame_rate=cfg["frame_rate"],
                           style=cfg["style"], avoidance=cfg["avoidance"], seed=cfg["seed"],
                           fork_frame=cfg["fork_frame"])
    echo_config(out, "synth", cfg)
    if spec.style == "bimodal-fork":
        pairs = synth.generate_bimodal(spec, cfg["count"])
        scenes = [s for s, _ in pairs]
        (out / "labels.json").write_text(json.dumps({s.scene_id: lab for s, lab in pairs}, indent=1))
    else:
        scenes = synth.generate_many(spec, cfg["count"])
    for i, scene in enumerate(scenes):
        write_scenes(out / f"scene_{i:05d}.jsonl", [scene])
    log.info("wrote %d scenes to %s", len(scenes), out)
    return EXIT_OK


def cmd_extract(args, cfg: dict) -> int:
    out = Path(args.out)
    window = cfg["window_frames"] or cfg["tp"] + cfg["tf"]
    ecfg = gmp.ExtractionConfig(tau=cfg["tau"], max_range=cfg["max_range"], min_agents=cfg["min_agents"],
                                stride_frames=cfg["stride_frames"], window_frames=window,
                                frame_rate=cfg["frame_rate"], camera_count=cfg["camera_count"])
    try:
        scene = gmp.load_inputs(args.inputs)
        windows, report = gmp.extract(scene, ecfg)
    except (gmp.ExtractionInputError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    echo_config(out, "extract", {**cfg, "window_frames": window})
    for i, w in enumerate(windows):
        write_scenes(out / f"scene_{i:05d}.jsonl", [w])
    (out / "extraction_report.json").write_text(json.dumps(report.to_json(), indent=2))
    log.info("extracted %d windows; report in %s", len(windows), out / "extraction_report.json")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    out = Path(args.out)
    scenes = load_scenes(Path(args.data))
    scenario = ScenarioConfig(cfg["tp"], cfg["tf"], cfg["modes"], cfg["radius"])
    tcfg = training.TrainConfig(learning_rate=cfg["learning_rate"], weight_decay=cfg["weight_decay"],
                                steps=cfg["steps"], batch_size=cfg["batch_size"], seed=cfg["seed"],
                                checkpoint_every=cfg["checkpoint_every"], warmup_steps=cfg["warmup_steps"],
                                cosine_decay=cfg["cosine_decay"], independent_modes=cfg["independent_modes"],
                                scenario=scenario)
    model = None
    if args.resume is None:
        mcfg = ModelConfig.from_scenario(scenario, dropout=cfg["dropout"], dct_keep=cfg["dct_keep"],
                                         use_pose_embedding=cfg["use_pose_embedding"],
                                         condition_on_trajectory=cfg["condition_on_trajectory"])
        model = Forecaster(mcfg, seed=cfg["seed"])
    echo_config(out, "train", cfg)
    try:
        result = training.fit(scenes, tcfg, model, out_dir=out, resume=args.resume, log_every=cfg["log_every"])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    last = result.trace[-1] if result.trace else None
    if last is not None:
        log.info("finished at step %d, L=%.4f", last.step + 1, last.L)
    return EXIT_OK


def _forecast(model: Forecaster, scenes: list[GlobalPoseSequence]) -> list[ForecastBundle]:
    tp = model.cfg.past_steps
    for s in scenes:
        if s.num_frames < tp:
            raise DataError(f"scene {s.scene_id!r} has {s.num_frames} frames, needs {tp} observed")
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        return list(pool.map(lambda s: model.predict_past(s.positions[:, :tp]), scenes))


def _load_model(path: str) -> Forecaster:
    try:
        model, _ = training.load_model(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    return model


def cmd_predict(args, cfg: dict) -> int:
    model = _load_model(args.checkpoint)
    scenes = load_scenes(Path(args.scenes))
    bundles = _forecast(model, scenes)
    out = Path(args.out)
    echo_config(out, "predict", {**cfg, "checkpoint": args.checkpoint, "scenes": args.scenes})
    with open(out / "forecast.jsonl", "w") as fh:
        for s, b in zip(scenes, bundles):
            fh.write(json.dumps(bundle_to_json(s.scene_id, b, s.frame_rate, model.cfg.past_steps)) + "\n")
    log.info("wrote %d forecasts to %s", len(bundles), out / "forecast.jsonl")
    return EXIT_OK


def _read_forecasts(path: Path) -> list[dict]:
    if not path.exists():
        raise DataError(f"forecast file {path} not found")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
    return rows


def plot_report(path: Path, agg: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    keys = list(agg)
    ts = [float(k[:-1]) for k in keys]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for m in ("jpe", "ape", "fde"):
        ax.plot(ts, [agg[k][m] for k in keys], marker="o", label=m.upper())
    ax.set_xlabel("time (s)")
    ax.set_ylabel("error (mm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_eval(args, cfg: dict) -> int:
    scenes = load_scenes(Path(args.scenes))
    by_id = {s.scene_id: s for s in scenes}
    if args.forecast:
        rows = _read_forecasts(Path(args.forecast))
        if not rows:
            raise DataError(f"forecast file {args.forecast} is empty")
        items = []
        for r in rows:
            if r["scene_id"] not in by_id:
                raise DataError(f"forecast for unknown scene {r['scene_id']!r}")
            items.append((by_id[r["scene_id"]], bundle_from_json(r), int(r["past_steps"])))
    elif args.checkpoint:
        model = _load_model(args.checkpoint)
        items = [(s, b, model.cfg.past_steps) for s, b in zip(scenes, _forecast(model, scenes))]
    else:
        raise UsageError("eval needs --forecast FILE or --checkpoint FILE")
    reports = []
    for scene, bundle, tp in items:
        tf = bundle.trajectories.shape[-2]
        gt = scene.positions[:, tp:tp + tf]
        if gt.shape[1] != tf:
            raise DataError(f"scene {scene.scene_id!r} lacks {tf} future frames for evaluation")
        try:
            reports.append(metrics.evaluate(bundle, gt, cfg["eval_at"], scene.frame_rate, scene_id=scene.scene_id))
        except IndexError as exc:
            raise UsageError(str(exc)) from exc
    out = Path(args.out)
    echo_config(out, "eval", cfg)
    doc = metrics.write_report(out / "metrics.json", reports)
    if cfg["plot"]:
        plot_report(out / "metrics.png", doc["aggregate"])
    for k, v in doc["aggregate"].items():
        log.info("%s  JPE %.1f  APE %.1f  FDE %.1f (mm)", k, v["jpe"], v["ape"], v["fde"])
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="t2p", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, scenario=False):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")
        if scenario:
            sp.add_argument("--modes", type=int)
            sp.add_argument("--radius", type=_radius)
            sp.add_argument("--tp", type=int)
            sp.add_argument("--tf", type=int)

    sp = sub.add_parser("synth", help="generate synthetic scenes")
    common(sp)
    sp.add_argument("--count", type=int)
    sp.add_argument("--style", choices=synth.STYLES)

    sp = sub.add_parser("extract", help="build scenes from camera detections")
    sp.add_argument("inputs", help="directory with detections/annotations/boxes/cameras .jsonl files")
    common(sp)
    sp.add_argument("--tp", type=int)
    sp.add_argument("--tf", type=int)
    sp.add_argument("--tau", type=float)

    sp = sub.add_parser("train", help="train a forecaster")
    sp.add_argument("data", help="scene file or directory of scene files")
    common(sp, scenario=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = sub.add_parser("predict", help="forecast scenes with a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("scenes", help="scene file or directory")
    common(sp)

    sp = sub.add_parser("eval", help="score forecasts against ground truth")
    sp.add_argument("scenes", help="ground-truth scene file or directory")
    common(sp)
    sp.add_argument("--forecast", help="forecast.jsonl from predict")
    sp.add_argument("--checkpoint", help="forecast on the fly with this checkpoint")
    sp.add_argument("--eval-at", dest="eval_at", type=_times, help="comma-separated seconds, e.g. 1.0,2.0")
    sp.add_argument("--plot", action="store_const", const=True, help="also write metrics.png")
    return p


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        cfg = effective_config(args.command, args)
        started = time.perf_counter()
        code = COMMANDS[args.command](args, cfg)
        log.debug("%s took %.2fs", args.command, time.perf_counter() - started)
        return code
    except UsageError as exc:
        print(f"t2p {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SceneFileError, OSError) as exc:
        print(f"t2p {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"t2p {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # invalid option values that only the library can judge (e.g. an unknown style)
        print(f"t2p {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
