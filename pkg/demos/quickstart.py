"""Generate a few synthetic scenes, train a small forecaster briefly, and score it.

    python3 demos/quickstart.py

Takes under ten seconds on one core. The numbers are far from converged;
the point is the shape of the workflow.
"""

import numpy as np

from t2p import metrics, synth, training
from t2p.model import Forecaster, ModelConfig


def main():
    scenes = synth.generate_many(synth.SynthSpec(style="turn", seed=1), 8)
    print(f"{len(scenes)} scenes, {scenes[0].num_agents} agents, {scenes[0].num_frames} frames at 10 Hz")

    # narrow widths keep the demo quick
    cfg = ModelConfig(d_pose=64, d_traj=48, heads=4, d_k=16, pose_ff=128, temporal_ff=96, dropout=0.0)
    model = Forecaster(cfg, seed=0)
    print(f"model has {model.store.num_values():,} parameters")

    tcfg = training.TrainConfig(steps=150, batch_size=4, warmup_steps=20, cosine_decay=True)
    result = training.fit(scenes, tcfg, model)
    losses = [row.L for row in result.trace]
    print(f"loss {np.mean(losses[:10]):.1f} -> {np.mean(losses[-10:]):.1f} over {len(losses)} steps")

    # score every scene with its best mode at 1 s and 2 s
    tp, tf = cfg.past_steps, cfg.future_steps
    reports = [metrics.evaluate(result.model.predict(s), s.positions[:, tp:tp + tf], (1.0, 2.0), s.frame_rate)
               for s in scenes]
    for key, row in metrics.aggregate(reports).items():
        print(f"{key}: JPE {row['jpe']:.0f} mm  APE {row['ape']:.0f} mm  FDE {row['fde']:.0f} mm")


if __name__ == "__main__":
    main()
