"""Seeded synthetic scenes: determinism, styles, avoidance and bimodal forks."""

from dataclasses import replace

import numpy as np
import pytest

from t2p import synth
from t2p.motion import decompose


class TestGenerate:
    @pytest.mark.parametrize("style", synth.STYLES)
    def test_valid_and_deterministic(self, style):
        spec = synth.SynthSpec(style=style, seed=3, agent_count=4, frames=25)
        a, label = synth.generate(spec)
        b, _ = synth.generate(spec)
        assert a.positions.shape == (4, 25, 15, 3)
        assert np.isfinite(a.positions).all()
        np.testing.assert_array_equal(a.positions, b.positions)
        _, local = decompose(a, synth.skeleton())
        assert not local.offsets[..., 0, :].any()
        assert (label is not None) == (style == "bimodal-fork")

    def test_seeds_differ(self):
        a, _ = synth.generate(synth.SynthSpec(seed=1))
        b, _ = synth.generate(synth.SynthSpec(seed=2))
        assert not np.array_equal(a.positions, b.positions)

    def test_stationary_hips_still_pose_moves(self):
        scene, _ = synth.generate(synth.SynthSpec(style="stationary-gesture", seed=4))
        hips = scene.positions[:, :, 0, :2]
        np.testing.assert_array_equal(hips, np.broadcast_to(hips[:, :1], hips.shape))
        local = scene.positions - scene.positions[:, :, :1]
        assert np.ptp(local, axis=1).max() > 0.05

    def test_walkers_move_at_walking_speed(self):
        scene, _ = synth.generate(synth.SynthSpec(style="straight", seed=5, agent_count=1, avoidance=0.0))
        step = np.linalg.norm(np.diff(scene.positions[0, :, 0, :2], axis=0), axis=-1) * scene.frame_rate
        assert 0.9 < step.mean() < 1.5

    def test_head_on_pair_keeps_distance(self):
        start = np.array([[-3.0, 0.05], [3.0, -0.05]])
        desired = np.array([[0.0] * 60, [np.pi] * 60])
        speed = np.array([1.2, 1.2])
        xy = synth.simulate(start, speed[:, None] * np.array([[1.0, 0.0], [-1.0, 0.0]]), desired, speed, 10.0, 1.0)
        gap = np.linalg.norm(xy[0] - xy[1], axis=-1)
        assert gap.min() > 0.3
        assert xy[0, -1, 0] > 2.0 and xy[1, -1, 0] < -2.0
        ghost = synth.simulate(start, speed[:, None] * np.array([[1.0, 0.0], [-1.0, 0.0]]), desired, speed, 10.0, 0.0)
        assert np.linalg.norm(ghost[0] - ghost[1], axis=-1).min() < 0.2

    def test_many_ids_and_determinism(self):
        spec = synth.SynthSpec(seed=8)
        a = synth.generate_many(spec, 3)
        b = synth.generate_many(spec, 3)
        assert [s.scene_id for s in a] == ["straight-8-0", "straight-8-1", "straight-8-2"]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.positions, y.positions)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            synth.SynthSpec(agent_count=0)
        with pytest.raises(ValueError):
            synth.SynthSpec(style="dance")
        with pytest.raises(ValueError):
            synth.SynthSpec(style="bimodal-fork", frames=10, fork_frame=10)
        with pytest.raises(ValueError):
            synth.generate(synth.SynthSpec(), label="left")


class TestBimodal:
    SPEC = synth.SynthSpec(style="bimodal-fork", frames=30, fork_frame=10)

    def test_labels_balanced(self):
        labels = [lab for _, lab in synth.generate_bimodal(self.SPEC, 200)]
        assert abs(labels.count("left") - 100) <= 10

    def test_single_scene_one_label(self):
        out = synth.generate_bimodal(self.SPEC, 1)
        assert len(out) == 1 and out[0][1] in ("left", "right")

    def test_past_shared_and_future_diverges(self):
        spec = replace(self.SPEC, seed=21)
        left, _ = synth.generate(spec, "left")
        right, _ = synth.generate(spec, "right")
        np.testing.assert_array_equal(left.positions[:, :10], right.positions[:, :10])
        gap = np.linalg.norm(left.positions[:, -1, 0, :2] - right.positions[:, -1, 0, :2], axis=-1)
        assert gap.min() >= 1.0

    def test_past_statistics_match_across_labels(self):
        pairs = synth.generate_bimodal(self.SPEC, 200)

        def speed(scene):
            return np.linalg.norm(scene.positions[:, 9, 0, :2] - scene.positions[:, 0, 0, :2], axis=-1).mean()

        left = np.array([speed(s) for s, lab in pairs if lab == "left"])
        right = np.array([speed(s) for s, lab in pairs if lab == "right"])
        se = np.sqrt(left.var() / len(left) + right.var() / len(right))
        assert abs(left.mean() - right.mean()) < 4 * se

    def test_fork_turns_the_named_way(self):
        spec = replace(self.SPEC, seed=30)
        for label, sign in (("left", 1.0), ("right", -1.0)):
            scene, _ = synth.generate(spec, label)
            hip = scene.positions[:, :, 0, :2]
            before = hip[:, 9] - hip[:, 5]
            after = hip[:, -1] - hip[:, -5]
            cross = before[:, 0] * after[:, 1] - before[:, 1] * after[:, 0]
            assert (np.sign(cross) == sign).all()
