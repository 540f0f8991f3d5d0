"""Temporal encoder, aggregator, mode spanning, trajectory head and pose decoder."""

import numpy as np
import pytest

from t2p import autograd as ag
from t2p import model as M
from t2p.interaction import trajectory_features
from t2p.motion import apply_se2
from t2p.pose_decoder import compose, decode_poses, make_bundle
from t2p.pose_encoder import frequency_channels
from t2p.traj_decoder import aggregate, edge_attributes, span_modes, temporal_encode, trajectory_head
from conftest import tiny_config, walking_scene
from gradcheck import TOL, check_params

CFG = tiny_config()


def setup(rng, agents=3, cfg=CFG, seed=0):
    store = M.init_params(cfg, seed)
    scene = walking_scene(rng, agents)
    return store, scene, M.batch_from_scenes([scene], cfg)


def stages(store, batch, cfg=CFG):
    pose = M.encode_pose(store, batch, cfg)
    z, _, _ = M.encode_interaction(store, batch, pose, cfg)
    summary = temporal_encode(store, z, None, cfg.temporal_layers, cfg.heads, cfg.d_k, 0.0)
    agg = aggregate(store, summary, batch.feats, cfg.interaction_radius)
    latents = span_modes(store, agg, summary, cfg.modes)
    return pose, z, summary, agg, latents


class TestTemporalEncoder:
    def test_fully_masked_is_token_only(self, rng):
        store = M.init_params(CFG)
        valid = np.zeros((1, 2, 5), bool)
        a = temporal_encode(store, ag.Tensor(rng.normal(size=(1, 2, 5, 12))), valid, 1, 2, 4, 0.0).data
        b = temporal_encode(store, ag.Tensor(rng.normal(size=(1, 2, 5, 12))), valid, 1, 2, 4, 0.0).data
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a[0, 0], a[0, 1])

    def test_agent_permutation(self, rng):
        store = M.init_params(CFG)
        z = rng.normal(size=(1, 3, 5, 12))
        a = temporal_encode(store, ag.Tensor(z), None, 1, 2, 4, 0.0).data
        b = temporal_encode(store, ag.Tensor(z[:, [2, 0, 1]]), None, 1, 2, 4, 0.0).data
        np.testing.assert_allclose(a[:, [2, 0, 1]], b, atol=1e-15)

    def test_gradient(self, rng):
        store = M.init_params(CFG)
        z = rng.normal(size=(1, 2, 5, 12))
        w = rng.normal(size=(1, 2, 12))
        loss = lambda: ag.tsum(temporal_encode(store, ag.Tensor(z), None, 1, 2, 4, 0.0) * w)
        names = [n for n in store.names() if n.startswith("temporal.")]
        err, name = check_params(store, loss, rng, per_param=2, names=names)
        assert err < TOL, name


class TestAggregator:
    def test_single_agent_takes_empty_path(self, rng):
        store, _, batch = setup(rng, agents=1)
        summary = ag.Tensor(rng.normal(size=(1, 1, 12)))
        out = aggregate(store, summary, batch.feats).data
        x = summary.data
        g = 1 / (1 + np.exp(-(np.concatenate([x, 0 * x], -1) @ store["aggr.attn.gate.w"] + store["aggr.attn.gate.b"])))
        np.testing.assert_allclose(out, g * (x @ store["aggr.attn.self.w"]), atol=1e-14)

    def test_swap_equivariance(self, rng):
        store, scene, batch = setup(rng, agents=2)
        summary = rng.normal(size=(1, 2, 12))
        a = aggregate(store, ag.Tensor(summary), batch.feats).data
        swapped = M.batch_from_scenes([type(scene)(scene.positions[::-1], ("x", "y"))], CFG)
        b = aggregate(store, ag.Tensor(summary[:, ::-1]), swapped.feats).data
        np.testing.assert_allclose(a[:, ::-1], b, atol=1e-14)

    def test_edge_attributes(self):
        hips = np.zeros((1, 2, 3, 3))
        hips[0, 0, :, 0] = [0.0, 1.0, 2.0]  # agent 0 walks +x to (2, 0)
        hips[0, 1, :, 1] = [0.0, 1.0, 2.0]  # agent 1 walks +y to (0, 2)
        attrs = edge_attributes(trajectory_features(hips))
        np.testing.assert_allclose(attrs[0, 0, 1], [-2.0, 2.0, 0.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(attrs[0, 1, 0], [-2.0, -2.0, 0.0, -1.0], atol=1e-15)

    def test_se2_invariance(self, rng):
        store, scene, batch = setup(rng)
        moved = M.batch_from_scenes([apply_se2(scene, 2.1, (4.0, -7.5))], CFG)
        summary = ag.Tensor(rng.normal(size=(1, 3, 12)))
        np.testing.assert_allclose(aggregate(store, summary, batch.feats).data,
                                   aggregate(store, summary, moved.feats).data, atol=1e-9)


class TestModeSpanning:
    def test_single_mode(self, rng):
        store = M.init_params(tiny_config(modes=1))
        out = span_modes(store, ag.Tensor(rng.normal(size=(1, 3, 12))), ag.Tensor(rng.normal(size=(1, 3, 12))), 1)
        assert out.shape == (1, 1, 3, 12)

    def test_zero_mlp_is_residual_identity(self, rng):
        store = M.init_params(CFG)
        store["span.w2"][...] = 0.0
        base = rng.normal(size=(1, 3, 12))
        out = span_modes(store, ag.Tensor(rng.normal(size=(1, 3, 12))), ag.Tensor(base), 3).data
        for f in range(3):
            np.testing.assert_array_equal(out[f], base)

    def test_modes_use_own_weights(self, rng):
        store = M.init_params(CFG)
        agg, base = ag.Tensor(rng.normal(size=(1, 3, 12))), ag.Tensor(rng.normal(size=(1, 3, 12)))
        a = span_modes(store, agg, base, 3).data
        store["span.w1"][1] += 1.0
        b = span_modes(store, agg, base, 3).data
        np.testing.assert_array_equal(a[[0, 2]], b[[0, 2]])
        assert not np.array_equal(a[1], b[1])


class TestTrajectoryHead:
    def test_shape_and_zero_output_anchor(self, rng):
        store, scene, batch = setup(rng)
        _, _, _, agg, latents = stages(store, batch)
        traj = trajectory_head(store, latents, agg, batch.feats, CFG.future_steps).data
        assert traj.shape == (3, 1, 3, 8, 3)
        store["traj_head.1.w"][...] = 0.0
        store["traj_head.1.b"][...] = 0.0
        frozen = trajectory_head(store, latents, agg, batch.feats, CFG.future_steps).data
        last = scene.positions[:, CFG.past_steps - 1, 0]
        np.testing.assert_array_equal(frozen, np.broadcast_to(last[None, None, :, None], frozen.shape))

    def test_z_is_a_free_channel(self, rng):
        store, _, batch = setup(rng)
        _, _, _, agg, latents = stages(store, batch)
        store["traj_head.1.b"][...] = 0.0
        store["traj_head.1.b"][2::3] = 0.5
        store["traj_head.1.w"][...] = 0.0
        traj = trajectory_head(store, latents, agg, batch.feats, CFG.future_steps).data
        np.testing.assert_allclose(traj[..., 2] - batch.feats.origins[None, :, :, None, 2], 0.5, atol=1e-15)


class TestPoseDecoder:
    def decode(self, store, batch, pose, latents):
        base = frequency_channels(batch.local_agent, CFG.future_steps)
        return decode_poses(store, pose, latents, base, batch.feats, CFG.past_steps, 0, layers=1, heads=2, d_k=4,
                            dropout_rate=0.0)

    def test_shape_and_zero_hip(self, rng):
        store, _, batch = setup(rng)
        pose, _, _, _, latents = stages(store, batch)
        local = self.decode(store, batch, pose, latents).data
        assert local.shape == (3, 1, 3, 8, 15, 3)
        assert not local[..., 0, :].any()

    def test_zero_head_holds_last_pose(self, rng):
        store, scene, batch = setup(rng)
        pose, _, _, _, latents = stages(store, batch)
        store["pose_dec.head.2.w"][...] = 0.0
        store["pose_dec.head.2.b"][...] = 0.0
        local = self.decode(store, batch, pose, latents).data
        last = scene.positions[:, CFG.past_steps - 1]
        last = last - last[:, :1]
        np.testing.assert_allclose(local, np.broadcast_to(last[None, None, :, None], local.shape), atol=1e-12)

    def test_conditioning_is_live(self, rng):
        store, _, batch = setup(rng)
        pose, _, _, _, latents = stages(store, batch)
        lat = ag.Tensor(latents.data, requires_grad=True)
        ag.backward(ag.tsum(ag.square(self.decode(store, batch, pose, lat))))
        assert np.linalg.norm(lat.grad) > 1e-6
        bumped = latents.data.copy()
        bumped[1] += 0.1
        a = self.decode(store, batch, pose, latents).data
        b = self.decode(store, batch, pose, ag.Tensor(bumped)).data
        np.testing.assert_array_equal(a[[0, 2]], b[[0, 2]])
        assert np.abs(a[1] - b[1]).max() > 0


class TestCompose:
    def test_matches_loop_oracle(self, rng):
        traj, local = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 2, 3, 4, 3))
        out = compose(traj, local)
        ref = np.empty_like(local)
        for f, n, t, j in np.ndindex(local.shape[:-1]):
            ref[f, n, t, j] = traj[f, n, t] + local[f, n, t, j]
        np.testing.assert_array_equal(out, ref)

    def test_zero_local_rides_trajectory(self, rng):
        traj = rng.normal(size=(2, 1, 3, 3))
        bundle = make_bundle(traj, np.zeros((2, 1, 3, 15, 3)))
        np.testing.assert_array_equal(bundle.composed, np.broadcast_to(traj[..., None, :], bundle.composed.shape))
        assert bundle.modes == 2

    def test_hip_channel_equals_trajectory(self, rng):
        local = rng.normal(size=(1, 2, 3, 15, 3))
        local[..., 0, :] = 0.0
        traj = rng.normal(size=(1, 2, 3, 3))
        np.testing.assert_array_equal(compose(traj, local)[..., 0, :], traj)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compose(np.zeros((2, 1, 3, 3)), np.zeros((2, 1, 4, 15, 3)))


class TestBlockGradients:
    def test_decoders(self, rng):
        store, _, batch = setup(rng, agents=2)
        w = rng.normal(size=(3, 1, 2, 8, 15, 3))

        def loss():
            pose, _, _, agg, latents = stages(store, batch)
            traj = trajectory_head(store, latents, agg, batch.feats, CFG.future_steps)
            local = self.decode_all(store, batch, pose, latents)
            return ag.tsum((ag.expand_dims(traj, -2) + local) * w)

        names = [n for n in store.names() if n.split(".")[0] in ("aggr", "span", "traj_head", "pose_dec")]
        err, name = check_params(store, loss, rng, per_param=2, names=names)
        assert err < TOL, name

    @staticmethod
    def decode_all(store, batch, pose, latents):
        base = frequency_channels(batch.local_agent, CFG.future_steps)
        return decode_poses(store, pose, latents, base, batch.feats, CFG.past_steps, 0, layers=1, heads=2, d_k=4,
                            dropout_rate=0.0)
