import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import euler_gaussian_moments, gaussian_rf_velocity

from t4dg.autodiff import Tensor, backward, ops
from t4dg.diffusion import (
    ConditioningSpec,
    Denoiser,
    DenoiserConfig,
    FlowSchedule,
    Gaussian1D,
    NonFiniteLoss,
    TrainConfig,
    cell_mask_for,
    from_latents,
    load_denoiser,
    rf_interpolate,
    rf_loss,
    rf_sample,
    sample_grid,
    save_denoiser,
    to_latents,
    toy_optimal_velocity,
    toy_transport,
    train_denoiser,
)
from t4dg.scenes import SceneConfig, generate_dataset

SMALL = dict(blocks=1, d=16, heads=2, compression_factor=2, patch=4, T_max=4)


def tiny(arch="fused", seed=0, **kw):
    return Denoiser(DenoiserConfig(arch=arch, **{**SMALL, **kw}), seed=seed)


def randomize(model, seed=1):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data[...] = rng.normal(0, 0.2, p.shape)
    return model


def latent_batch(seed=0, V=2, T=2, h=2, w=2, C=2 * 16 * 3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((1, V, T, h, w, C)).astype(np.float32)


class TestDenoiser:
    def test_zero_init_output(self):
        out = tiny()(latent_batch(), np.array([0.5]), None, None)
        assert np.all(out.data == 0)

    def test_empty_mask_ignores_cond(self):
        m = randomize(tiny())
        x = latent_batch(0)
        empty = np.zeros((1, 2, 2), bool)
        a = m(x, np.array([0.3]), latent_batch(1), empty).data
        b = m(x, np.array([0.3]), latent_batch(2), empty).data
        assert a.tobytes() == b.tobytes()

    def test_cond_matters_when_masked(self):
        m = randomize(tiny())
        x = latent_batch(0)
        mask = cell_mask_for("both", 2, 2)[None]
        a = m(x, np.array([0.3]), latent_batch(1), mask).data
        b = m(x, np.array([0.3]), latent_batch(2), mask).data
        assert np.abs(a - b).max() > 1e-4

    @pytest.mark.parametrize("arch", ["fused", "sequential", "parallel"])
    def test_sparse_matches_dense_impl(self, arch):
        sparse = randomize(tiny(arch, attn_impl="sparse"))
        dense = tiny(arch, attn_impl="dense")
        dense.load_state_dict(sparse.state_dict())
        x, tau = latent_batch(3), np.array([0.7])
        np.testing.assert_allclose(sparse(x, tau, None, None).data, dense(x, tau, None, None).data, atol=1e-5)

    def test_parallel_has_more_parameters(self):
        counts = {a: tiny(a).num_parameters() for a in ("fused", "sequential", "parallel")}
        assert counts["parallel"] > counts["fused"]
        assert counts["sequential"] >= counts["fused"]

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            tiny()(np.zeros((1, 2, 2, 2, 2, 5), np.float32), np.array([0.5]), None, None)

    def test_checkpoint_round_trip(self, tmp_path):
        m = randomize(tiny("parallel"))
        save_denoiser(tmp_path / "d.t4dg", m)
        back = load_denoiser(tmp_path / "d.t4dg")
        assert back.cfg == m.cfg
        x = latent_batch(4)
        assert back(x, np.array([0.2]), None, None).data.tobytes() == m(x, np.array([0.2]), None, None).data.tobytes()


class TestLatents:
    def test_round_trip(self):
        frames = np.random.default_rng(0).uniform(size=(2, 4, 8, 8, 3)).astype(np.float32)
        np.testing.assert_allclose(from_latents(to_latents(frames, 2, 4), 2, 4), frames, atol=1e-6)

    def test_mask_patterns(self):
        np.testing.assert_array_equal(cell_mask_for("fixed", 2, 3), [[1, 1, 1], [0, 0, 0]])
        np.testing.assert_array_equal(cell_mask_for("freeze", 2, 3), [[1, 0, 0], [1, 0, 0]])
        np.testing.assert_array_equal(cell_mask_for("both", 2, 3), [[1, 1, 1], [1, 0, 0]])
        with pytest.raises(ValueError):
            cell_mask_for("diagonal", 2, 2)


class TestObjective:
    def test_interpolation_endpoints(self):
        rng = np.random.default_rng(0)
        clean, eps = rng.standard_normal((2, 3, 4)).astype(np.float32)
        np.testing.assert_array_equal(rf_interpolate(clean, eps, 0.0), clean)
        np.testing.assert_array_equal(rf_interpolate(clean, eps, 1.0), eps)

    def test_perfect_oracle_gives_zero_loss(self):
        rng = np.random.default_rng(1)
        clean = latent_batch(5)
        eps = rng.standard_normal(clean.shape).astype(np.float32)
        oracle = lambda x, tau, cond, mask: Tensor(eps - clean)
        loss = rf_loss(oracle, clean, np.zeros((1, 2, 2), bool), rng, tau=np.array([0.4], np.float32), eps=eps)
        assert loss.item() == 0.0

    def test_conditioned_cells_are_unsupervised(self):
        clean = latent_batch(6)
        mask = cell_mask_for("fixed", 2, 2)[None]
        eps = np.zeros_like(clean)
        target = eps - clean

        def model(x, tau, cond, m):
            out = target.copy()
            out[:, 0] += 100.0  # garbage on the conditioned view only
            return Tensor(out)

        assert rf_loss(model, clean, mask, 0, tau=np.array([0.5], np.float32), eps=eps).item() == 0.0

    def test_all_conditioned_raises(self):
        with pytest.raises(ValueError):
            rf_loss(lambda *a: Tensor(a[0]), latent_batch(), np.ones((1, 2, 2), bool), 0)


class TestSampler:
    def test_zero_velocity_returns_noise(self):
        shape = (2, 3, 4)
        x, info = rf_sample(lambda x, t, c, m: np.zeros_like(x), shape, None, None, FlowSchedule(5), seed=3)
        np.testing.assert_array_equal(x, np.random.default_rng(3).standard_normal(shape).astype(np.float32))
        assert info["model_evals"] == 5

    def test_cfg_doubles_evaluations(self):
        calls = []

        def model(x, t, c, m):
            calls.append(None if m is None else m.copy())
            return np.zeros_like(x)

        mask = np.array([True, False])
        cond = np.ones((2, 3), np.float32)
        _, info = rf_sample(model, (2, 3), cond, mask, FlowSchedule(4, cfg_scale=2.0), 0)
        assert info["model_evals"] == 8 == len(calls)
        assert not calls[1].any()

    def test_guidance_formula(self):
        def model(x, t, c, m):
            return np.full_like(x, 1.0 if m.any() else 0.25)

        mask = np.array([False, True])
        cond = np.zeros((2, 1), np.float32)
        x, _ = rf_sample(model, (2, 1), cond, mask, FlowSchedule(1, cfg_scale=3.0), 0)
        x0 = np.random.default_rng(0).standard_normal((2, 1)).astype(np.float32)
        assert x[0, 0] == pytest.approx(x0[0, 0] - (0.25 + 3 * 0.75), abs=1e-6)

    def test_conditioned_cells_reimposed_exactly(self):
        m = randomize(tiny())
        sc = generate_dataset(1, 2, 4, seed=0, cfg=None)[0]
        frames = sc.images
        frames = frames.reshape(2, 4, 32, 32, 3)[:, :, :8, :8]
        cond = ConditioningSpec.from_grid(frames, "both", 2)
        out, info = sample_grid(m, frames, cond, (2, 4, 8, 8), FlowSchedule(3), seed=1)
        assert info["steps"] == 3
        np.testing.assert_allclose(out[0], frames[0], atol=1e-6)
        np.testing.assert_allclose(out[:, :2], frames[:, :2], atol=1e-6)

    def test_deterministic(self):
        m = randomize(tiny())
        frames = np.random.default_rng(2).uniform(size=(2, 4, 8, 8, 3)).astype(np.float32)
        cond = ConditioningSpec.from_grid(frames, "fixed", 2)
        a, _ = sample_grid(m, frames, cond, (2, 4, 8, 8), FlowSchedule(3), seed=5)
        b, _ = sample_grid(m, frames, cond, (2, 4, 8, 8), FlowSchedule(3), seed=5)
        assert a.tobytes() == b.tobytes()

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            FlowSchedule(0)
        with pytest.raises(ValueError):
            FlowSchedule(2, timesteps=np.array([1.0, 0.7, 0.8]))
        with pytest.raises(ValueError):
            FlowSchedule(2, cfg_scale=-1)


class TestToy:
    def test_optimal_velocity_endpoints(self):
        g = Gaussian1D(2.0, 0.5)
        # at tau=1 the best guess of x0 is the data mean, so v = x - mu
        np.testing.assert_allclose(toy_optimal_velocity(np.array([0.3]), 1.0, g), [0.3 - 2.0])

    def test_exact_velocity_single_step_lands_on_mean(self):
        g = Gaussian1D(2.0, 0.5)
        x, _ = rf_sample(lambda x, t, c, m: toy_optimal_velocity(x, t, g).astype(np.float32), (1000,), None, None, FlowSchedule(1), 0)
        assert abs(x.mean() - toy_transport(0.0, g)) <= 0.05 * g.mu

    @given(st.floats(-3, 3), st.floats(0.01, 0.99), st.floats(-2, 2), st.floats(0.1, 2))
    def test_optimal_velocity_matches_conditioning_oracle(self, x, tau, mu, sigma):
        g = Gaussian1D(mu, sigma)
        assert toy_optimal_velocity(x, tau, g) == pytest.approx(gaussian_rf_velocity(x, tau, mu, sigma), rel=1e-9, abs=1e-9)

    @pytest.mark.parametrize("steps", [1, 4, 40])
    def test_sampler_follows_moment_recurrence(self, steps):
        g = Gaussian1D(2.0, 0.5)
        x, _ = rf_sample(lambda x, t, c, m: toy_optimal_velocity(x, t, g).astype(np.float32), (200_000,), None, None, FlowSchedule(steps), 0)
        m, v = euler_gaussian_moments(g.mu, g.sigma, steps)
        assert x.mean() == pytest.approx(m, abs=0.01)
        assert x.var() == pytest.approx(v, rel=0.02, abs=1e-4)

    def test_forty_uniform_steps_shrink_variance(self):
        # the discretization floor that no trained velocity can beat
        _, v = euler_gaussian_moments(2.0, 0.5, 40)
        assert 0.92 < v / 0.25 < 0.94

    def test_exact_velocity_fine_steps_match_transport(self):
        g = Gaussian1D(2.0, 0.5)
        steps = FlowSchedule(400)
        x, _ = rf_sample(lambda x, t, c, m: toy_optimal_velocity(x, t, g).astype(np.float32), (20000,), None, None, steps, 0)
        assert abs(x.mean() - g.mu) < 0.01
        assert abs(x.var() / g.sigma**2 - 1) < 0.02


class TestTraining:
    def scenes(self):
        return [s.select_views([0, 1]) for s in generate_dataset(1, 2, 4, seed=0)]

    def test_lr_zero_leaves_parameters(self):
        cfg = DenoiserConfig(**{**SMALL, "patch": 8})
        model = Denoiser(cfg, seed=0)
        before = [p.data.copy() for p in model.parameters()]
        train_denoiser(self.scenes(), cfg, TrainConfig(iters=3, lr=0.0, log_every=0), model=model)
        assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))

    def test_deterministic_training(self):
        cfg = DenoiserConfig(**{**SMALL, "patch": 8})
        _, l1 = train_denoiser(self.scenes(), cfg, TrainConfig(iters=4, log_every=0))
        _, l2 = train_denoiser(self.scenes(), cfg, TrainConfig(iters=4, log_every=0))
        assert l1 == l2

    def test_non_finite_loss_aborts(self):
        cfg = DenoiserConfig(**{**SMALL, "patch": 8})
        model = Denoiser(cfg, seed=0)
        model.final.bias.data[:] = np.nan
        with pytest.raises(NonFiniteLoss):
            train_denoiser(self.scenes(), cfg, TrainConfig(iters=2, log_every=0), model=model)

    @pytest.mark.slow
    def test_overfit_single_scene(self):
        # token width (2*2*2*3 = 24) below d, so the noise can pass through the embedding
        scenes = [s.select_views([0, 1]) for s in generate_dataset(1, 2, 4, seed=0, cfg=SceneConfig(size=8))]
        cfg = DenoiserConfig(blocks=2, d=64, heads=2, compression_factor=2, patch=2, T_max=4)
        tc = TrainConfig(iters=2000, lr=1e-3, warmup=50, p_homography=0, p_static=0, p_uncond=0, reverse_views=False, log_every=0)
        _, losses = train_denoiser(scenes, cfg, tc)
        assert np.mean(losses[-100:]) < 0.1 * np.mean(losses[:20])
