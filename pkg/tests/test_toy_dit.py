import numpy as np
import pytest
import torch

from selfcoherence.core import AttentionTensor, DimensionError
from selfcoherence.toy_dit.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from selfcoherence.toy_dit.dataset import (
    DatasetConfig,
    DatasetConfigError,
    coarse_prompt,
    make_dataset,
    shape_template,
)
from selfcoherence.toy_dit.model import HookShapeError, ModelConfig, build_model, forward, forward_batch
from selfcoherence.toy_dit.sampling import ddpm_update, initial_latent, sample
from selfcoherence.toy_dit.schedule import DiffusionSchedule
from selfcoherence.toy_dit.train import TrainResult, train

from helpers import gradient_check, tiny_model


class TestSchedule:
    def test_default_endpoints(self):
        s = DiffusionSchedule.linear(50)
        assert s.beta(1) == pytest.approx(1e-3)
        assert s.beta(50) == pytest.approx(0.25)
        assert s.alpha_bar(0) == 1.0
        assert 0 < s.alpha_bar(50) < 5e-3

    def test_alpha_bar_is_cumulative_product(self):
        s = DiffusionSchedule.linear(10)
        assert s.alpha_bar(3) == pytest.approx(s.alpha(1) * s.alpha(2) * s.alpha(3))

    def test_rejects_bad_betas(self):
        with pytest.raises(ValueError):
            DiffusionSchedule(np.array([0.1, 1.0]))


class TestModel:
    def test_deterministic_construction(self):
        a, b = tiny_model(seed=3), tiny_model(seed=3)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb and torch.equal(pa, pb)

    def test_map_shapes_and_row_sums(self):
        m = tiny_model(grid=(3, 5), blocks=2)
        z = np.random.default_rng(0).normal(size=(3, 5, 3))
        eps, maps = forward(m, z, 4, [0, 1, 2])
        assert eps.shape == (3, 5, 3)
        assert len(maps) == 2
        for n, amap in enumerate(maps):
            assert (amap.step, amap.layer, amap.shape) == (4, n, (3, 5, 3))
            np.testing.assert_allclose(amap.values.sum(-1), 1.0, atol=1e-5)

    def test_identity_hook_is_bitwise_neutral(self):
        m = tiny_model()
        z = np.random.default_rng(1).normal(size=(4, 4, 3))
        base, _ = forward(m, z, 5, [0, 1, 2, 3])
        hooked, _ = forward(m, z, 5, [0, 1, 2, 3], hook=lambda a: a)
        assert base.tobytes() == hooked.tobytes()

    def test_hook_changes_output(self):
        m = tiny_model()
        z = np.random.default_rng(2).normal(size=(4, 4, 3))
        base, _ = forward(m, z, 5, [0, 1, 2, 3])

        def boost(a):
            v = a.values.copy()
            v[..., 0] *= 4
            return a.replace(v)

        hooked, _ = forward(m, z, 5, [0, 1, 2, 3], hook=boost)
        assert not np.allclose(base, hooked)

    def test_zeroing_hook_removes_text_dependence(self):
        m = tiny_model()
        z = np.random.default_rng(3).normal(size=(4, 4, 3))

        def zero(a):
            return a.replace(np.zeros_like(a.values))

        a, _ = forward(m, z, 7, [0, 1, 2, 3], hook=zero)
        b, _ = forward(m, z, 7, [4, 5, 2, 1], hook=zero)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_hook_with_wrong_shape(self):
        m = tiny_model()
        z = np.zeros((4, 4, 3))
        with pytest.raises(HookShapeError):
            forward(m, z, 1, [0, 1], hook=lambda a: AttentionTensor(a.step, a.layer, np.ones((4, 4, 3))))

    def test_batch_matches_single_chain(self):
        m = tiny_model()
        z = np.random.default_rng(4).normal(size=(3, 4, 4, 3)).astype(np.float32)
        eps, maps = forward_batch(m, z, 9, [1, 2, 3])
        for b in range(3):
            e, ms = forward(m, z[b], 9, [1, 2, 3])
            np.testing.assert_allclose(eps[b], e, atol=1e-6)
            np.testing.assert_allclose(maps[b][0].values, ms[0].values, atol=1e-6)

    def test_latent_skip_starts_as_plain_prediction(self):
        plain = tiny_model(seed=5)
        cfg = plain.config
        skip = build_model(ModelConfig(**{**cfg.to_dict(), "grid": cfg.grid, "latent_skip": True}), 5)
        z = np.random.default_rng(5).normal(size=(4, 4, 3))
        a, _ = forward(plain, z, 3, [0, 1, 2])
        b, _ = forward(skip, z, 3, [0, 1, 2])
        np.testing.assert_array_equal(a, b)
        with torch.no_grad():
            skip.skip_scale[2] = 0.0
            skip.skip_latent[2] = 2.0
        c, _ = forward(skip, z, 3, [0, 1, 2])
        np.testing.assert_allclose(c, 2 * z, rtol=1e-6)

    @pytest.mark.parametrize("tokens", [[], [0] * 9, [0, 99]])
    def test_bad_tokens(self, tokens):
        with pytest.raises(DimensionError):
            forward(tiny_model(), np.zeros((4, 4, 3)), 1, tokens)

    def test_bad_latent_shape(self):
        with pytest.raises(DimensionError):
            forward(tiny_model(), np.zeros((5, 4, 3)), 1, [0])

    def test_timestep_out_of_range(self):
        with pytest.raises(ValueError):
            forward(tiny_model(), np.zeros((4, 4, 3)), 0, [0])


class TestGradients:
    def test_matches_central_differences(self):
        errors = gradient_check(seed=0)
        assert len(errors) == sum(1 for _ in tiny_model().parameters())
        worst = max(errors, key=errors.get)
        assert errors[worst] <= 1e-2, (worst, errors[worst])


@pytest.fixture(scope="module")
def overfit_run():
    # one scene repeated to fill each batch; the model sees a single sample
    cfg = DatasetConfig(grid=(8, 8), shape_size=3, num_samples=1)
    data = make_dataset(cfg, 0)
    schedule = DiffusionSchedule.linear(10)
    model = build_model(ModelConfig(len(cfg.vocabulary), num_blocks=2, embed_dim=32, grid=(8, 8), num_steps=10), 0)
    result = TrainResult()
    train(model, data * 16, schedule, epochs=500, lr=3e-3, seed=0, batch_size=16, result=result, optimizer="adam")
    return model, schedule, data[0], result


class TestTraining:
    def test_overfits_single_sample(self, overfit_run):
        *_, result = overfit_run
        assert np.mean(result.step_losses[-50:]) < 0.05

    def test_chain_reconstructs_memorized_sample(self, overfit_run):
        model, schedule, sample0, _ = overfit_run
        images = sample(model, schedule, sample0.prompt.tokens, [0, 1, 2])
        for img in images:
            assert np.abs(img - sample0.image).mean() < 0.1

    def test_training_is_deterministic(self):
        cfg = DatasetConfig(grid=(6, 6), shape_size=2, num_samples=8)
        data = make_dataset(cfg, 1)
        schedule = DiffusionSchedule.linear(5)
        mc = ModelConfig(len(cfg.vocabulary), num_blocks=1, embed_dim=8, num_heads=2, grid=(6, 6), num_steps=5)
        a = train(build_model(mc, 0), data, schedule, epochs=2, lr=0.05, seed=4, batch_size=4, optimizer="sgd")
        b = train(build_model(mc, 0), data, schedule, epochs=2, lr=0.05, seed=4, batch_size=4, optimizer="sgd")
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_ema_weights_replace_raw_weights(self):
        cfg = DatasetConfig(grid=(6, 6), shape_size=2, num_samples=8)
        data = make_dataset(cfg, 1)
        schedule = DiffusionSchedule.linear(5)
        mc = ModelConfig(len(cfg.vocabulary), num_blocks=1, embed_dim=8, num_heads=2, grid=(6, 6), num_steps=5)
        init = {k: v.clone() for k, v in build_model(mc, 0).state_dict().items()}
        plain = train(build_model(mc, 0), data, schedule, epochs=2, lr=1e-2, seed=4, batch_size=4, optimizer="adam")
        result = TrainResult()
        m = train(build_model(mc, 0), data, schedule, epochs=2, lr=1e-2, seed=4, batch_size=4,
                  optimizer="adam", ema_decay=0.5, result=result)
        assert result.raw_state is not None
        for k, v in plain.state_dict().items():
            assert torch.equal(result.raw_state[k], v)
        # the averaged weights moved away from the init but differ from the last iterate
        moved = [k for k, v in m.state_dict().items() if not torch.equal(v, init[k])]
        assert moved and any(not torch.equal(m.state_dict()[k], plain.state_dict()[k]) for k in moved)

    def test_cosine_schedule_ends_at_zero_rate(self):
        cfg = DatasetConfig(grid=(6, 6), shape_size=2, num_samples=8)
        data = make_dataset(cfg, 1)
        schedule = DiffusionSchedule.linear(5)
        mc = ModelConfig(len(cfg.vocabulary), num_blocks=1, embed_dim=8, num_heads=2, grid=(6, 6), num_steps=5)
        seen = []
        original = torch.optim.SGD.step

        def spy(opt, *args, **kwargs):
            seen.append(opt.param_groups[0]["lr"])
            return original(opt, *args, **kwargs)

        torch.optim.SGD.step = spy
        try:
            train(build_model(mc, 0), data, schedule, epochs=3, lr=0.1, seed=0, batch_size=4, lr_schedule="cosine")
        finally:
            torch.optim.SGD.step = original
        assert len(seen) == 6
        assert seen[0] == pytest.approx(0.1)
        assert all(a > b for a, b in zip(seen, seen[1:]))
        assert seen[-1] == pytest.approx(0.1 * 0.5 * (1 + np.cos(np.pi * 5 / 6)))

    def test_unknown_lr_schedule(self):
        cfg = DatasetConfig(grid=(4, 4), shape_size=1, num_samples=2)
        with pytest.raises(ValueError):
            train(tiny_model(), make_dataset(cfg, 0), DiffusionSchedule.linear(10), epochs=1, lr=0.1, seed=0,
                  lr_schedule="step")

    @pytest.mark.parametrize("decay", [0.0, 1.0, -0.1])
    def test_bad_ema_decay(self, decay):
        cfg = DatasetConfig(grid=(4, 4), shape_size=1, num_samples=2)
        with pytest.raises(ValueError):
            train(tiny_model(), make_dataset(cfg, 0), DiffusionSchedule.linear(10), epochs=1, lr=0.1, seed=0,
                  ema_decay=decay)

    def test_zero_epochs_leaves_weights(self):
        m = tiny_model()
        before = {k: v.clone() for k, v in m.state_dict().items()}
        cfg = DatasetConfig(grid=(4, 4), shape_size=1, num_samples=2)
        train(m, make_dataset(cfg, 0), DiffusionSchedule.linear(10), epochs=0, lr=1.0, seed=0)
        for k, v in m.state_dict().items():
            assert torch.equal(v, before[k])


class TestSampling:
    def test_oracle_noise_reconstructs_clean_image(self):
        # a denoiser that knows x0 exactly must return it at the end of the chain
        schedule = DiffusionSchedule.linear(50)
        rng = np.random.default_rng(0)
        x0 = rng.uniform(-1, 1, size=(4, 4, 3)).astype(np.float32)
        z = initial_latent(0, x0.shape)
        for t in range(50, 0, -1):
            ab = schedule.alpha_bar(t)
            eps = (z - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
            z = ddpm_update(z, eps, t, schedule, rng.standard_normal(x0.shape).astype(np.float32))
        assert np.abs(z - x0).mean() < 0.1

    def test_tiny_beta_step_is_near_identity(self):
        schedule = DiffusionSchedule(np.full(3, 1e-8))
        z = np.random.default_rng(1).normal(size=(2, 2, 3)).astype(np.float32)
        out = ddpm_update(z, np.zeros_like(z), 2, schedule, np.zeros_like(z), clip_denoised=False)
        np.testing.assert_allclose(out, z, atol=1e-6)

    def test_t_zero_rejected(self):
        with pytest.raises(ValueError):
            ddpm_update(np.zeros(3), np.zeros(3), 0, DiffusionSchedule.linear(5), None)

    def test_same_seed_same_image(self):
        m = tiny_model()
        s = DiffusionSchedule.linear(10)
        a = sample(m, s, [0, 1, 2, 3], [5, 6])
        b = sample(m, s, [0, 1, 2, 3], [5, 6])
        assert a.tobytes() == b.tobytes()
        assert a.shape == (2, 4, 4, 3) and a.min() >= 0 and a.max() <= 1
        assert not np.array_equal(a[0], a[1])


class TestDataset:
    def test_deterministic(self):
        cfg = DatasetConfig(num_samples=16)
        a, b = make_dataset(cfg, 7), make_dataset(cfg, 7)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes() and x.prompt == y.prompt

    def test_scene_contents(self):
        cfg = DatasetConfig(num_samples=64)
        seen = set()
        for s in make_dataset(cfg, 0):
            color_a, shape_a, color_b, shape_b = s.prompt.words
            assert color_a != color_b and shape_a != shape_b
            (name_a, reg_a), (name_b, reg_b) = s.layout
            assert (name_a, name_b) == (shape_a, shape_b)
            assert not (reg_a & reg_b).any()
            np.testing.assert_array_equal(s.image[reg_a][0], s.image[reg_a].max(0))
            assert s.image[~(reg_a | reg_b)].max() == 0
            seen.update([shape_a, shape_b])
        assert seen == set(cfg.shapes)

    def test_binding_pairs_point_shape_to_colour(self):
        p = coarse_prompt(DatasetConfig().vocabulary, [("red", "square"), ("blue", "disc")])
        assert p.pair_words() == [("square", "red"), ("disc", "blue")]
        assert p.raw_text == "a red square and a blue disc"

    def test_swapped_captions_share_a_token_bag(self):
        vocab = DatasetConfig().vocabulary
        a = coarse_prompt(vocab, [("red", "square"), ("blue", "disc")])
        b = coarse_prompt(vocab, [("blue", "square"), ("red", "disc")])
        assert sorted(a.tokens) == sorted(b.tokens)

    def test_shape_areas(self):
        assert shape_template("square", 7).sum() == 25
        assert shape_template("disc", 7).sum() == 37

    def test_config_validation(self):
        with pytest.raises(DatasetConfigError):
            DatasetConfig(shapes=("square",))
        with pytest.raises(DatasetConfigError):
            DatasetConfig(grid=(4, 4), shape_size=7)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = tiny_model(seed=2)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path, {"note": "x"})
        loaded, extra = load_checkpoint(path)
        assert extra == {"note": "x"} and loaded.config == m.config
        for k, v in m.state_dict().items():
            assert torch.equal(v, loaded.state_dict()[k])

    def test_round_trip_with_latent_skip(self, tmp_path):
        m = build_model(ModelConfig(7, num_blocks=1, embed_dim=8, num_heads=2, grid=(4, 4), num_steps=10,
                                    latent_skip=True), 0)
        with torch.no_grad():
            m.skip_latent[3] = 0.7
        save_checkpoint(m, tmp_path / "m.ckpt")
        loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
        assert loaded.config.latent_skip
        assert torch.equal(loaded.skip_latent, m.skip_latent)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_model(), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
