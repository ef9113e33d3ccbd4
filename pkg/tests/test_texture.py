"""Texture VAE: latent oracles, gradient checks, overfit, assembly."""

import json

import numpy as np
import pytest

from voxtex.grids import VoxelGrid
from voxtex.nn import ModelParams, Tensor, config_hash, l2_loss, parameter
from voxtex.nn.gradcheck import check_gradients
from voxtex.recon import TrainingDivergedError
from voxtex.texture import (
    LatentDist, TextureDataset, TextureSample, VaeConfig, init_vae_params,
    kl_to_standard_normal, reparameterize, texture_model, train_texture,
    vae_decode, vae_encode, vae_loss,
)

TOL = 1e-4

TINY = dict(input_size=16, encoder_channels=(4, 8, 8, 16),
            encoder_filters=(5, 5, 3, 4), latent_dim=4,
            decoder_channels=(8, 3), seed_size=8)


def tiny_config(**over):
    return VaeConfig(**{**TINY, **over})


def f64_params(config, seed=0):
    return init_vae_params(config, np.random.default_rng(seed),
                           dtype=np.float64)


def smooth_image(rng, size):
    base = rng.uniform(size=(4, 4, 3))
    tile = np.kron(base, np.ones((size // 4, size // 4, 1)))
    return np.clip(tile, 0.0, 1.0)


def disk_depth(size, radius, level):
    yy, xx = np.mgrid[0:size, 0:size]
    depth = np.zeros((size, size), dtype=np.float32)
    depth[(yy - size // 2) ** 2 + (xx - size // 2) ** 2 < radius ** 2] = level
    return depth


class TestVaeConfig:
    def test_defaults_are_valid(self):
        cfg = VaeConfig()
        assert cfg.input_size == 64
        assert cfg.n_upsamples == 3
        assert cfg.upsample_after == (0, 2, 4)

    def test_dict_round_trip(self):
        cfg = tiny_config()
        assert VaeConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            VaeConfig.from_dict({"input_size": 64, "dropout": 0.5})

    def test_latent_dim_floor(self):
        with pytest.raises(ValueError, match="latent_dim"):
            tiny_config(latent_dim=1)

    def test_ladder_must_reach_one(self):
        with pytest.raises(ValueError, match="input_size"):
            tiny_config(input_size=32)

    def test_decoder_must_end_in_rgb(self):
        with pytest.raises(ValueError, match="3 RGB channels"):
            tiny_config(decoder_channels=(8, 4))

    def test_too_few_decoder_layers(self):
        with pytest.raises(ValueError, match="decoder layers"):
            VaeConfig(decoder_channels=(16, 3))

    def test_filter_count_must_match(self):
        with pytest.raises(ValueError, match="filters"):
            tiny_config(encoder_filters=(5, 5, 3))

    def test_seed_size_must_divide(self):
        with pytest.raises(ValueError, match="seed_size"):
            tiny_config(seed_size=5)


class TestLatentDist:
    def test_encode_output_arity(self):
        cfg = tiny_config()
        params = init_vae_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        d = vae_encode(rng.uniform(size=(16, 16)),
                       rng.uniform(size=(16, 16, 3)), params, cfg)
        assert d.mu.values.shape == (cfg.latent_dim,)
        assert d.log_var.values.shape == (cfg.latent_dim,)
        assert d.dim == cfg.latent_dim

    def test_encode_batch_arity(self):
        cfg = tiny_config()
        params = init_vae_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        d = vae_encode(rng.uniform(size=(3, 16, 16)),
                       rng.uniform(size=(3, 16, 16, 3)), params, cfg)
        assert d.mu.values.shape == (3, cfg.latent_dim)

    def test_log_var_is_clamped(self):
        cfg = tiny_config()
        params = init_vae_params(cfg, np.random.default_rng(0))
        # blow up the head bias; the clip must hold the output at the limit
        params["lat.lv.b"].values[:] = 1e4
        rng = np.random.default_rng(1)
        d = vae_encode(rng.uniform(size=(16, 16)),
                       rng.uniform(size=(16, 16, 3)), params, cfg)
        assert d.log_var.values.max() <= 10.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            LatentDist(np.array([np.nan, 0.0]), np.array([0.0, 0.0]))

    def test_rejects_out_of_range_log_var(self):
        with pytest.raises(ValueError, match="log_var"):
            LatentDist(np.zeros(3), np.full(3, 12.0))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            LatentDist(np.zeros(3), np.zeros(4))


class TestKL:
    def test_standard_normal_gives_zero(self):
        d = LatentDist(np.zeros(8), np.zeros(8))
        assert float(kl_to_standard_normal(d).values) == 0.0

    def test_unit_mean_gives_half_per_dim(self):
        d = LatentDist(np.ones(6), np.zeros(6))
        assert float(kl_to_standard_normal(d).values) == pytest.approx(3.0)

    def test_variance_e_closed_form(self):
        d = LatentDist(np.zeros(5), np.ones(5))
        expected = 5 * (np.e - 2.0) / 2.0
        assert float(kl_to_standard_normal(d).values) == pytest.approx(
            expected, rel=1e-12)

    def test_never_negative(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            d = LatentDist(rng.normal(size=7, scale=3.0),
                           rng.uniform(-10.0, 10.0, 7))
            assert float(kl_to_standard_normal(d).values) >= 0.0

    def test_batch_sums_rows(self):
        rng = np.random.default_rng(3)
        mu = rng.normal(size=(4, 6))
        lv = rng.uniform(-2.0, 2.0, (4, 6))
        total = float(kl_to_standard_normal(LatentDist(mu, lv)).values)
        rows = sum(float(kl_to_standard_normal(
            LatentDist(mu[i], lv[i])).values) for i in range(4))
        assert total == pytest.approx(rows, rel=1e-12)


class TestReparameterize:
    def test_no_noise_returns_mu(self):
        rng = np.random.default_rng(4)
        mu = rng.normal(size=6)
        d = LatentDist(mu, rng.uniform(-1, 1, 6))
        assert np.array_equal(reparameterize(d).values, mu)
        zeros = reparameterize(d, np.zeros(6))
        assert np.allclose(zeros.values, mu)

    def test_vanishing_variance_pins_z_to_mu(self):
        rng = np.random.default_rng(5)
        mu = rng.normal(size=6)
        d = LatentDist(mu, np.full(6, -10.0))
        eps = rng.normal(size=6, scale=5.0)
        z = reparameterize(d, eps)
        assert np.allclose(z.values - mu, np.exp(-5.0) * eps)
        assert np.abs(z.values - mu).max() < 0.1

    def test_monte_carlo_mean_matches_mu(self):
        rng = np.random.default_rng(6)
        n, dim = 100_000, 4
        mu = rng.normal(size=dim)
        lv = rng.uniform(-1.0, 1.0, dim)
        d = LatentDist(np.tile(mu, (n, 1)), np.tile(lv, (n, 1)))
        z = reparameterize(d, rng.standard_normal((n, dim)))
        sigma = np.exp(0.5 * lv)
        assert (np.abs(z.values.mean(axis=0) - mu)
                <= 3.0 * sigma / np.sqrt(n)).all()

    def test_noise_shape_must_match(self):
        d = LatentDist(np.zeros(4), np.zeros(4))
        with pytest.raises(ValueError, match="noise shape"):
            reparameterize(d, np.zeros(5))

    def test_gradient_through_mu_and_log_var(self):
        rng = np.random.default_rng(7)
        mu = parameter(rng.normal(size=5), np.float64)
        lv = parameter(rng.uniform(-1, 1, 5), np.float64)
        eps = rng.standard_normal(5)
        target = rng.normal(size=5)
        err = check_gradients(
            lambda: l2_loss(reparameterize(LatentDist(mu, lv), eps), target),
            {"mu": mu, "lv": lv})
        assert err < TOL


class TestDecode:
    def test_output_shape_and_range(self):
        cfg = tiny_config()
        params = init_vae_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(8)
        img = vae_decode(rng.normal(size=(cfg.latent_dim,)), params, cfg)
        assert img.values.shape == (16, 16, 3)
        assert img.values.min() >= 0.0 and img.values.max() <= 1.0
        batch = vae_decode(rng.normal(size=(2, cfg.latent_dim)), params, cfg)
        assert batch.values.shape == (2, 16, 16, 3)

    def test_default_config_output_is_64(self):
        cfg = VaeConfig()
        params = init_vae_params(cfg, np.random.default_rng(0))
        img = vae_decode(np.zeros(cfg.latent_dim), params, cfg)
        assert img.values.shape == (64, 64, 3)

    def test_wrong_latent_size_rejected(self):
        cfg = tiny_config()
        params = init_vae_params(cfg, np.random.default_rng(0))
        with pytest.raises(ValueError, match="latent"):
            vae_decode(np.zeros(cfg.latent_dim + 1), params, cfg)

    def test_gradient_decoder_only(self):
        # seeds chosen so every relu pre-activation clears the h=1e-4
        # central-difference step (min margin 2.6e-3)
        cfg = tiny_config()
        params = f64_params(cfg, seed=5)
        rng = np.random.default_rng(102)
        z = parameter(rng.uniform(-1.0, 1.0, (cfg.latent_dim,)), np.float64)
        target = rng.uniform(size=(16, 16, 3))
        checked = {"z": z, "fc.b": params["dec.fc.b"],
                   "c1.b": params["dec.c1.b"], "c2.b": params["dec.c2.b"]}
        err = check_gradients(
            lambda: l2_loss(vae_decode(z, params, cfg), target), checked)
        assert err < TOL


class TestEncode:
    def test_size_mismatch_rejected(self):
        cfg = tiny_config()
        params = init_vae_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(9)
        with pytest.raises(ValueError, match="ortho_depth"):
            vae_encode(rng.uniform(size=(8, 8)),
                       rng.uniform(size=(16, 16, 3)), params, cfg)
        with pytest.raises(ValueError, match="persp_rgb"):
            vae_encode(rng.uniform(size=(16, 16)),
                       rng.uniform(size=(8, 8, 3)), params, cfg)

    def test_batch_size_mismatch_rejected(self):
        cfg = tiny_config()
        params = init_vae_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(9)
        with pytest.raises(ValueError, match="batch sizes differ"):
            vae_encode(rng.uniform(size=(2, 16, 16)),
                       rng.uniform(size=(3, 16, 16, 3)), params, cfg)


class TestFullVaeGradient:
    def test_encode_sample_decode_loss_chain(self):
        # seeds keep relu pre-activations clear of the finite-difference
        # step (min margin 3.2e-3); probes cover the input images, both
        # branch stems, both latent heads, and the decoder ends
        cfg = tiny_config()
        params = f64_params(cfg, seed=6)
        rng = np.random.default_rng(207)
        depth = parameter(rng.uniform(0.05, 0.95, (16, 16)), np.float64)
        rgb = parameter(rng.uniform(0.05, 0.95, (16, 16, 3)), np.float64)
        target = rng.uniform(size=(16, 16, 3))
        eps = rng.standard_normal(cfg.latent_dim)

        def build():
            lat = vae_encode(depth, rgb, params, cfg)
            z = reparameterize(lat, eps)
            return vae_loss(vae_decode(z, params, cfg), target, lat)

        checked = {"depth": depth, "rgb": rgb,
                   "d.c1.b": params["enc.d.c1.b"],
                   "rgb.c1.b": params["enc.rgb.c1.b"],
                   "mu.b": params["lat.mu.b"], "lv.b": params["lat.lv.b"],
                   "dec.fc.b": params["dec.fc.b"],
                   "dec.c2.b": params["dec.c2.b"]}
        err = check_gradients(build, checked)
        assert err < TOL


class TestLoss:
    def test_perfect_prediction_standard_latent_is_zero(self):
        pred = Tensor(np.full((8, 8, 3), 0.25))
        d = LatentDist(np.zeros(4), np.zeros(4))
        assert float(vae_loss(pred, pred.values.copy(), d).values) == 0.0

    def test_uniform_difference_analytic_value(self):
        pred = Tensor(np.full((64, 64, 3), 0.6))
        target = np.full((64, 64, 3), 0.5)
        d = LatentDist(np.zeros(4), np.zeros(4))
        loss = float(vae_loss(pred, target, d).values)
        assert loss == pytest.approx(122.88, rel=1e-9)

    def test_beta_zero_is_pure_l2(self):
        rng = np.random.default_rng(10)
        pred = Tensor(rng.uniform(size=(8, 8, 3)))
        target = rng.uniform(size=(8, 8, 3))
        d = LatentDist(rng.normal(size=4), rng.uniform(-1, 1, 4))
        assert float(vae_loss(pred, target, d, beta=0.0).values) == \
            pytest.approx(float(l2_loss(pred, target).values), rel=1e-12)
        with_kl = float(vae_loss(pred, target, d, beta=1.0).values)
        assert with_kl > float(vae_loss(pred, target, d, beta=0.0).values)

    def test_shape_mismatch_rejected(self):
        d = LatentDist(np.zeros(4), np.zeros(4))
        with pytest.raises(ValueError, match="shape"):
            vae_loss(Tensor(np.zeros((8, 8, 3))), np.zeros((4, 4, 3)), d)


def make_texture_dataset(size=16, n=5, pool=1, rng=None):
    rng = rng or np.random.default_rng(5)
    samples = []
    for i in range(n):
        depth = disk_depth(size, size // 8 + i, 0.3 + 0.1 * i)
        photos = tuple(smooth_image(rng, size) for _ in range(pool))
        samples.append(TextureSample(ortho_depth=depth, persp_pool=photos,
                                     target=smooth_image(rng, size)))
    return TextureDataset(train=samples, val=samples)


@pytest.fixture(scope="module")
def vae_overfit_run():
    cfg = VaeConfig(input_size=16, encoder_channels=(8, 16, 32, 32),
                    encoder_filters=(5, 5, 3, 4), latent_dim=8,
                    decoder_channels=(16, 8, 3), seed_size=8)
    dataset = make_texture_dataset(size=16, n=5)
    model, log = train_texture(dataset, cfg, epochs=800, seed=3, lr=3e-3)
    return cfg, dataset, model, log


class TestTraining:
    def test_overfit_reaches_low_mae(self, vae_overfit_run):
        _, _, _, log = vae_overfit_run
        assert log[-1]["val_mae"] < 0.05

    def test_loss_medians_non_increasing(self, vae_overfit_run):
        _, _, _, log = vae_overfit_run
        losses = [r["train_loss"] for r in log]
        quarters = [np.median(losses[i * 200:(i + 1) * 200])
                    for i in range(4)]
        assert quarters[0] >= quarters[1] >= quarters[2] >= quarters[3]
        assert losses[-1] < 0.5 * losses[0]

    def test_distinct_depths_give_distinct_mu(self, vae_overfit_run):
        cfg, dataset, model, _ = vae_overfit_run
        photo = dataset.train[0].persp_pool[0]
        mus = [vae_encode(s.ortho_depth, photo, model, cfg).mu.values
               for s in dataset.train[:2]]
        assert np.abs(mus[0] - mus[1]).max() > 1e-3

    def test_log_schema(self, vae_overfit_run):
        _, _, _, log = vae_overfit_run
        assert set(log[0]) == {"epoch", "train_loss", "val_mae", "seed"}
        assert log[0]["seed"] == 3 and log[0]["epoch"] == 0

    def test_fixed_seed_reproduces_log_exactly(self):
        cfg = tiny_config()
        dataset = make_texture_dataset(size=16, n=4, pool=3)
        _, log_a = train_texture(dataset, cfg, epochs=3, seed=11)
        _, log_b = train_texture(dataset, cfg, epochs=3, seed=11)
        assert log_a == log_b
        _, log_c = train_texture(dataset, cfg, epochs=3, seed=12)
        assert log_a != log_c

    def test_log_file_is_json_lines(self, tmp_path):
        cfg = tiny_config()
        dataset = make_texture_dataset(size=16, n=3)
        path = tmp_path / "texture_log.jsonl"
        _, log = train_texture(dataset, cfg, epochs=2, seed=0, log_path=path)
        lines = path.read_text().strip().split("\n")
        assert [json.loads(line) for line in lines] == log

    @pytest.mark.filterwarnings("ignore:overflow|invalid value")
    def test_divergence_raises_with_diagnostics(self):
        cfg = tiny_config()
        dataset = make_texture_dataset(size=16, n=3)
        with pytest.raises(TrainingDivergedError, match="epoch"):
            train_texture(dataset, cfg, epochs=20, seed=0, lr=1e18)

    def test_empty_split_rejected(self):
        cfg = tiny_config()
        dataset = make_texture_dataset(size=16, n=3)
        with pytest.raises(ValueError, match="train split is empty"):
            train_texture(TextureDataset(train=[], val=dataset.val),
                          cfg, epochs=1, seed=0)

    def test_wrong_size_sample_rejected(self):
        cfg = tiny_config()
        bad = make_texture_dataset(size=32, n=2)
        with pytest.raises(ValueError, match="16px"):
            train_texture(bad, cfg, epochs=1, seed=0)

    def test_epochs_floor(self):
        cfg = tiny_config()
        dataset = make_texture_dataset(size=16, n=2)
        with pytest.raises(ValueError, match="epochs"):
            train_texture(dataset, cfg, epochs=0, seed=0)


class TestTextureSampleValidation:
    def test_rejects_empty_pool(self):
        with pytest.raises(ValueError, match="persp_pool"):
            TextureSample(ortho_depth=np.zeros((8, 8)), persp_pool=(),
                          target=np.zeros((8, 8, 3)))

    def test_rejects_out_of_range_depth(self):
        with pytest.raises(ValueError, match="0,1"):
            TextureSample(ortho_depth=np.full((8, 8), 1.5),
                          persp_pool=(np.zeros((8, 8, 3)),),
                          target=np.zeros((8, 8, 3)))

    def test_rejects_mismatched_target(self):
        with pytest.raises(ValueError, match="target"):
            TextureSample(ortho_depth=np.zeros((8, 8)),
                          persp_pool=(np.zeros((8, 8, 3)),),
                          target=np.zeros((4, 4, 3)))


@pytest.fixture(scope="module")
def box_setup():
    cfg = tiny_config()
    params = init_vae_params(cfg, np.random.default_rng(13))
    model = ModelParams(params, config_hash(cfg.to_dict()))
    vals = np.zeros((16, 16, 16))
    vals[4:12, 3:13, 5:11] = 1.0
    grid = VoxelGrid(vals)
    photo = smooth_image(np.random.default_rng(14), 16)
    return cfg, model, grid, photo


class TestTextureModel:
    def test_emits_four_views_and_colored_mesh(self, box_setup):
        cfg, model, grid, photo = box_setup
        mesh, views = texture_model(grid, photo, model, cfg)
        assert len(views) == 4
        assert sorted(v.face_index for v in views) == [0, 1, 2, 3]
        for v in views:
            assert v.rgb.shape == (16, 16, 3)
        assert mesh.vertex_colors is not None
        assert len(mesh.vertex_colors) == len(mesh.vertices)

    def test_inference_is_deterministic(self, box_setup):
        cfg, model, grid, photo = box_setup
        mesh_a, views_a = texture_model(grid, photo, model, cfg)
        mesh_b, views_b = texture_model(grid, photo, model, cfg)
        assert np.array_equal(mesh_a.vertex_colors, mesh_b.vertex_colors)
        for va, vb in zip(views_a, views_b):
            assert np.array_equal(va.rgb, vb.rgb)

    def test_empty_grid_rejected(self, box_setup):
        cfg, model, _, photo = box_setup
        with pytest.raises(ValueError, match="empty surface"):
            texture_model(VoxelGrid(np.zeros((16, 16, 16))), photo,
                          model, cfg)

    def test_wrong_photo_shape_rejected(self, box_setup):
        cfg, model, grid, _ = box_setup
        with pytest.raises(ValueError, match="persp_rgb"):
            texture_model(grid, np.zeros((8, 8, 3)), model, cfg)

    def test_foreign_weights_rejected(self, box_setup):
        cfg, _, grid, photo = box_setup
        other = tiny_config(latent_dim=6)
        params = init_vae_params(other, np.random.default_rng(0))
        foreign = ModelParams(params, config_hash(other.to_dict()))
        with pytest.raises(ValueError, match="different configuration"):
            texture_model(grid, photo, foreign, cfg)
