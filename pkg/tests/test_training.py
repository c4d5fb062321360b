from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from app.checkpoint_manager import CheckpointManager
from app.cli import CONFIG_KEYS, parse_run_config
from app.color import LabImage, apply_transform_image, mean_l2, quadratic_basis, srgb_to_lab
from app.config import load_config_file
from app.errors import DatasetError, RankDeficiencyError, ShapeError
from app.network import BackboneConfig, StylizeNet
from app.styles import make_dataset, planted_global_style, planted_local_style, render_synthetic_image
from app.training import (
    StylePair,
    TrainConfig,
    evaluate,
    fit_global_transform,
    fit_region_transforms,
    init_optimizer_state,
    loss,
    sample_pixels,
    train,
    train_step,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def _objective(m, pairs):
    total = 0.0
    for p in pairs:
        pred = np.einsum("ck,hwk->hwc", m, quadratic_basis(p.input.pixels))
        total += float(((pred - p.target.pixels) ** 2).sum())
    return total


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.learning_rate, cfg.pixels_per_step, cfg.optimizer) == (30, 1e-3, 1024, "adam")
        assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)

    def test_name_lists_from_commas(self):
        cfg = TrainConfig(train_names="a, b,c", test_names="d")
        assert cfg.train_names == ("a", "b", "c")
        assert cfg.test_names == ("d",)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"learning_rate": -1e-3},
            {"pixels_per_step": 0},
            {"optimizer": "rmsprop"},
            {"epochs": -1},
            {"beta1": 1.0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            TrainConfig(**kwargs)


class TestLoss:
    def test_zero_when_equal(self, lab_image):
        assert loss(lab_image, lab_image).item() == 0.0

    def test_unit_offset(self, lab_image):
        shifted = LabImage(lab_image.pixels + np.array([1.0, 0.0, 0.0]))
        assert loss(shifted, lab_image).item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_scalar_loop(self, rng):
        a = LabImage(rng.normal(size=(5, 6, 3)) * 20)
        b = LabImage(rng.normal(size=(5, 6, 3)) * 20)
        total = 0.0
        for r in range(5):
            for c in range(6):
                total += sum((a.pixels[r, c, k] - b.pixels[r, c, k]) ** 2 for k in range(3))
        assert abs(loss(a, b).item() - total / 30) <= 1e-12 * max(1.0, total / 30)

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            loss(LabImage(np.zeros((4, 4, 3))), LabImage(np.zeros((4, 5, 3))))

    def test_empty_mask(self, lab_image):
        with pytest.raises(ShapeError):
            loss(lab_image, lab_image, np.zeros(lab_image.pixels.shape[:2], dtype=bool))


class TestSampling:
    def test_without_replacement(self):
        idx = sample_pixels(10, 10, 40, np.random.default_rng(0))
        assert len(np.unique(idx)) == 40
        assert idx.min() >= 0 and idx.max() < 100

    def test_all_pixels_when_count_exceeds(self):
        np.testing.assert_array_equal(sample_pixels(3, 4, 50, np.random.default_rng(0)), np.arange(12))


class TestStylePair:
    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            StylePair(LabImage(np.zeros((4, 4, 3))), LabImage(np.zeros((4, 5, 3))))


@pytest.fixture
def planted_pair():
    style = planted_global_style(7)
    img, _ = render_synthetic_image(7, 24, 24)
    lab = srgb_to_lab(img)
    return StylePair(lab, apply_transform_image(style.transforms[0], lab), "p"), style


class TestTrainStep:
    def test_zero_learning_rate_leaves_parameters(self, tiny_config, planted_pair):
        pair, _ = planted_pair
        net = StylizeNet(tiny_config)
        before = {k: p.data.copy() for k, p in net.parameters().items()}
        for optimizer in ("adam", "sgd"):
            cfg = TrainConfig(learning_rate=0.0, optimizer=optimizer, pixels_per_step=64)
            opt = init_optimizer_state(net, cfg)
            for _ in range(2):
                train_step(net, pair, cfg, opt)
        for k, p in net.parameters().items():
            assert np.array_equal(p.data, before[k]), k

    def test_returns_pre_update_loss(self, tiny_config, planted_pair):
        pair, _ = planted_pair
        net = StylizeNet(tiny_config)
        cfg = TrainConfig(pixels_per_step=10_000)
        first = train_step(net, pair, cfg, init_optimizer_state(net, cfg))
        # identity at init, full-image loss
        assert first == pytest.approx(loss(pair.input, pair.target).item(), rel=1e-12)

    def test_step_counter_and_moments(self, tiny_config, planted_pair):
        pair, _ = planted_pair
        net = StylizeNet(tiny_config)
        cfg = TrainConfig(pixels_per_step=32)
        opt = init_optimizer_state(net, cfg)
        train_step(net, pair, cfg, opt)
        assert opt.step == 1
        assert set(opt.first_moment) == set(net.parameters())
        assert opt.first_moment["head_out.bias"].shape == (30,)
        assert np.abs(opt.first_moment["head_out.bias"]).max() > 0

    def test_loss_decreases_on_planted_style(self, tiny_config, planted_pair):
        pair, _ = planted_pair
        net = StylizeNet(tiny_config)
        cfg = TrainConfig(learning_rate=5e-3, pixels_per_step=256)
        opt = init_optimizer_state(net, cfg)
        losses = [train_step(net, pair, cfg, opt) for _ in range(60)]
        assert np.mean(losses[-5:]) < 0.8 * losses[0]

    def test_equal_seeds_give_equal_traces(self, tiny_config, planted_pair):
        pair, _ = planted_pair
        traces = []
        for _ in range(2):
            net = StylizeNet(tiny_config)
            cfg = TrainConfig(learning_rate=5e-3, pixels_per_step=64, seed=3)
            opt = init_optimizer_state(net, cfg)
            traces.append([train_step(net, pair, cfg, opt) for _ in range(4)])
        assert traces[0] == traces[1]


class TestTrain:
    def test_zero_epochs_is_identity(self, tiny_config, global_dataset, tmp_path):
        result = train(global_dataset.train, TrainConfig(epochs=0), tiny_config, log_path=tmp_path / "log")
        fresh = StylizeNet(tiny_config)
        for k, p in result.net.parameters().items():
            assert np.array_equal(p.data, fresh.parameters()[k].data)
        assert result.epoch_losses == []
        assert (tmp_path / "log").read_text() == ""

    def test_log_and_checkpoint(self, tiny_config, global_dataset, tmp_path):
        cfg = TrainConfig(epochs=2, learning_rate=5e-3, pixels_per_step=128)
        result = train(
            global_dataset.train, cfg, tiny_config,
            checkpoint_path=tmp_path / "net.ckpt", log_path=tmp_path / "train.log",
        )
        rows = (tmp_path / "train.log").read_text().splitlines()
        assert len(rows) == 2
        epoch, value = rows[1].split("\t")
        assert int(epoch) == 2 and float(value) == result.epoch_losses[1]
        assert result.checkpoint.epoch == 2
        restored = CheckpointManager().restore_checkpoint(tmp_path / "net.ckpt")
        for k, p in result.net.parameters().items():
            assert np.array_equal(restored.parameters()[k].data, p.data)

    def test_seeded_runs_write_identical_checkpoints(self, tiny_config, global_dataset, tmp_path):
        cfg = TrainConfig(epochs=1, learning_rate=5e-3, pixels_per_step=64, seed=2)
        for name in ("a", "b"):
            train(global_dataset.train, cfg, tiny_config, checkpoint_path=tmp_path / name / "net.ckpt")
        assert (tmp_path / "a" / "net.ckpt").read_bytes() == (tmp_path / "b" / "net.ckpt").read_bytes()

    def test_empty_training_set(self, tiny_config):
        with pytest.raises(DatasetError):
            train([], TrainConfig(), tiny_config)


class TestGlobalFit:
    def test_recovers_planted_transform(self, planted_pair):
        pair, style = planted_pair
        fitted = fit_global_transform([pair])
        assert np.abs(fitted.m - style.transforms[0].m).max() < 1e-6
        assert mean_l2(apply_transform_image(fitted, pair.input), pair.target) < 1e-6

    def test_identity_is_realizable(self, lab_image):
        fitted = fit_global_transform([StylePair(lab_image, lab_image)])
        assert mean_l2(apply_transform_image(fitted, lab_image), lab_image) < 1e-8

    def test_is_least_squares_minimizer(self, planted_pair, rng):
        pair, _ = planted_pair
        noisy = StylePair(pair.input, LabImage(pair.target.pixels + rng.normal(scale=3.0, size=pair.target.pixels.shape)))
        m = fit_global_transform([noisy]).m
        base = _objective(m, [noisy])
        for r, c in [(0, 0), (0, 6), (1, 7), (2, 4), (2, 8)]:
            for delta in (1e-3, -1e-3):
                bumped = m.copy()
                bumped[r, c] += delta
                assert _objective(bumped, [noisy]) >= base

    def test_single_color_is_rank_deficient(self):
        flat = LabImage(np.broadcast_to(np.array([50.0, 10.0, 10.0]), (8, 8, 3)).copy())
        with pytest.raises(RankDeficiencyError) as excinfo:
            fit_global_transform([StylePair(flat, flat)])
        assert excinfo.value.rank < 10

    def test_too_few_pixels(self):
        tiny = LabImage(np.arange(9, dtype=float).reshape(1, 3, 3))
        with pytest.raises(RankDeficiencyError):
            fit_global_transform([StylePair(tiny, tiny)])


class TestRegionFit:
    def test_local_style_needs_regions(self):
        style = planted_local_style(13)
        dataset = make_dataset(style, n_train=2, n_test=1, w=48, h=48)
        pairs = dataset.train
        masks = [dataset.masks[p.name] for p in pairs]
        global_fit = fit_global_transform(pairs)
        residual = np.mean([mean_l2(apply_transform_image(global_fit, p.input), p.target) for p in pairs])
        assert residual >= 1.0
        regions = fit_region_transforms(pairs, masks)
        assert set(regions) == {0, 1}
        for label, planted in enumerate(dataset.style.transforms):
            assert np.abs(regions[label].m - planted.m).max() < 1e-6

    def test_mask_count_mismatch(self, planted_pair):
        pair, _ = planted_pair
        with pytest.raises(ShapeError):
            fit_region_transforms([pair], [])


class TestEvaluate:
    def test_identity_network_matches_baseline(self, tiny_config, global_dataset):
        report = evaluate(StylizeNet(tiny_config), global_dataset.test)
        assert report.mean_l2 == report.baseline_mean_l2
        assert report.names == [p.name for p in global_dataset.test]
        assert len(report.rows()) == len(global_dataset.test)

    def test_workers_give_same_numbers(self, tiny_config, global_dataset):
        net = StylizeNet(tiny_config)
        net.head["head_out.bias"].data[9] += 0.01
        serial = evaluate(net, global_dataset.test)
        threaded = evaluate(net, global_dataset.test, workers=3)
        assert serial.per_image_l2 == threaded.per_image_l2

    def test_baseline_independent_of_network(self, tiny_config, global_dataset):
        a = evaluate(StylizeNet(tiny_config), global_dataset.test)
        other = BackboneConfig(**{**tiny_config.model_dump(), "seed": 5})
        b = evaluate(StylizeNet(other), global_dataset.test)
        assert a.baseline_mean_l2 == b.baseline_mean_l2

    def test_empty(self, tiny_config):
        with pytest.raises(DatasetError):
            evaluate(StylizeNet(tiny_config), [])


def _run_config(name):
    return parse_run_config(load_config_file(CONFIG_DIR / f"{name}.cfg", CONFIG_KEYS))


def _global_fit_residual(train_pairs, eval_pairs):
    fitted = fit_global_transform(train_pairs)
    return float(np.mean([mean_l2(apply_transform_image(fitted, p.input), p.target) for p in eval_pairs]))


@pytest.mark.slow
class TestLearningAcceptance:
    """End-to-end runs with the shipped configs in ``configs/``"""

    def test_global_style(self):
        backbone, cfg = _run_config("global")
        dataset = make_dataset(planted_global_style(0), n_train=20, n_test=10, w=64, h=64)
        result = train(dataset.train, cfg, backbone)
        report = evaluate(result.net, dataset.test)
        assert 13.0 <= report.baseline_mean_l2 <= 20.0
        assert report.mean_l2 < 0.05 * report.baseline_mean_l2
        # the bias path alone can express the closed-form fit
        assert report.mean_l2 <= 10.0 * _global_fit_residual(dataset.train, dataset.test) + 0.5

    def test_local_style(self):
        backbone, cfg = _run_config("local")
        dataset = make_dataset(planted_local_style(0), n_train=20, n_test=10, w=64, h=64)
        residual = _global_fit_residual(dataset.train, dataset.test)
        assert residual >= 1.0
        result = train(dataset.train, cfg, backbone)
        assert evaluate(result.net, dataset.test).mean_l2 < 0.5 * residual
