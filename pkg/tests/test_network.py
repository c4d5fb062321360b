import math

import numpy as np
import pytest
from pydantic import ValidationError

from app.color import LabImage, RgbImage, apply_transform, mean_l2, quadratic_basis, srgb_to_lab
from app.errors import ShapeError
from app.network import (
    OUTPUT_STRIDE,
    BackboneConfig,
    FeatureMap,
    StylizeNet,
    backbone_layers,
    build_backbone,
    context_map_size,
    context_maps,
    forward,
    forward_graph,
    init_params,
    parameter_count,
    receptive_field,
    run_backbone,
    two_scale_context,
)
from app.ops import pixel_mse
from app.tensor import Tensor, grad_check
from reference import COMPENSATED_CHAIN, ORIGINAL_CHAIN, context_shape, rf_recursion


class TestBackboneConfig:
    def test_defaults(self):
        config = BackboneConfig()
        assert config.stage_channels == (16, 16, 32, 32, 32)
        assert config.context_channels == 64
        assert config.head_hidden == (32, 32)
        assert config.reflect_pad == 8

    def test_comma_separated_widths(self):
        config = BackboneConfig(stage_channels="8,8,16,16,16", head_hidden="4,4")
        assert config.stage_channels == (8, 8, 16, 16, 16)
        assert config.head_hidden == (4, 4)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"stage_channels": (8, 8, 0, 8, 8)},
            {"stage_channels": (8, 8, 8)},
            {"context_channels": 0},
            {"head_hidden": (4, -1)},
            {"reflect_pad": 4},
            {"seed": -1},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            BackboneConfig(**kwargs)

    def test_minimum_side(self):
        assert BackboneConfig().min_image_side() == 16
        assert BackboneConfig(reflect_pad=24).min_image_side() == 25
        assert BackboneConfig(reflect_pad=0).min_image_side() == 8


class TestGeometry:
    def test_layer_chain_matches_hand_written(self):
        config = BackboneConfig()
        for compensated, chain in [(True, COMPENSATED_CHAIN), (False, ORIGINAL_CHAIN)]:
            layers = backbone_layers(config, compensated)
            assert [(lay.kernel, lay.stride, lay.dilation) for lay in layers] == chain

    @pytest.mark.parametrize("side,expected", [(32, 4), (33, 5), (16, 2), (64, 8), (17, 3)])
    def test_context_map_size_examples(self, side, expected):
        assert context_map_size(BackboneConfig(), side, side) == (expected, expected)

    def test_output_stride_contract(self):
        config = BackboneConfig()
        for h in range(16, 65):
            w = 80 - h
            assert context_map_size(config, h, w) == (math.ceil(h / 8), math.ceil(w / 8))
            assert context_map_size(config, h, w, scale=2) == (math.ceil(h / 4), math.ceil(w / 4))
            assert context_shape(h) == math.ceil(h / 8)

    def test_receptive_field_compensation(self):
        config = BackboneConfig()
        compensated = receptive_field(config, 1)
        original = receptive_field(config, 1, compensated=False)
        assert compensated.size == original.size == rf_recursion(COMPENSATED_CHAIN)[0]
        assert rf_recursion(ORIGINAL_CHAIN)[0] == compensated.size
        assert compensated.stride == OUTPUT_STRIDE
        assert original.stride == rf_recursion(ORIGINAL_CHAIN)[1] == 32

    def test_upsampled_path_halves_receptive_field(self):
        config = BackboneConfig()
        one, two = receptive_field(config, 1), receptive_field(config, 2)
        assert two.size == one.size / 2
        assert two.stride == one.stride / 2

    def test_invalid_scale(self):
        with pytest.raises(ValueError):
            receptive_field(BackboneConfig(), 3)

    def test_parameter_count_is_pure(self, tiny_config):
        net = StylizeNet(tiny_config)
        assert parameter_count(tiny_config) == sum(p.numel() for p in net.parameters().values())
        assert parameter_count(tiny_config) == parameter_count(BackboneConfig(**tiny_config.model_dump()))

    def test_head_output_has_thirty_channels(self, tiny_config):
        net = StylizeNet(tiny_config)
        assert net.head["head_out.weight"].shape == (30, tiny_config.head_hidden[1], 1, 1)
        assert net.head["head1.weight"].shape[1] == 3 + 2 * tiny_config.context_channels


class TestInitialization:
    def test_same_seed_is_bit_identical(self, tiny_config):
        a, b = StylizeNet(tiny_config), StylizeNet(tiny_config)
        for (name, pa), pb in zip(a.parameters().items(), b.parameters().values()):
            assert np.array_equal(pa.data, pb.data), name

    def test_different_seeds_differ(self, tiny_config):
        a = StylizeNet(tiny_config)
        b = StylizeNet(tiny_config.model_copy(update={"seed": 1}))
        assert not np.array_equal(a.backbone.params["stage1.weight"].data, b.backbone.params["stage1.weight"].data)

    def test_reinit_restores_parameters(self, tiny_config):
        net = StylizeNet(tiny_config)
        before = {k: p.data.copy() for k, p in net.parameters().items()}
        for p in net.parameters().values():
            p.data += 1.0
        init_params(net, tiny_config.seed)
        for k, p in net.parameters().items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_fan_in_bound(self, tiny_config):
        w = StylizeNet(tiny_config).backbone.params["stage2.weight"].data
        assert np.abs(w).max() <= math.sqrt(6.0 / (tiny_config.stage_channels[0] * 9))

    @pytest.mark.parametrize("seed", [0, 1, 17])
    def test_identity_at_init(self, tiny_config, lab_image, seed):
        net = StylizeNet(tiny_config.model_copy(update={"seed": seed}))
        result = forward(net, lab_image)
        assert np.array_equal(result.enhanced.pixels, lab_image.pixels)
        assert mean_l2(result.enhanced, lab_image) == 0.0


class TestContext:
    def test_pre_interpolation_sizes(self, tiny_config):
        img = srgb_to_lab(RgbImage(np.random.default_rng(0).integers(0, 256, size=(33, 20, 3))))
        scale1, scale2 = context_maps(StylizeNet(tiny_config), img)
        assert scale1.tensor.shape == (tiny_config.context_channels, 5, 3)
        assert scale2.tensor.shape == (tiny_config.context_channels, 9, 5)
        assert (scale1.role, scale2.role) == ("context_scale1", "context_scale2")

    def test_full_resolution_and_channels(self, tiny_config, lab_image):
        context = two_scale_context(StylizeNet(tiny_config), lab_image)
        assert context.tensor.shape == (2 * tiny_config.context_channels, lab_image.height, lab_image.width)

    def test_constant_image_gives_constant_context(self, tiny_config):
        img = LabImage(np.broadcast_to(np.array([60.0, 10.0, -20.0]), (24, 24, 3)).copy())
        data = two_scale_context(StylizeNet(tiny_config), img).tensor.data
        spread = data.max(axis=(1, 2)) - data.min(axis=(1, 2))
        assert spread.max() <= 1e-8

    def test_shared_weights_affect_both_scales(self, tiny_config, lab_image):
        net = StylizeNet(tiny_config)
        before = [m.tensor.data.copy() for m in context_maps(net, lab_image)]
        net.backbone.params["stage1.bias"].data += 0.5
        after = [m.tensor.data for m in context_maps(net, lab_image)]
        assert not np.array_equal(before[0], after[0])
        assert not np.array_equal(before[1], after[1])

    def test_backbone_translation_covariance(self, tiny_config):
        rng = np.random.default_rng(9)
        net = StylizeNet(tiny_config)
        big = rng.uniform(-1.0, 1.0, size=(3, 16, 264))
        full = run_backbone(net, Tensor(big[:, :, :256])).data
        shifted = run_backbone(net, Tensor(big[:, :, 8:])).data
        assert full.shape[2] == shifted.shape[2] == 32
        # cell j is centered on column 8j with a 189-pixel field; these see no border
        np.testing.assert_allclose(shifted[:, :, 13:19], full[:, :, 14:20], atol=1e-8)

    def test_too_small_image(self, tiny_config):
        with pytest.raises(ShapeError):
            forward(StylizeNet(tiny_config), LabImage(np.zeros((15, 32, 3))))

    def test_pixel_feature_must_have_three_channels(self):
        with pytest.raises(ShapeError):
            FeatureMap(Tensor(np.zeros((4, 2, 2))), "pixel")


class TestForward:
    def _perturbed(self, config, seed=3):
        net = StylizeNet(config)
        rng = np.random.default_rng(seed)
        w = net.head["head_out.weight"]
        w.data[...] = rng.normal(scale=0.05, size=w.shape)
        return net

    @pytest.mark.parametrize("h,w", [(16, 16), (23, 41), (64, 17)])
    def test_shapes(self, tiny_config, h, w):
        img = srgb_to_lab(RgbImage(np.random.default_rng(h).integers(0, 256, size=(h, w, 3))))
        transforms, enhanced = forward_graph(StylizeNet(tiny_config), img)
        assert transforms.shape == (30, h, w)
        assert enhanced.shape == (3, h, w)
        result = forward(StylizeNet(tiny_config), img)
        assert result.transforms.shape == (h, w, 3, 10)
        assert result.enhanced.pixels.shape == (h, w, 3)

    def test_enhanced_pixel_is_transform_times_basis(self, tiny_config, lab_image):
        result = forward(self._perturbed(tiny_config), lab_image)
        for r, c in [(0, 0), (5, 11), (lab_image.height - 1, lab_image.width - 1)]:
            expected = apply_transform(result.transform_at(r, c), quadratic_basis(lab_image.pixels[r, c]))
            assert np.array_equal(result.enhanced.pixels[r, c], expected)

    def test_transforms_vary_across_pixels_after_perturbation(self, tiny_config, lab_image):
        result = forward(self._perturbed(tiny_config), lab_image)
        assert not np.allclose(result.transforms[0, 0], result.transforms[-1, -1])

    def test_forward_is_deterministic(self, tiny_config, lab_image):
        net = self._perturbed(tiny_config)
        a, b = forward(net, lab_image), forward(net, lab_image)
        assert np.array_equal(a.enhanced.pixels, b.enhanced.pixels)

    def test_end_to_end_gradient(self, gradcheck_config):
        net = self._perturbed(gradcheck_config)
        rng = np.random.default_rng(11)
        img = srgb_to_lab(RgbImage(rng.integers(0, 256, size=(8, 8, 3))))
        target = img.channels_first() + rng.normal(scale=2.0, size=(3, 8, 8))
        params = list(net.parameters().values())
        err = grad_check(lambda: pixel_mse(forward_graph(net, img)[1], target), params, n_samples=10)
        assert err < 1e-4

    def test_build_backbone_names(self, tiny_config):
        backbone = build_backbone(tiny_config)
        assert [s.name for s in backbone.stages] == [f"stage{i}" for i in range(1, 6)] + ["context"]
        assert set(backbone.params) == {
            f"{s.name}.{kind}" for s in backbone.stages for kind in ("weight", "bias")
        }
