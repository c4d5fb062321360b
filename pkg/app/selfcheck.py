"""
Fast invariant suite run by the ``selfcheck`` command
"""
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from app.color import (
    RgbImage,
    apply_transform_image,
    identity_transform,
    lab_to_srgb,
    mean_l2,
    quadratic_basis,
    srgb_to_lab,
)
from app.network import (
    BackboneConfig,
    StylizeNet,
    context_map_size,
    forward,
    forward_graph,
    receptive_field,
)
from app.ops import ConvSpec, Padding, bilinear_upsample, conv2d, enhance, max_pool, pixel_mse
from app.styles import apply_style, planted_global_style, render_synthetic_image
from app.tensor import Tensor, grad_check
from app.training import fit_global_transform

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _grad_conv2d() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    spec = ConvSpec(2, 3, (3, 3), (2, 1), (2, 2), Padding.reflect(2))
    x = Tensor(rng.normal(size=(2, 9, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    err = grad_check(lambda: (conv2d(x, w, b, spec) * conv2d(x, w, b, spec)).sum(), [x, w, b], n_samples=12)
    return err < GRAD_TOLERANCE, f"max relative error {err:.2e}"


def _grad_pool_and_upsample() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 7, 7)), requires_grad=True)
    target = rng.normal(size=(2, 9, 11))

    def f():
        pooled = max_pool(x, (3, 3), (2, 2), padding=1)
        up = bilinear_upsample(pooled, 9, 11)
        diff = up - Tensor(target)
        return (diff * diff).sum()

    err = grad_check(f, [x], n_samples=12)
    return err < GRAD_TOLERANCE, f"max relative error {err:.2e}"


def _grad_enhance_loss() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    transforms = Tensor(rng.normal(scale=0.1, size=(30, 4, 5)), requires_grad=True)
    lab = rng.uniform([0, -50, -50], [100, 50, 50], size=(4, 5, 3))
    target = rng.normal(size=(3, 4, 5))
    err = grad_check(lambda: pixel_mse(enhance(transforms, quadratic_basis(lab)), target), [transforms])
    return err < GRAD_TOLERANCE, f"max relative error {err:.2e}"


def _grad_network() -> tuple[bool, str]:
    config = BackboneConfig(stage_channels=(4, 4, 4, 4, 4), context_channels=4, head_hidden=(4, 4), reflect_pad=0)
    net = StylizeNet(config)
    rng = np.random.default_rng(4)
    net.head["head_out.weight"].data[...] = rng.normal(scale=0.1, size=net.head["head_out.weight"].shape)
    img = srgb_to_lab(RgbImage(rng.integers(0, 256, size=(8, 8, 3))))
    target = img.pixels.transpose(2, 0, 1) + rng.normal(scale=2.0, size=(3, 8, 8))
    params = list(net.parameters().values())
    err = grad_check(
        lambda: pixel_mse(forward_graph(net, img)[1], target), params, n_samples=10, min_magnitude=1e-2
    )
    return err < GRAD_TOLERANCE, f"max relative error {err:.2e}"


def _conv_shifted_slices() -> tuple[bool, str]:
    """conv2d against an independent per-tap shifted-slice accumulation"""
    rng = np.random.default_rng(5)
    worst = 0.0
    for stride, dilation in [(1, 1), (2, 1), (1, 2), (1, 4), (2, 2)]:
        spec = ConvSpec(3, 2, (3, 3), (stride, stride), (dilation, dilation), Padding.zero(dilation))
        x = rng.normal(size=(3, 13, 12))
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), spec).data
        xp = np.pad(x, ((0, 0), (dilation, dilation), (dilation, dilation)))
        ho, wo = spec.output_size(13, 12)
        want = np.broadcast_to(b[:, None, None], (2, ho, wo)).copy()
        for i in range(3):
            for j in range(3):
                patch = xp[
                    :,
                    i * dilation : i * dilation + stride * (ho - 1) + 1 : stride,
                    j * dilation : j * dilation + stride * (wo - 1) + 1 : stride,
                ]
                want += np.einsum("oc,chw->ohw", w[:, :, i, j], patch)
        worst = max(worst, float(np.abs(got - want).max()))
    return worst <= 1e-12, f"max abs difference {worst:.2e}"


def _lab_round_trip() -> tuple[bool, str]:
    grays = np.repeat(np.arange(256, dtype=np.uint8)[:, None, None], 3, axis=2)
    levels = np.linspace(0, 255, 17).round().astype(np.uint8)
    lattice = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), axis=-1).reshape(-1, 1, 3)
    bad = 0
    for pixels in (grays, lattice):
        img = RgbImage(pixels)
        bad += int((lab_to_srgb(srgb_to_lab(img)).pixels != img.pixels).any(axis=-1).sum())
    return bad == 0, f"{bad} pixels changed"


def _lab_red() -> tuple[bool, str]:
    lab = srgb_to_lab(RgbImage(np.array([[[255, 0, 0]]], dtype=np.uint8))).pixels[0, 0]
    ok = bool(np.all(np.abs(lab - np.array([53.24, 80.09, 67.20])) <= 0.1))
    return ok, "red -> ({:.2f}, {:.2f}, {:.2f})".format(*lab)


def _basis_identity() -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    lab = srgb_to_lab(RgbImage(rng.integers(0, 256, size=(6, 6, 3))))
    same = apply_transform_image(identity_transform(), lab)
    basis = quadratic_basis(lab.pixels)
    ok = np.array_equal(same.pixels, lab.pixels) and np.array_equal(basis[..., 9], np.ones((6, 6)))
    ok = ok and np.array_equal(basis[..., 6:9], lab.pixels)
    return bool(ok), "identity transform and basis layout"


def _output_stride() -> tuple[bool, str]:
    config = BackboneConfig()
    for side in range(16, 65):
        got = context_map_size(config, side, side)
        if got != (math.ceil(side / 8), math.ceil(side / 8)):
            return False, f"side {side}: context map {got}"
    return True, "context maps are ceil(side / 8) for sides 16..64"


def _receptive_field() -> tuple[bool, str]:
    config = BackboneConfig()
    compensated = receptive_field(config, 1)
    original = receptive_field(config, 1, compensated=False)
    upsampled = receptive_field(config, 2)
    ok = (
        compensated.size == original.size
        and compensated.stride == 8
        and upsampled.size == compensated.size / 2
    )
    return ok, f"size {compensated.size:g} (uncompensated {original.size:g}), stride {compensated.stride:g}"


def _identity_at_init() -> tuple[bool, str]:
    config = BackboneConfig(stage_channels=(4, 4, 8, 8, 8), context_channels=8, head_hidden=(8, 8), seed=7)
    img = srgb_to_lab(render_synthetic_image(8, 24, 20)[0])
    err = mean_l2(forward(StylizeNet(config), img).enhanced, img)
    return err == 0.0, f"mean L2 {err:.2e}"


def _global_fit_recovery() -> tuple[bool, str]:
    style = planted_global_style(11)
    img, mask = render_synthetic_image(11, 32, 32)
    fitted = fit_global_transform([apply_style(style, img, mask)])
    err = float(np.abs(fitted.m - style.transforms[0].m).max())
    return err < 1e-6, f"max entry error {err:.2e}"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("grad_conv2d", _grad_conv2d),
    ("grad_pool_upsample", _grad_pool_and_upsample),
    ("grad_enhance_loss", _grad_enhance_loss),
    ("grad_network", _grad_network),
    ("conv_shifted_slices", _conv_shifted_slices),
    ("lab_round_trip", _lab_round_trip),
    ("lab_red", _lab_red),
    ("basis_identity", _basis_identity),
    ("output_stride", _output_stride),
    ("receptive_field", _receptive_field),
    ("identity_at_init", _identity_at_init),
    ("global_fit_recovery", _global_fit_recovery),
]


def run_selfcheck() -> list[CheckResult]:
    results = []
    for name, check in CHECKS:
        start = time.perf_counter()
        try:
            passed, detail = check()
        except Exception as e:
            logger.exception("check %s raised", name)
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results
