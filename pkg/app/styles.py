"""
Synthetic style datasets
Seeded two-region images and planted quadratic color transforms. Global
styles apply one transform everywhere; local styles apply one transform to the
background and another to the foreground region, so the correct output
depends on where a pixel is and not only on its color.

The foreground carries a fine stripe texture and the background is a smooth
gradient, so the region a pixel belongs to can be read from its surroundings
but not from its color alone.
"""
import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from app.color import (
    ColorTransform,
    LabImage,
    RgbImage,
    apply_transform_image,
    contract,
    identity_transform,
    in_srgb_gamut,
    quadratic_basis,
    srgb_to_lab,
)
from app.errors import ShapeError
from app.training import StylePair

logger = logging.getLogger(__name__)

StyleKind = Literal["global", "local"]
STYLE_NAMES = ("global", "local", "spring", "cold")

# Per-column perturbation bounds: quadratic terms, linear terms, constant
PERTURBATION_BOUND = np.array([0.002] * 6 + [0.15] * 3 + [5.0])

# Base colors, foreground stripe texture and noise of rendered images
COLOR_RANGE = (108.0, 172.0)
STRIPE_AMPLITUDE = (18.0, 30.0)
STRIPE_PERIOD = (3.0, 5.0)
NOISE_STD = 4.0
# Every rendered channel value lies here, away from the gamut edges
PIXEL_RANGE = (80, 200)
MIN_SIDE = 16

# Mean input-vs-target Lab distance a generated dataset is scaled to, and the
# range each split has to land in
BASELINE_TARGET = 16.5
BASELINE_RANGE = (13.5, 19.5)
# Targets must sit this far inside [0, 1] in linear RGB
GAMUT_MARGIN = 1e-4
CALIBRATION_ATTEMPTS = 64
GAMUT_BISECTIONS = 24
CALIBRATION_STREAM = 0x5CA1E

Sign = tuple[int, int, int]

# Fixed seeds and forced signs (row, column, sign) of the named presets
PRESETS: dict[str, tuple[int, tuple[Sign, ...]]] = {
    # brighter and more saturated
    "spring": (2017, ((0, 6, 1), (0, 9, 1), (1, 7, 1), (2, 8, 1))),
    # b pushed toward blue, slightly darker
    "cold": (4242, ((2, 9, -1), (2, 6, -1), (0, 9, -1))),
}


@dataclass
class SyntheticStyle:
    """
    A planted style: one transform (global) or background/foreground
    transforms indexed by region label (local).

    ``forced_signs`` pins perturbation signs that redrawn transforms keep.
    """
    kind: StyleKind
    transforms: list[ColorTransform]
    seed: int
    name: str = ""
    forced_signs: tuple[Sign, ...] = ()

    def __post_init__(self):
        expected = 1 if self.kind == "global" else 2
        if len(self.transforms) != expected:
            raise ShapeError("transform count", expected, len(self.transforms), op=f"{self.kind} style")
        if not self.name:
            self.name = self.kind


@dataclass
class SyntheticDataset:
    style: SyntheticStyle
    width: int
    height: int
    train: list[StylePair] = field(default_factory=list)
    test: list[StylePair] = field(default_factory=list)
    inputs: dict[str, RgbImage] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)


def random_planted_transform(rng: np.random.Generator, forced_signs: Sequence[Sign] = ()) -> ColorTransform:
    """Identity plus a perturbation of sign x U(0.5, 1) x column bound in every entry"""
    magnitude = rng.uniform(0.5, 1.0, size=(3, 10)) * PERTURBATION_BOUND
    signs = rng.choice([-1.0, 1.0], size=(3, 10))
    for row, col, sign in forced_signs:
        signs[row, col] = sign
    return ColorTransform(identity_transform().m + signs * magnitude)


def planted_global_style(seed: int, name: str = "global") -> SyntheticStyle:
    rng = np.random.default_rng(seed)
    return SyntheticStyle("global", [random_planted_transform(rng)], seed, name)


def planted_local_style(seed: int) -> SyntheticStyle:
    rng = np.random.default_rng(seed)
    transforms = [random_planted_transform(rng), random_planted_transform(rng)]
    return SyntheticStyle("local", transforms, seed, "local")


def preset_style(name: str) -> SyntheticStyle:
    if name not in PRESETS:
        raise ValueError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}")
    seed, signs = PRESETS[name]
    rng = np.random.default_rng(seed)
    return SyntheticStyle("global", [random_planted_transform(rng, signs)], seed, name, signs)


def make_style(name: str, seed: int) -> SyntheticStyle:
    """Style by CLI name; presets ignore ``seed``"""
    if name == "global":
        return planted_global_style(seed)
    if name == "local":
        return planted_local_style(seed)
    return preset_style(name)


def render_synthetic_image(seed: int | Sequence[int], w: int, h: int) -> tuple[RgbImage, np.ndarray]:
    """
    A seeded two-region image: an elliptical foreground with a radial gradient
    under a fine stripe texture, over a smooth linear-gradient background.
    Both regions get mild per-pixel noise.

    Returns:
        (image, mask) where mask is a boolean (h, w) array, True on the foreground
    """
    if w < MIN_SIDE or h < MIN_SIDE:
        raise ShapeError("image side", f">= {MIN_SIDE}", (w, h), op="render_synthetic_image")
    rng = np.random.default_rng(seed)
    lo, hi = COLOR_RANGE
    ys, xs = np.mgrid[0:h, 0:w]
    x = (xs + 0.5) / w
    y = (ys + 0.5) / h

    # background: linear gradient in a random direction
    c0, c1 = rng.uniform(lo, hi, size=(2, 3))
    theta = rng.uniform(0.0, 2.0 * np.pi)
    t = np.cos(theta) * x + np.sin(theta) * y
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    background = c0 + t[..., None] * (c1 - c0)

    # foreground: axis-aligned ellipse
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    rx, ry = rng.uniform(0.2, 0.4, size=2)
    r = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)
    mask = r <= 1.0
    c2, c3 = rng.uniform(lo, hi, size=(2, 3))

    # stripes with a period of a few pixels, independent of the image size
    period = rng.uniform(*STRIPE_PERIOD)
    angle = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    amplitude = rng.uniform(*STRIPE_AMPLITUDE, size=3)
    wave = np.sin(2.0 * np.pi * (np.cos(angle) * xs + np.sin(angle) * ys) / period + phase)
    foreground = c2 + np.clip(r, 0.0, 1.0)[..., None] * (c3 - c2) + wave[..., None] * amplitude

    pixels = np.where(mask[..., None], foreground, background)
    pixels = pixels + rng.normal(0.0, NOISE_STD, size=pixels.shape)
    return RgbImage(np.clip(np.round(pixels), *PIXEL_RANGE).astype(np.uint8)), mask


def apply_style(
    style: SyntheticStyle, img: RgbImage, mask: Optional[np.ndarray] = None, name: str = ""
) -> StylePair:
    """Styled pair in Lab; targets are exact (not re-quantized to 8 bits)"""
    lab = srgb_to_lab(img)
    if style.kind == "global":
        return StylePair(lab, apply_transform_image(style.transforms[0], lab), name)

    if mask is None:
        raise ShapeError("region mask", (img.height, img.width), None, op="apply_style")
    mask = np.asarray(mask)
    if mask.shape != (img.height, img.width):
        raise ShapeError("region mask", (img.height, img.width), mask.shape, op="apply_style")
    basis = quadratic_basis(lab.pixels)
    background, foreground = (contract(t.m, basis) for t in style.transforms)
    target = np.where(mask.astype(bool)[..., None], foreground, background)
    return StylePair(lab, LabImage(target), name)


def _target_shifts(deltas: Sequence[np.ndarray], lab: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel Lab offset the perturbations add on top of the identity"""
    basis = quadratic_basis(lab)
    shifts = [contract(d, basis) for d in deltas]
    if len(shifts) == 1:
        return shifts[0]
    return np.where(mask[..., None], shifts[1], shifts[0])


def _in_gamut(labs: Sequence[np.ndarray], shifts: Sequence[np.ndarray], scale: float) -> bool:
    return all(in_srgb_gamut(lab + scale * s, GAMUT_MARGIN).all() for lab, s in zip(labs, shifts))


def _largest_gamut_scale(labs: Sequence[np.ndarray], shifts: Sequence[np.ndarray], upper: float) -> float:
    """Bisection for a scale in [0, upper] that keeps every target in gamut; 0 always does"""
    if _in_gamut(labs, shifts, upper):
        return upper
    lo, hi = 0.0, upper
    for _ in range(GAMUT_BISECTIONS):
        mid = 0.5 * (lo + hi)
        if _in_gamut(labs, shifts, mid):
            lo = mid
        else:
            hi = mid
    return lo


def calibrate_style(
    style: SyntheticStyle, images: Sequence[tuple[LabImage, np.ndarray]], n_train: int
) -> SyntheticStyle:
    """
    Scale the planted perturbation to the rendered ``images`` of a dataset.

    The perturbation is scaled toward a mean input-vs-target distance of
    ``BASELINE_TARGET`` (never above its drawn size) and shrunk further until
    every target lies inside the sRGB gamut. When either split's mean distance
    then falls outside ``BASELINE_RANGE`` the perturbation is redrawn from a
    seeded stream, keeping ``style.forced_signs``.

    Args:
        images: (input, region mask) per image, training split first
        n_train: Number of leading images in the training split
    """
    identity = identity_transform().m
    labs = [lab.pixels for lab, _ in images]
    masks = [np.asarray(mask, dtype=bool) for _, mask in images]
    rng = np.random.default_rng([style.seed, CALIBRATION_STREAM])
    low, high = BASELINE_RANGE

    best = None
    for attempt in range(CALIBRATION_ATTEMPTS):
        if attempt == 0:
            deltas = [t.m - identity for t in style.transforms]
        else:
            deltas = [random_planted_transform(rng, style.forced_signs).m - identity for _ in style.transforms]
        shifts = [_target_shifts(deltas, lab, mask) for lab, mask in zip(labs, masks)]
        distances = np.array([np.linalg.norm(s, axis=-1).mean() for s in shifts])
        overall = float(distances.mean())
        if overall == 0.0:
            continue
        scale = _largest_gamut_scale(labs, shifts, min(1.0, BASELINE_TARGET / overall))
        baselines = (scale * float(distances[:n_train].mean()), scale * float(distances[n_train:].mean()))
        miss = max(low - min(baselines), max(baselines) - high, 0.0)
        if best is None or miss < best[0]:
            best = (miss, attempt, scale, deltas, baselines)
        if miss == 0.0:
            break

    if best is None:
        return style
    miss, attempt, scale, deltas, baselines = best
    if miss > 0.0:
        logger.warning(
            "%s style: no in-gamut draw reached baselines in %s; using train/test %.2f/%.2f",
            style.name, BASELINE_RANGE, *baselines,
        )
    logger.debug(
        "%s style calibrated: draw %d, scale %.4f, train/test baseline %.2f/%.2f",
        style.name, attempt, scale, *baselines,
    )
    transforms = [ColorTransform(identity + scale * d) for d in deltas]
    return SyntheticStyle(style.kind, transforms, style.seed, style.name, style.forced_signs)


def image_name(index: int) -> str:
    return f"img{index:04d}"


def make_dataset(style: SyntheticStyle, n_train: int, n_test: int, w: int, h: int) -> SyntheticDataset:
    """
    ``n_train + n_test`` distinct seeded images styled with ``style``.

    Image ``i`` is rendered from seed ``(style.seed, i)``; the first
    ``n_train`` form the training split. The style is first calibrated to the
    rendered images (see ``calibrate_style``), and the dataset carries the
    calibrated style.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError(f"split counts must be >= 1, got {n_train}/{n_test}")
    rendered = [render_synthetic_image((style.seed, i), w, h) for i in range(n_train + n_test)]
    style = calibrate_style(style, [(srgb_to_lab(img), mask) for img, mask in rendered], n_train)

    dataset = SyntheticDataset(style, w, h)
    for i, (img, mask) in enumerate(rendered):
        name = image_name(i)
        pair = apply_style(style, img, mask, name)
        dataset.inputs[name] = img
        dataset.masks[name] = mask
        (dataset.train if i < n_train else dataset.test).append(pair)
    logger.info(
        "generated %s style dataset: %d train / %d test, %dx%d", style.name, n_train, n_test, w, h
    )
    return dataset
