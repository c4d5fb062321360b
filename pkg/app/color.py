"""
CIELab color math
sRGB <-> CIELab (D65) conversion, the quadratic color basis, 3x10 color
transforms, the per-pixel L2 metric and PNG I/O.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from app.errors import DatasetError, ShapeError

# IEC 61966-2-1 primaries, D65
SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])

# CIE constants in exact rational form
EPSILON = 216.0 / 24389.0
KAPPA = 24389.0 / 27.0

# sRGB gamut envelope in Lab; sanity bound for converted images only
LAB_ENVELOPE = ((0.0, 100.0), (-87.0, 99.0), (-108.0, 95.0))

BASIS_TERMS = ("L2", "a2", "b2", "La", "Lb", "ab", "L", "a", "b", "1")


@dataclass
class RgbImage:
    """8-bit sRGB image, pixels shaped (height, width, 3)"""
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError("pixel layout", "(H, W, 3)", self.pixels.shape, op="RgbImage")
        if self.pixels.dtype != np.uint8:
            if self.pixels.min() < 0 or self.pixels.max() > 255:
                raise ValueError("RgbImage values must lie in [0, 255]")
            self.pixels = self.pixels.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class LabImage:
    """CIELab (D65) image, float64 pixels shaped (height, width, 3)"""
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError("pixel layout", "(H, W, 3)", self.pixels.shape, op="LabImage")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def in_srgb_envelope(self, tol: float = 1e-3) -> bool:
        """Whether every channel lies in the Lab envelope of the sRGB gamut"""
        for ch, (lo, hi) in enumerate(LAB_ENVELOPE):
            values = self.pixels[..., ch]
            if values.min() < lo - tol or values.max() > hi + tol:
                return False
        return True

    def channels_first(self) -> np.ndarray:
        """(3, H, W) copy for the network"""
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1))


@dataclass
class ColorTransform:
    """A 3x10 matrix mapping the quadratic basis to an output Lab color"""
    m: np.ndarray

    def __post_init__(self):
        self.m = np.array(self.m, dtype=np.float64)
        if self.m.shape != (3, 10):
            raise ShapeError("transform shape", (3, 10), self.m.shape, op="ColorTransform")
        if not np.isfinite(self.m).all():
            raise ValueError("ColorTransform entries must be finite")

    def flatten(self) -> np.ndarray:
        """Row-major 30-vector, the layout of the network's output channels"""
        return self.m.reshape(30).copy()

    def to_list(self) -> list[list[float]]:
        return self.m.tolist()


def _srgb_to_linear(v: np.ndarray) -> np.ndarray:
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(v: np.ndarray) -> np.ndarray:
    v = np.clip(v, 0.0, None)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * v ** (1.0 / 2.4) - 0.055)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > EPSILON, np.cbrt(t), (KAPPA * t + 16.0) / 116.0)


def srgb_to_lab(img: RgbImage) -> LabImage:
    """sRGB transfer -> linear RGB -> XYZ (D65) -> CIELab"""
    linear = _srgb_to_linear(img.pixels.astype(np.float64) / 255.0)
    xyz = (linear @ SRGB_TO_XYZ.T) / D65_WHITE
    fx, fy, fz = _f(xyz[..., 0]), _f(xyz[..., 1]), _f(xyz[..., 2])
    lightness = np.where(xyz[..., 1] > EPSILON, 116.0 * fy - 16.0, KAPPA * xyz[..., 1])
    return LabImage(np.stack([lightness, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1))


def lab_to_xyz(lab: np.ndarray) -> np.ndarray:
    lightness, a, b = lab[..., 0], lab[..., 1], lab[..., 2]
    fy = (lightness + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    xr = np.where(fx**3 > EPSILON, fx**3, (116.0 * fx - 16.0) / KAPPA)
    yr = np.where(lightness > KAPPA * EPSILON, fy**3, lightness / KAPPA)
    zr = np.where(fz**3 > EPSILON, fz**3, (116.0 * fz - 16.0) / KAPPA)
    return np.stack([xr, yr, zr], axis=-1) * D65_WHITE


def lab_to_linear_rgb(lab: np.ndarray) -> np.ndarray:
    """Unclamped linear RGB; channels outside [0, 1] are out of the sRGB gamut"""
    return lab_to_xyz(np.asarray(lab, dtype=np.float64)) @ XYZ_TO_SRGB.T


def in_srgb_gamut(lab: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Per-pixel mask of Lab colors whose linear RGB lies in [margin, 1 - margin]"""
    linear = lab_to_linear_rgb(lab)
    return np.all((linear >= margin) & (linear <= 1.0 - margin), axis=-1)


def lab_to_srgb(img: LabImage) -> RgbImage:
    """Inverse conversion; out-of-gamut channels are clamped to [0, 255] after rounding"""
    linear = lab_to_linear_rgb(img.pixels)
    encoded = np.round(_linear_to_srgb(linear) * 255.0)
    return RgbImage(np.clip(encoded, 0, 255).astype(np.uint8))


def quadratic_basis(c) -> np.ndarray:
    """
    [L^2, a^2, b^2, La, Lb, ab, L, a, b, 1] for a Lab triple or any array whose
    last axis holds Lab triples.
    """
    c = np.asarray(c, dtype=np.float64)
    lightness, a, b = c[..., 0], c[..., 1], c[..., 2]
    return np.stack(
        [
            lightness * lightness,
            a * a,
            b * b,
            lightness * a,
            lightness * b,
            a * b,
            lightness,
            a,
            b,
            np.ones_like(lightness),
        ],
        axis=-1,
    )


def contract(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """
    (..., 3, 10) transforms times (..., 10) basis vectors -> (..., 3).

    Terms are accumulated one basis entry at a time in basis order, so every
    caller produces bit-identical results for the same pixel.
    """
    out = m[..., 0] * v[..., None, 0]
    for k in range(1, 10):
        out = out + m[..., k] * v[..., None, k]
    return out


def apply_transform(t: ColorTransform, basis: np.ndarray) -> np.ndarray:
    return contract(t.m, np.asarray(basis, dtype=np.float64))


def apply_transform_image(t: ColorTransform, img: LabImage) -> LabImage:
    return LabImage(contract(t.m, quadratic_basis(img.pixels)))


def identity_transform() -> ColorTransform:
    m = np.zeros((3, 10))
    m[0, 6] = m[1, 7] = m[2, 8] = 1.0
    return ColorTransform(m)


def mean_l2(a: LabImage, b: LabImage) -> float:
    """Mean over pixels of the Euclidean norm of the Lab difference"""
    if a.pixels.shape != b.pixels.shape:
        raise ShapeError("image size", a.pixels.shape, b.pixels.shape, op="mean_l2")
    return float(np.linalg.norm(a.pixels - b.pixels, axis=-1).mean())


def read_png(path: str | Path) -> RgbImage:
    """Read an 8-bit PNG; alpha is dropped"""
    try:
        with Image.open(path) as im:
            return RgbImage(np.asarray(im.convert("RGB"), dtype=np.uint8))
    except OSError as e:
        raise DatasetError(f"cannot read PNG ({e})", str(path)) from e


def write_png(img: RgbImage, path: str | Path) -> None:
    try:
        Image.fromarray(np.ascontiguousarray(img.pixels)).save(path, format="PNG")
    except OSError as e:
        raise DatasetError(f"cannot write PNG ({e})", str(path)) from e
