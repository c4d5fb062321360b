"""
Stylization network
A small fully convolutional backbone (output stride 8: pool4/pool5 run at
stride 1 and the following layers are dilated to keep the receptive field)
extracts context features from the original and the 2x upsampled image. Both
context maps are interpolated back to full resolution, concatenated with the
pixel's own Lab color and fed through three 1x1 convolutions that predict a
3x10 color transform per pixel. The enhancement layer multiplies each
transform with the pixel's quadratic color basis.
"""
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from app.color import ColorTransform, LabImage, identity_transform, quadratic_basis
from app.errors import ShapeError
from app.ops import (
    ConvSpec,
    Padding,
    bilinear_upsample,
    concat_channels,
    conv2d,
    crop,
    enhance,
    max_pool,
    reflect_pad,
    relu,
    scale_channels,
)
from app.tensor import Tensor

OUTPUT_STRIDE = 8
TRANSFORM_CHANNELS = 30
PIXEL_CHANNELS = 3

# Backbone and pixel feature see Lab / 100
LAB_INPUT_SCALE = 100.0

# Head outputs are scaled per basis column so a unit change of any output moves
# the enhanced color by roughly 100 Lab units at the top of the L range.
TRANSFORM_COLUMN_SCALE = np.array([0.01] * 6 + [1.0] * 3 + [100.0])
OUTPUT_CHANNEL_SCALE = np.tile(TRANSFORM_COLUMN_SCALE, 3)


class BackboneConfig(BaseModel):
    """Architecture widths and initialization seed"""

    model_config = ConfigDict(frozen=True)

    stage_channels: tuple[int, int, int, int, int] = (16, 16, 32, 32, 32)
    context_channels: int = 64
    head_hidden: tuple[int, int] = (32, 32)
    seed: int = 0
    reflect_pad: int = 8

    @field_validator("stage_channels", "head_hidden", mode="before")
    @classmethod
    def _split_commas(cls, v):
        if isinstance(v, str):
            return tuple(int(part) for part in v.split(",") if part.strip())
        return v

    @field_validator("stage_channels", "head_hidden")
    @classmethod
    def _positive_widths(cls, v):
        if any(width < 1 for width in v):
            raise ValueError(f"all widths must be >= 1, got {v}")
        return v

    @field_validator("context_channels")
    @classmethod
    def _positive_context(cls, v):
        if v < 1:
            raise ValueError("context_channels must be >= 1")
        return v

    @field_validator("seed")
    @classmethod
    def _non_negative_seed(cls, v):
        if v < 0:
            raise ValueError("seed must be non-negative")
        return v

    @field_validator("reflect_pad")
    @classmethod
    def _pad_multiple_of_stride(cls, v):
        if v < 0 or v % OUTPUT_STRIDE:
            raise ValueError(f"reflect_pad must be a non-negative multiple of {OUTPUT_STRIDE}")
        return v

    def min_image_side(self) -> int:
        return 8 if self.reflect_pad == 0 else max(16, self.reflect_pad + 1)


@dataclass(frozen=True)
class LayerGeometry:
    """Kernel geometry of one backbone layer, for size and receptive-field arithmetic"""
    name: str
    kernel: int
    stride: int
    dilation: int
    padding: int


@dataclass(frozen=True)
class PoolSpec:
    kernel: int = 3
    stride: int = 2
    dilation: int = 1

    @property
    def padding(self) -> int:
        return self.dilation


@dataclass(frozen=True)
class Stage:
    name: str
    conv: ConvSpec
    pool: Optional[PoolSpec]


@dataclass
class Backbone:
    stages: list[Stage]
    params: dict[str, Tensor]


FeatureRole = Literal["pixel", "context_scale1", "context_scale2", "context", "concat"]


@dataclass
class FeatureMap:
    tensor: Tensor
    role: FeatureRole

    def __post_init__(self):
        if self.role == "pixel" and self.tensor.shape[0] != PIXEL_CHANNELS:
            raise ShapeError("pixel feature channels", PIXEL_CHANNELS, self.tensor.shape[0])


@dataclass(frozen=True)
class ReceptiveField:
    """Size and effective stride of one context cell, in original-image pixels"""
    size: float
    stride: float


def backbone_stages(config: BackboneConfig, compensated: bool = True) -> list[Stage]:
    """
    Five (3x3 conv, ReLU, 3x3 pool) stages plus the dilated context conv.

    With ``compensated`` (the real network) pool4/pool5 use stride 1 and stage 5
    plus pool5 are dilated by 2, the context conv by 4. Without it, pool4/pool5
    keep stride 2 and nothing is dilated; this variant exists only for
    receptive-field comparison.

    Convolutions replicate edge pixels, so a constant input stays constant
    through every layer; pools zero-pad, which only ever sees ReLU outputs.
    """
    stages = []
    in_ch = PIXEL_CHANNELS
    for i, out_ch in enumerate(config.stage_channels, start=1):
        dilation = 2 if (i == 5 and compensated) else 1
        stride = 2 if (i <= 3 or not compensated) else 1
        conv = ConvSpec(
            in_ch, out_ch, (3, 3), (1, 1), (dilation, dilation), Padding.edge(dilation)
        )
        stages.append(Stage(f"stage{i}", conv, PoolSpec(3, stride, dilation)))
        in_ch = out_ch
    dilation = 4 if compensated else 1
    conv = ConvSpec(
        in_ch, config.context_channels, (3, 3), (1, 1), (dilation, dilation), Padding.edge(dilation)
    )
    stages.append(Stage("context", conv, None))
    return stages


def backbone_layers(config: BackboneConfig, compensated: bool = True) -> list[LayerGeometry]:
    layers = []
    for stage in backbone_stages(config, compensated):
        conv = stage.conv
        layers.append(
            LayerGeometry(
                f"{stage.name}.conv", conv.kernel_size[0], conv.stride[0], conv.dilation[0],
                conv.padding.amount,
            )
        )
        if stage.pool is not None:
            pool = stage.pool
            layers.append(
                LayerGeometry(f"{stage.name}.pool", pool.kernel, pool.stride, pool.dilation, pool.padding)
            )
    return layers


def head_specs(config: BackboneConfig) -> list[tuple[str, ConvSpec]]:
    widths = [PIXEL_CHANNELS + 2 * config.context_channels, *config.head_hidden, TRANSFORM_CHANNELS]
    names = ["head1", "head2", "head_out"]
    return [
        (name, ConvSpec(c_in, c_out, (1, 1)))
        for name, c_in, c_out in zip(names, widths[:-1], widths[1:])
    ]


def _conv_params(name: str, spec: ConvSpec) -> dict[str, Tensor]:
    shape = (spec.out_channels, spec.in_channels, *spec.kernel_size)
    return {
        f"{name}.weight": Tensor(np.zeros(shape), requires_grad=True),
        f"{name}.bias": Tensor(np.zeros(spec.out_channels), requires_grad=True),
    }


def build_backbone(config: BackboneConfig) -> Backbone:
    """Allocate (zeroed) backbone parameters for the compensated layer chain"""
    stages = backbone_stages(config)
    params: dict[str, Tensor] = {}
    for stage in stages:
        params.update(_conv_params(stage.name, stage.conv))
    return Backbone(stages, params)


def parameter_count(config: BackboneConfig) -> int:
    total = 0
    convs = [s.conv for s in backbone_stages(config)] + [spec for _, spec in head_specs(config)]
    for spec in convs:
        kh, kw = spec.kernel_size
        total += spec.out_channels * (spec.in_channels * kh * kw + 1)
    return total


class StylizeNet:
    """
    Assembled network: backbone shared by both scales, 1x1 head, and the
    architecture config. Parameters are initialized from ``config.seed``.
    """

    def __init__(self, config: Optional[BackboneConfig] = None):
        self.config = config or BackboneConfig()
        self.backbone = build_backbone(self.config)
        self.head_specs = head_specs(self.config)
        self.head: dict[str, Tensor] = {}
        for name, spec in self.head_specs:
            self.head.update(_conv_params(name, spec))
        init_params(self, self.config.seed)

    def parameters(self) -> dict[str, Tensor]:
        """All parameters by name, backbone first, in a fixed order"""
        return {**self.backbone.params, **self.head}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            raise ShapeError("parameter names", "missing none, extra none", f"missing {missing}, extra {extra}")
        for name, tensor in params.items():
            if arrays[name].shape != tensor.shape:
                raise ShapeError(f"{name} shape", tensor.shape, arrays[name].shape)
            tensor.data[...] = arrays[name]
            tensor.zero_grad()


def init_params(net: StylizeNet, seed: int) -> None:
    """
    Seeded fan-in-scaled uniform initialization.

    The head output layer gets zero weights and a bias equal to the flattened
    identity transform, so a fresh network maps every image to itself.
    """
    rng = np.random.default_rng(seed)
    convs = [(s.name, s.conv) for s in net.backbone.stages] + net.head_specs
    params = net.parameters()
    for name, spec in convs:
        weight, bias = params[f"{name}.weight"], params[f"{name}.bias"]
        if name == "head_out":
            weight.data[...] = 0.0
            bias.data[...] = identity_transform().flatten() / OUTPUT_CHANNEL_SCALE
        else:
            kh, kw = spec.kernel_size
            bound = np.sqrt(6.0 / (spec.in_channels * kh * kw))
            weight.data[...] = rng.uniform(-bound, bound, size=weight.shape)
            bias.data[...] = 0.0
        weight.zero_grad()
        bias.zero_grad()


def _layer_output(size: int, layer: LayerGeometry) -> int:
    return (size + 2 * layer.padding - layer.dilation * (layer.kernel - 1) - 1) // layer.stride + 1


def context_map_size(config: BackboneConfig, h: int, w: int, scale: int = 1) -> tuple[int, int]:
    """Pre-interpolation context map size for an h x w image on the given scale path"""
    sizes = []
    for side in (h, w):
        size = scale * side + 2 * config.reflect_pad
        for layer in backbone_layers(config):
            size = _layer_output(size, layer)
        sizes.append(size - 2 * (config.reflect_pad // OUTPUT_STRIDE))
    return sizes[0], sizes[1]


def receptive_field(config: BackboneConfig, scale: int = 1, compensated: bool = True) -> ReceptiveField:
    """
    Receptive field of one context cell, measured in original-image pixels.

    The scale-2 path sees the 2x upsampled image, so both its size and its
    stride are halved in original pixels.
    """
    if scale not in (1, 2):
        raise ValueError(f"scale must be 1 or 2, got {scale}")
    size, jump = 1, 1
    for layer in backbone_layers(config, compensated):
        size += layer.dilation * (layer.kernel - 1) * jump
        jump *= layer.stride
    return ReceptiveField(size / scale, jump / scale)


def _check_image(net: StylizeNet, img: LabImage) -> None:
    side = net.config.min_image_side()
    if img.height < side:
        raise ShapeError("image height", f">= {side}", img.height, op="stylize")
    if img.width < side:
        raise ShapeError("image width", f">= {side}", img.width, op="stylize")


def run_backbone(net: StylizeNet, x: Tensor) -> Tensor:
    """Backbone on an already padded input, no cropping"""
    params = net.backbone.params
    for stage in net.backbone.stages:
        x = relu(conv2d(x, params[f"{stage.name}.weight"], params[f"{stage.name}.bias"], stage.conv))
        if stage.pool is not None:
            pool = stage.pool
            x = max_pool(x, (pool.kernel, pool.kernel), (pool.stride, pool.stride), pool.padding, pool.dilation)
    return x


def _network_input(img: LabImage) -> Tensor:
    return Tensor(img.channels_first() / LAB_INPUT_SCALE)


def context_maps(net: StylizeNet, img: LabImage) -> tuple[FeatureMap, FeatureMap]:
    """Pre-interpolation context maps of the original and the 2x upsampled image"""
    _check_image(net, img)
    pad = net.config.reflect_pad
    trim = pad // OUTPUT_STRIDE
    x = _network_input(img)
    inputs = {
        "context_scale1": x,
        "context_scale2": bilinear_upsample(x, 2 * img.height, 2 * img.width),
    }
    maps = []
    for role, source in inputs.items():
        padded = reflect_pad(source, pad) if pad else source
        features = run_backbone(net, padded)
        if trim:
            _, fh, fw = features.shape
            features = crop(features, trim, trim, fh - 2 * trim, fw - 2 * trim)
        maps.append(FeatureMap(features, role))
    return maps[0], maps[1]


def two_scale_context(net: StylizeNet, img: LabImage) -> FeatureMap:
    """Both context maps interpolated to H x W and concatenated (2 * context_channels)"""
    scale1, scale2 = context_maps(net, img)
    full = [bilinear_upsample(m.tensor, img.height, img.width) for m in (scale1, scale2)]
    return FeatureMap(concat_channels(*full), "context")


def forward_graph(net: StylizeNet, img: LabImage) -> tuple[Tensor, Tensor]:
    """
    Differentiable forward pass.

    Returns:
        (transforms, enhanced): (30, H, W) raw-unit transform tensor and
        (3, H, W) enhanced Lab tensor
    """
    context = two_scale_context(net, img)
    pixel = FeatureMap(_network_input(img), "pixel")
    h = concat_channels(pixel.tensor, context.tensor)
    for name, spec in net.head_specs:
        h = conv2d(h, net.head[f"{name}.weight"], net.head[f"{name}.bias"], spec)
        if name != "head_out":
            h = relu(h)
    transforms = scale_channels(h, OUTPUT_CHANNEL_SCALE)
    enhanced = enhance(transforms, quadratic_basis(img.pixels))
    return transforms, enhanced


@dataclass
class StylizeResult:
    transforms: np.ndarray  # (H, W, 3, 10)
    enhanced: LabImage

    def transform_at(self, row: int, col: int) -> ColorTransform:
        return ColorTransform(self.transforms[row, col])


def forward(net: StylizeNet, img: LabImage) -> StylizeResult:
    transforms, enhanced = forward_graph(net, img)
    _, h, w = transforms.shape
    return StylizeResult(
        transforms.data.reshape(3, 10, h, w).transpose(2, 3, 0, 1).copy(),
        LabImage(enhanced.data.transpose(1, 2, 0)),
    )
