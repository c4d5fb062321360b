"""
Differentiable operations on channels x height x width tensors
Covers exactly what the stylization network needs: convolution (with stride,
dilation and zero, reflect or edge padding), ReLU, max pooling, bilinear upsampling,
reflection padding, channel concatenation/slicing, the enhancement layer and
the squared-error loss.
"""
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.color import contract
from app.errors import ShapeError
from app.tensor import Tensor, op_output

PaddingMode = Literal["none", "zero", "reflect", "edge"]


@dataclass(frozen=True)
class Padding:
    """Symmetric spatial padding applied before a convolution"""
    mode: PaddingMode = "none"
    amount: int = 0

    def __post_init__(self):
        if self.amount < 0:
            raise ValueError(f"padding amount must be non-negative, got {self.amount}")
        if self.mode == "none" and self.amount:
            raise ValueError("padding mode 'none' takes no amount")

    @classmethod
    def zero(cls, amount: int) -> "Padding":
        return cls("zero", amount)

    @classmethod
    def reflect(cls, amount: int) -> "Padding":
        return cls("reflect", amount)

    @classmethod
    def edge(cls, amount: int) -> "Padding":
        return cls("edge", amount)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2D convolution"""
    in_channels: int
    out_channels: int
    kernel_size: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    padding: Padding = field(default_factory=Padding)

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if min(self.kernel_size) < 1:
            raise ValueError(f"kernel size must be positive, got {self.kernel_size}")
        if min(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if min(self.dilation) < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        """out = floor((in + 2*pad - dilation*(k-1) - 1) / stride) + 1"""
        pad = self.padding.amount
        (kh, kw), (sh, sw), (dh, dw) = self.kernel_size, self.stride, self.dilation
        return (
            (h + 2 * pad - dh * (kh - 1) - 1) // sh + 1,
            (w + 2 * pad - dw * (kw - 1) - 1) // sw + 1,
        )


def _image_shape(x: Tensor, op: str) -> tuple[int, int, int]:
    if x.data.ndim != 3:
        raise ShapeError("rank", 3, x.data.ndim, op=op)
    return x.shape


def _pad_indices(n: int, amount: int, mode: str) -> np.ndarray:
    return np.pad(np.arange(n), amount, mode=mode)


def _check_reflect(h: int, w: int, amount: int, op: str) -> None:
    if amount >= min(h, w):
        raise ShapeError("reflect padding", f"< {min(h, w)}", amount, op=op)


def _pad_forward(data: np.ndarray, padding: Padding, op: str) -> np.ndarray:
    if padding.mode == "none" or padding.amount == 0:
        return data
    p = padding.amount
    if padding.mode == "zero":
        return np.pad(data, ((0, 0), (p, p), (p, p)))
    _, h, w = data.shape
    if padding.mode == "reflect":
        _check_reflect(h, w, p, op)
    rows, cols = _pad_indices(h, p, padding.mode), _pad_indices(w, p, padding.mode)
    return data[:, rows[:, None], cols[None, :]]


def _pad_backward(grad: np.ndarray, padding: Padding, shape: tuple[int, int, int]) -> np.ndarray:
    if padding.mode == "none" or padding.amount == 0:
        return grad
    p = padding.amount
    c, h, w = shape
    if padding.mode == "zero":
        return grad[:, p : p + h, p : p + w]
    rows, cols = _pad_indices(h, p, padding.mode), _pad_indices(w, p, padding.mode)
    out = np.zeros((h, w, c))
    np.add.at(out, (rows[:, None], cols[None, :]), grad.transpose(1, 2, 0))
    return out.transpose(2, 0, 1)


def _windows(
    data: np.ndarray,
    kernel: tuple[int, int],
    stride: tuple[int, int],
    dilation: tuple[int, int],
    op: str,
) -> np.ndarray:
    """Strided, dilated sliding windows: (C, Ho, Wo, kh, kw) view-or-copy of data"""
    (kh, kw), (sh, sw), (dh, dw) = kernel, stride, dilation
    ext_h, ext_w = dh * (kh - 1) + 1, dw * (kw - 1) + 1
    _, h, w = data.shape
    if ext_h > h:
        raise ShapeError("kernel height extent", f"<= {h}", ext_h, op=op)
    if ext_w > w:
        raise ShapeError("kernel width extent", f"<= {w}", ext_w, op=op)
    view = sliding_window_view(data, (ext_h, ext_w), axis=(1, 2))
    return view[:, ::sh, ::sw, ::dh, ::dw]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """2D cross-correlation; weights are (out_channels, in_channels, kh, kw)"""
    c, h, w = _image_shape(x, "conv2d")
    if c != spec.in_channels:
        raise ShapeError("input channels", spec.in_channels, c, op="conv2d")
    expected = (spec.out_channels, spec.in_channels, *spec.kernel_size)
    if weight.shape != expected:
        raise ShapeError("weight shape", expected, weight.shape, op="conv2d")
    if bias.shape != (spec.out_channels,):
        raise ShapeError("bias length", spec.out_channels, bias.shape, op="conv2d")

    xp = _pad_forward(x.data, spec.padding, "conv2d")
    cols = _windows(xp, spec.kernel_size, spec.stride, spec.dilation, "conv2d")
    data = np.tensordot(weight.data, cols, axes=([1, 2, 3], [0, 3, 4]))
    data += bias.data[:, None, None]
    out = op_output(data, (x, weight, bias), "conv2d")

    def _backward():
        g = out.grad
        if weight.requires_grad:
            weight._accumulate(np.tensordot(g, cols, axes=([1, 2], [1, 2])))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            (kh, kw), (sh, sw), (dh, dw) = spec.kernel_size, spec.stride, spec.dilation
            _, ho, wo = g.shape
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    r0, c0 = i * dh, j * dw
                    tap = np.tensordot(weight.data[:, :, i, j], g, axes=([0], [0]))
                    gxp[:, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw] += tap
            x._accumulate(_pad_backward(gxp, spec.padding, (c, h, w)))

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = op_output(np.where(mask, x.data, 0.0), (x,), "relu")

    def _backward():
        x._accumulate(out.grad * mask)

    out._backward = _backward
    return out


def max_pool(
    x: Tensor,
    kernel: tuple[int, int],
    stride: tuple[int, int],
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """
    Max pooling with optional symmetric zero padding and dilation.

    Ties route the gradient to the first maximum in row-major window order.
    """
    c, h, w = _image_shape(x, "max_pool")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = _windows(xp, kernel, stride, (dilation, dilation), "max_pool")
    _, ho, wo, kh, kw = windows.shape
    flat = windows.reshape(c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = op_output(data, (x,), "max_pool")

    def _backward():
        rows = np.arange(ho)[None, :, None] * stride[0] + (arg // kw) * dilation
        cols = np.arange(wo)[None, None, :] * stride[1] + (arg % kw) * dilation
        chans = np.broadcast_to(np.arange(c)[:, None, None], arg.shape)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, (chans, rows, cols), out.grad)
        x._accumulate(gxp[:, padding : padding + h, padding : padding + w])

    out._backward = _backward
    return out


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)"""
    a = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    t = pos - lo
    idx = np.arange(n_out)
    a[idx, lo] = 1.0 - t
    a[idx, lo + 1] += t
    return a


def bilinear_upsample(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Align-corners bilinear interpolation to a size no smaller than the input"""
    _, h, w = _image_shape(x, "bilinear_upsample")
    if target_h < h:
        raise ShapeError("target height", f">= {h}", target_h, op="bilinear_upsample")
    if target_w < w:
        raise ShapeError("target width", f">= {w}", target_w, op="bilinear_upsample")
    ah, aw = _interp_matrix(h, target_h), _interp_matrix(w, target_w)
    out = op_output((ah @ x.data) @ aw.T, (x,), "bilinear_upsample")

    def _backward():
        x._accumulate((ah.T @ out.grad) @ aw)

    out._backward = _backward
    return out


def reflect_pad(x: Tensor, amount: int) -> Tensor:
    """Mirror padding that excludes the edge pixel: [1,2,3] -> [2,1,2,3,2]"""
    c, h, w = _image_shape(x, "reflect_pad")
    padding = Padding.reflect(amount)
    out = op_output(_pad_forward(x.data, padding, "reflect_pad"), (x,), "reflect_pad")

    def _backward():
        x._accumulate(_pad_backward(out.grad, padding, (c, h, w)))

    out._backward = _backward
    return out


def concat_channels(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    spatial = _image_shape(tensors[0], "concat_channels")[1:]
    for t in tensors[1:]:
        if _image_shape(t, "concat_channels")[1:] != spatial:
            raise ShapeError("spatial size", spatial, t.shape[1:], op="concat_channels")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    out = op_output(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), "concat")

    def _backward():
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            t._accumulate(out.grad[lo:hi])

    out._backward = _backward
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c, _, _ = _image_shape(x, "slice_channels")
    if not 0 <= start < stop <= c:
        raise ShapeError("channel range", f"within [0, {c}]", (start, stop), op="slice_channels")
    out = op_output(x.data[start:stop].copy(), (x,), "slice")

    def _backward():
        g = np.zeros_like(x.data)
        g[start:stop] = out.grad
        x._accumulate(g)

    out._backward = _backward
    return out


def scale_channels(x: Tensor, factors: np.ndarray) -> Tensor:
    """Multiply channel k by the fixed factor factors[k]"""
    c, _, _ = _image_shape(x, "scale_channels")
    if factors.shape != (c,):
        raise ShapeError("factor count", c, factors.shape, op="scale_channels")
    f = factors[:, None, None]
    out = op_output(x.data * f, (x,), "scale")

    def _backward():
        x._accumulate(out.grad * f)

    out._backward = _backward
    return out


def enhance(transforms: Tensor, basis: np.ndarray) -> Tensor:
    """
    Enhancement layer: per-pixel 3x10 transform times the pixel's quadratic basis.

    Args:
        transforms: (30, H, W) tensor; channel c*10 + k holds entry (c, k)
        basis: (H, W, 10) constant basis array

    Returns:
        (3, H, W) tensor of enhanced Lab colors
    """
    n, h, w = _image_shape(transforms, "enhance")
    if n != 30:
        raise ShapeError("transform channels", 30, n, op="enhance")
    if basis.shape != (h, w, 10):
        raise ShapeError("basis shape", (h, w, 10), basis.shape, op="enhance")
    m = transforms.data.reshape(3, 10, h, w).transpose(2, 3, 0, 1)
    out = op_output(contract(m, basis).transpose(2, 0, 1), (transforms,), "enhance")

    def _backward():
        g = out.grad[:, None, :, :] * basis.transpose(2, 0, 1)[None, :, :, :]
        transforms._accumulate(g.reshape(30, h, w))

    out._backward = _backward
    return out


def pixel_mse(pred: Tensor, target: np.ndarray, pixels: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean over selected pixels of the squared Euclidean color error.

    Args:
        pred: (3, H, W) predicted colors
        target: (3, H, W) ground-truth colors
        pixels: Flat pixel indices, or a boolean (H, W) mask; None selects all

    Returns:
        Scalar tensor
    """
    c, h, w = _image_shape(pred, "pixel_mse")
    if target.shape != (c, h, w):
        raise ShapeError("target shape", (c, h, w), target.shape, op="pixel_mse")
    if pixels is None:
        idx = np.arange(h * w)
    else:
        pixels = np.asarray(pixels)
        if pixels.dtype == bool:
            if pixels.shape != (h, w):
                raise ShapeError("mask shape", (h, w), pixels.shape, op="pixel_mse")
            idx = np.flatnonzero(pixels)
        else:
            idx = pixels.astype(np.int64).ravel()
    if idx.size == 0:
        raise ShapeError("selected pixels", ">= 1", 0, op="pixel_mse")

    diff = pred.data.reshape(c, -1)[:, idx] - target.reshape(c, -1)[:, idx]
    out = op_output((diff * diff).sum() / idx.size, (pred,), "pixel_mse")

    def _backward():
        g = np.zeros((h * w, c))
        np.add.at(g, idx, (2.0 * diff / idx.size * out.grad).T)
        pred._accumulate(g.T.reshape(c, h, w))

    out._backward = _backward
    return out


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial window [top, top + height) x [left, left + width)"""
    _, h, w = _image_shape(x, "crop")
    if top < 0 or left < 0 or height < 1 or width < 1 or top + height > h or left + width > w:
        raise ShapeError("crop window", f"inside {h}x{w}", (top, left, height, width), op="crop")
    rows, cols = slice(top, top + height), slice(left, left + width)
    out = op_output(x.data[:, rows, cols].copy(), (x,), "crop")

    def _backward():
        g = np.zeros_like(x.data)
        g[:, rows, cols] = out.grad
        x._accumulate(g)

    out._backward = _backward
    return out
