"""Standard and deformable 2D convolution with full reverse-mode gradients.

Both convolutions lower to the same ``weights @ columns`` product. Plain
convolution builds its columns by strided slicing; deformable convolution
builds them by bilinear sampling at grid positions displaced by an offset
field (see :mod:`stsn.kernels`). With an all-zero offset field the two
column matrices are identical, so the outputs agree bit for bit.

Offset fields have ``2N`` channels laid out as ``(dy_1, dx_1, dy_2, dx_2, ...)``
with the N kernel taps in row-major grid order. One field drives every
input channel.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels
from .tensor import NonFiniteError, Tensor, TensorError, record_op

__all__ = [
    "ConvSpec",
    "ConvParams",
    "bilinear_sample",
    "conv2d",
    "deform_conv2d",
    "offset_conv",
    "offset_spec",
]


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    pad: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.kernel_h <= 0 or self.kernel_w <= 0 or self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0:
            raise ValueError("kernel sizes must be odd and positive")
        if self.stride <= 0 or self.dilation <= 0 or self.pad < 0:
            raise ValueError("stride and dilation must be positive, pad non-negative")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channel counts must be positive")

    @property
    def num_taps(self):
        """N = |R|."""
        return self.kernel_h * self.kernel_w

    @cached_property
    def grid(self):
        """Integer ``(dy, dx)`` taps of R, row-major, scaled by dilation; shape [N, 2]."""
        ry, rx = self.kernel_h // 2, self.kernel_w // 2
        taps = [(dy * self.dilation, dx * self.dilation) for dy in range(-ry, ry + 1) for dx in range(-rx, rx + 1)]
        return np.array(taps, dtype=np.int64)

    def output_size(self, h, w):
        # grid is centred, so the leftmost tap sits at -(k//2)*dilation
        ho = (h + 2 * self.pad - self.dilation * (self.kernel_h - 1) - 1) // self.stride + 1
        wo = (w + 2 * self.pad - self.dilation * (self.kernel_w - 1) - 1) // self.stride + 1
        return ho, wo


@dataclass
class ConvParams:
    weights: Tensor  # [out, in, kh, kw]
    bias: Tensor  # [out]

    def check(self, spec):
        want = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
        if self.weights.dims != want:
            raise TensorError(f"weights dims {list(self.weights.dims)} != {list(want)}")
        if self.bias.dims != (spec.out_channels,):
            raise TensorError(f"bias dims {list(self.bias.dims)} != [{spec.out_channels}]")


def offset_spec(spec):
    """Geometry of the companion convolution that predicts ``spec``'s offsets."""
    return ConvSpec(
        spec.in_channels, 2 * spec.num_taps, spec.kernel_h, spec.kernel_w, spec.stride, spec.pad, spec.dilation
    )


def _check_input(x, spec):
    if len(x.dims) != 3:
        raise TensorError(f"expected [c,h,w] input, got {list(x.dims)}")
    if x.dims[0] != spec.in_channels:
        raise TensorError(f"input has {x.dims[0]} channels, spec expects {spec.in_channels}")
    ho, wo = spec.output_size(*x.dims[1:])
    if ho <= 0 or wo <= 0:
        raise TensorError("empty convolution output")
    return ho, wo


def _im2col(x, spec, ho, wo):
    """Zero-padded sliding-window columns ``[C * N, ho * wo]``."""
    C, H, W = x.shape
    p, s = spec.pad, spec.stride
    xp = np.zeros((C, H + 2 * p, W + 2 * p), dtype=x.dtype)
    xp[:, p : p + H, p : p + W] = x
    cols = np.empty((C, spec.num_taps, ho, wo), dtype=x.dtype)
    ry, rx = spec.kernel_h // 2, spec.kernel_w // 2
    for n, (dy, dx) in enumerate(spec.grid):
        y0 = dy + ry * spec.dilation
        x0 = dx + rx * spec.dilation
        cols[:, n] = xp[:, y0 : y0 + s * (ho - 1) + 1 : s, x0 : x0 + s * (wo - 1) + 1 : s]
    return cols.reshape(C * spec.num_taps, ho * wo)


def _col2im(gcols, spec, shape, ho, wo):
    C, H, W = shape
    p, s = spec.pad, spec.stride
    g = gcols.reshape(C, spec.num_taps, ho, wo)
    out = np.zeros((C, H + 2 * p, W + 2 * p), dtype=gcols.dtype)
    ry, rx = spec.kernel_h // 2, spec.kernel_w // 2
    for n, (dy, dx) in enumerate(spec.grid):
        y0 = dy + ry * spec.dilation
        x0 = dx + rx * spec.dilation
        out[:, y0 : y0 + s * (ho - 1) + 1 : s, x0 : x0 + s * (wo - 1) + 1 : s] += g[:, n]
    return out[:, p : p + H, p : p + W]


def _linear(cols, params, spec, ho, wo):
    w2 = params.weights.data.reshape(spec.out_channels, -1)
    out = w2 @ cols
    out += params.bias.data[:, None]
    return out.reshape(spec.out_channels, ho, wo), w2


def conv2d(x, spec, params):
    """``y(p0) = sum_n w(p_n) x(p0 + p_n) + b`` with zero padding."""
    params.check(spec)
    ho, wo = _check_input(x, spec)
    cols = _im2col(x.data, spec, ho, wo)
    out, w2 = _linear(cols, params, spec, ho, wo)
    shape = x.dims

    def bw(g):
        g2 = g.reshape(spec.out_channels, -1)
        gw = (g2 @ cols.T).reshape(params.weights.dims)
        gb = g2.sum(axis=1)
        gx = _col2im(w2.T @ g2, spec, shape, ho, wo)
        return gx, gw, gb

    return record_op(out, (x, params.weights, params.bias), bw)


def _grid_arrays(spec, dtype):
    # taps measured from the window's top-left corner, matching _im2col
    ry, rx = spec.kernel_h // 2, spec.kernel_w // 2
    return (spec.grid[:, 0] + ry * spec.dilation).astype(dtype), (spec.grid[:, 1] + rx * spec.dilation).astype(dtype)


def deform_conv2d(x, offsets, spec, params):
    """``y(p0) = sum_n w(p_n) x(p0 + p_n + dp_n) + b`` with bilinear sampling.

    Stride must be 1. Samples falling outside the input read as zero.
    Gradients flow to the input, weights, bias and offsets.
    """
    params.check(spec)
    if spec.stride != 1:
        raise TensorError("deformable convolution supports stride 1 only")
    ho, wo = _check_input(x, spec)
    if offsets.dims != (2 * spec.num_taps, ho, wo):
        raise TensorError(f"offset field dims {list(offsets.dims)} != {[2 * spec.num_taps, ho, wo]}")
    xd = x.data
    od = offsets.data.astype(xd.dtype, copy=False)
    gy, gx = _grid_arrays(spec, xd.dtype)
    cols = kernels.deform_im2col(xd, od, gy, gx, spec.pad)
    out, w2 = _linear(cols, params, spec, ho, wo)
    H, W = x.dims[1:]

    def bw(g):
        g2 = g.reshape(spec.out_channels, -1)
        gw = (g2 @ cols.T).reshape(params.weights.dims)
        gb = g2.sum(axis=1)
        gcols = np.ascontiguousarray(w2.T @ g2)
        gxin = kernels.deform_col2im(gcols, od, gy, gx, spec.pad, H, W)
        goff = kernels.deform_offset_grad(gcols, xd, od, gy, gx, spec.pad)
        return gxin, goff, gw, gb

    return record_op(out, (x, offsets, params.weights, params.bias), bw)


def offset_conv(x, spec, offset_params):
    """Predict the offset field for a deformable layer with geometry ``spec``.

    A plain convolution with ``2N`` outputs and no activation.
    """
    ospec = offset_spec(spec)
    if offset_params.weights.dims[0] != ospec.out_channels:
        raise TensorError(
            f"offset conv must have {ospec.out_channels} output channels, got {offset_params.weights.dims[0]}"
        )
    return conv2d(x, ospec, offset_params)


def bilinear_sample(fmap, y, x):
    """Sample every channel of ``fmap`` [c,h,w] at real position ``(y, x)``.

    ``y`` and ``x`` may be floats or scalar Tensors; gradients reach ``fmap``
    and any Tensor coordinate.
    """
    yt = y if isinstance(y, Tensor) else Tensor(np.float64(y))
    xt = x if isinstance(x, Tensor) else Tensor(np.float64(x))
    data = fmap.data
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite map")
    C, H, W = data.shape
    py, px = float(yt.data), float(xt.data)
    y0, x0 = int(np.floor(py)), int(np.floor(px))
    ly, lx = py - y0, px - x0

    def at(yy, xx):
        if 0 <= yy < H and 0 <= xx < W:
            return data[:, yy, xx]
        return np.zeros(C, dtype=data.dtype)

    v00, v01, v10, v11 = at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)
    corners = (
        (y0, x0, (1 - ly) * (1 - lx)),
        (y0, x0 + 1, (1 - ly) * lx),
        (y0 + 1, x0, ly * (1 - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    )
    out = sum(w * v for (_, _, w), v in zip(corners, (v00, v01, v10, v11)))
    dvy = (1 - lx) * (v10 - v00) + lx * (v11 - v01)
    dvx = (1 - ly) * (v01 - v00) + ly * (v11 - v10)

    def bw(g):
        gmap = np.zeros_like(data)
        for yy, xx, w in corners:
            if 0 <= yy < H and 0 <= xx < W:
                gmap[:, yy, xx] += g * w
        return gmap, np.asarray(g @ dvy), np.asarray(g @ dvx)

    return record_op(np.asarray(out, dtype=data.dtype), (fmap, yt, xt), bw)
