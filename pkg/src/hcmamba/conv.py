"""Channels-last 2-D convolution with dilation and groups, plus receptive-field tools.

Convolution here is cross-correlation: ``out[i, j] = Σ_{u,v} x[i*s + d*u, j*s + d*v] w[u, v]``
over the zero-padded input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, backward
from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1
    padding: tuple[tuple[int, int], tuple[int, int]] = ((0, 0), (0, 0))
    stride: tuple[int, int] = (1, 1)
    bias: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractError("channel counts must be positive")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ContractError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}")
        if min(self.dilation) < 1 or min(self.stride) < 1 or min(self.kernel) < 1:
            raise ContractError("kernel, dilation and stride must be >= 1")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: int = 3, dilation: int = 1,
             groups: int = 1, bias: bool = True) -> "Conv2dSpec":
        """Stride-1 spec whose output keeps the input's spatial size (odd kernels)."""
        if kernel % 2 == 0:
            raise ContractError("'same' padding needs an odd kernel")
        p = dilation * (kernel - 1) // 2
        return cls(in_channels, out_channels, (kernel, kernel), (dilation, dilation), groups,
                   ((p, p), (p, p)), (1, 1), bias)

    @classmethod
    def depthwise(cls, channels: int, kernel: int = 3, dilation: int = 1, bias: bool = True):
        return cls.same(channels, channels, kernel, dilation, groups=channels, bias=bias)

    @classmethod
    def pointwise(cls, in_channels: int, out_channels: int, bias: bool = True):
        return cls(in_channels, out_channels, (1, 1), bias=bias)

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def is_pointwise(self) -> bool:
        return self.kernel == (1, 1) and self.dilation == (1, 1)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def fan_in(self) -> int:
        return (self.in_channels // self.groups) * self.kernel[0] * self.kernel[1]

    def param_count(self) -> int:
        return int(np.prod(self.weight_shape)) + (self.out_channels if self.bias else 0)

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        (pt, pb), (pl, pr) = self.padding
        eh = self.dilation[0] * (self.kernel[0] - 1) + 1
        ew = self.dilation[1] * (self.kernel[1] - 1) + 1
        ho = (height + pt + pb - eh) // self.stride[0] + 1
        wo = (width + pl + pr - ew) // self.stride[1] + 1
        return ho, wo


def init_conv(spec: Conv2dSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    """Uniform(±sqrt(1/fan_in)) weights and bias."""
    bound = np.sqrt(1.0 / spec.fan_in)
    w = rng.uniform(-bound, bound, size=spec.weight_shape)
    b = rng.uniform(-bound, bound, size=spec.out_channels) if spec.bias else None
    return w, b


def conv2d(x, spec: Conv2dSpec, weight, bias=None) -> Tensor:
    """``[B, H, W, Cin] -> [B, H', W', Cout]`` with weights ``[Cout, Cin/groups, kh, kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or x.shape[-1] != spec.in_channels:
        raise DimensionError(f"conv2d: input {x.shape} does not have {spec.in_channels} channels")
    if weight.shape != spec.weight_shape:
        raise ContractError(f"conv2d: weight {weight.shape} != expected {spec.weight_shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (spec.out_channels,):
            raise ContractError(f"conv2d: bias {bias.shape} != ({spec.out_channels},)")
    B, H, W, cin = x.shape
    ho, wo = spec.output_size(H, W)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: output extent {ho}x{wo} from input {H}x{W}")
    (pt, pb), (pl, pr) = spec.padding
    kh, kw = spec.kernel
    dh, dw = spec.dilation
    sh, sw = spec.stride
    xpad = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    taps = [(u, v) for u in range(kh) for v in range(kw)]

    def window(u, v):
        return (slice(None), slice(u * dh, u * dh + (ho - 1) * sh + 1, sh),
                slice(v * dw, v * dw + (wo - 1) * sw + 1, sw), slice(None))

    wd = weight.data
    g = spec.groups
    cin_g, cout_g = cin // g, spec.out_channels // g
    depthwise = cin_g == 1 and cout_g == 1

    if depthwise:
        out = np.zeros((B, ho, wo, cin), dtype=x.dtype)
        for u, v in taps:
            out += xpad[window(u, v)] * wd[:, 0, u, v]
    else:
        # im2col per group: columns ordered (tap, in-channel)
        cols = np.concatenate([xpad[window(u, v)] for u, v in taps], axis=-1)
        cols = cols.reshape(B, ho, wo, len(taps), g, cin_g)
        wmat = wd.reshape(g, cout_g, cin_g, kh * kw).transpose(0, 3, 2, 1)  # [g, taps, cin_g, cout_g]
        wmat = wmat.reshape(g, len(taps) * cin_g, cout_g)
        cols_g = cols.transpose(0, 1, 2, 4, 3, 5).reshape(B * ho * wo, g, len(taps) * cin_g)
        out = np.einsum("rgk,gko->rgo", cols_g, wmat) if g > 1 else (cols_g[:, 0] @ wmat[0])[:, None]
        out = out.reshape(B, ho, wo, spec.out_channels)
    if bias is not None:
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(gout):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = gout.reshape(-1, spec.out_channels).sum(axis=0)
        if depthwise:
            if weight.requires_grad:
                gw = np.zeros_like(wd)
                for u, v in taps:
                    gw[:, 0, u, v] = (gout * xpad[window(u, v)]).reshape(-1, cin).sum(axis=0)
            if x.requires_grad:
                gpad = np.zeros_like(xpad)
                for u, v in taps:
                    gpad[window(u, v)] += gout * wd[:, 0, u, v]
                gx = gpad[:, pt:pt + H, pl:pl + W, :]
        else:
            g2 = gout.reshape(B * ho * wo, g, cout_g)
            if weight.requires_grad:
                gwm = np.einsum("rgk,rgo->gko", cols_g, g2) if g > 1 else (cols_g[:, 0].T @ g2[:, 0])[None]
                gw = gwm.reshape(g, len(taps), cin_g, cout_g).transpose(0, 3, 2, 1)
                gw = gw.reshape(spec.out_channels, cin_g, kh, kw)
            if x.requires_grad:
                gcols = np.einsum("rgo,gko->rgk", g2, wmat) if g > 1 else (g2[:, 0] @ wmat[0].T)[:, None]
                gcols = gcols.reshape(B, ho, wo, g, len(taps), cin_g).transpose(0, 1, 2, 4, 3, 5)
                gcols = gcols.reshape(B, ho, wo, len(taps), cin)
                gpad = np.zeros_like(xpad)
                for t, (u, v) in enumerate(taps):
                    gpad[window(u, v)] += gcols[:, :, :, t]
                gx = gpad[:, pt:pt + H, pl:pl + W, :]
        return (gx, gw) if bias is None else (gx, gw, gb)
    return Tensor.from_op(out, parents, backward, "conv2d")


def depthwise_separable(x, dw_spec: Conv2dSpec, pw_spec: Conv2dSpec, dw_weight, dw_bias,
                        pw_weight, pw_bias) -> Tensor:
    """Per-channel spatial conv followed by a 1x1 channel-mixing conv."""
    if not dw_spec.is_depthwise:
        raise ContractError("first stage of a depthwise-separable conv must be depthwise")
    if not pw_spec.is_pointwise:
        raise ContractError("second stage of a depthwise-separable conv must be pointwise")
    if pw_spec.in_channels != dw_spec.out_channels:
        raise ContractError(
            f"channel chain broken: depthwise emits {dw_spec.out_channels}, "
            f"pointwise expects {pw_spec.in_channels}")
    return conv2d(conv2d(x, dw_spec, dw_weight, dw_bias), pw_spec, pw_weight, pw_bias)


def separable_param_count(in_channels: int, out_channels: int, kernel: int = 3,
                          bias: bool = False) -> int:
    """``Cin*k*k + Cin*Cout`` (plus both bias vectors when ``bias``)."""
    n = in_channels * kernel * kernel + in_channels * out_channels
    return n + (in_channels + out_channels if bias else 0)


# -- receptive fields ---------------------------------------------------------

def _check_schedule(schedule: Sequence[int], kernel: int) -> None:
    if kernel < 1 or kernel % 2 == 0:
        raise ContractError(f"kernel must be odd and >= 1, got {kernel}")
    if any(r < 1 for r in schedule):
        raise ContractError(f"dilation rates must be >= 1, got {list(schedule)}")


def receptive_field(schedule: Sequence[int], kernel: int = 3) -> int:
    """Extent of a stride-1 stack: ``1 + Σ (kernel - 1) * rate``."""
    _check_schedule(schedule, kernel)
    return 1 + sum((kernel - 1) * r for r in schedule)


@dataclass
class Coverage:
    offsets: np.ndarray      # sorted 1-D input offsets reachable from one output position
    mask: np.ndarray         # [2R+1, 2R+1] boolean 2-D coverage (outer product per axis)
    continuous: bool

    @property
    def extent(self) -> int:
        return int(self.offsets.max() - self.offsets.min() + 1)


def gridding_coverage(schedule: Sequence[int], kernel: int = 3) -> Coverage:
    """Offsets reachable through the stack (iterated Minkowski sum of tap sets)."""
    _check_schedule(schedule, kernel)
    reach = {0}
    half = kernel // 2
    for r in schedule:
        taps = [r * k for k in range(-half, half + 1)]
        reach = {a + t for a in reach for t in taps}
    offsets = np.array(sorted(reach))
    radius = int(np.abs(offsets).max())
    line = np.zeros(2 * radius + 1, dtype=bool)
    line[offsets + radius] = True
    continuous = len(offsets) == offsets[-1] - offsets[0] + 1
    return Coverage(offsets, np.outer(line, line), bool(continuous))


def gradient_support(schedule: Sequence[int], kernel: int = 3) -> np.ndarray:
    """Measure which input pixels influence the centre output of a dilated conv stack.

    Builds the stack with all-ones single-channel kernels, backpropagates from
    the centre output pixel and returns the boolean mask of nonzero input
    gradients (cropped to its bounding box).
    """
    rf = receptive_field(schedule, kernel)
    size = 2 * rf + 1
    x = Tensor(np.zeros((1, size, size, 1)), requires_grad=True, dtype=np.float64)
    y = x
    for r in schedule:
        spec = Conv2dSpec.same(1, 1, kernel, r, bias=False)
        y = conv2d(y, spec, np.ones(spec.weight_shape))
    c = size // 2
    backward(y[0, c, c, 0])
    support = x.grad[0, :, :, 0] != 0
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    return support[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
