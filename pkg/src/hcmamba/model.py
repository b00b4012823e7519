"""HC-Mamba: patch embedding, four encoder stages of HC-SSM blocks, mirrored decoder.

Parameters live in a flat, ordered ``dict[str, Tensor]``. Names are
hierarchical (``enc.1.block.3.ssm.in_proj.weight``); :func:`parameter_shapes`
derives every name and shape from a :class:`ModelConfig` alone, so counting
parameters never needs to allocate them.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (Tensor, concat, exp, get_default_dtype, layer_norm, linear, neg, reshape,
                       silu, transpose, upsample_bilinear, upsample_nearest)
from .conv import Conv2dSpec, conv2d
from .errors import ContractError, DimensionError
from .scan2d import NUM_DIRECTIONS, channel_shuffle, channel_split, scan_expand, scan_merge
from .ssm import SelectiveProjection, init_dt_bias, init_state_matrix, selective_scan

CONV_VARIANTS = ("full", "dilated_only", "dw_only", "both")


@dataclass
class ModelConfig:
    base_channels: int = 96
    stage_depths: tuple[int, ...] = (2, 4, 2, 2)
    state_size: int = 16
    num_classes: int = 2
    input_size: tuple[int, int] = (224, 224)
    dilation_schedule: tuple[int, ...] = (1, 2, 3, 1)
    conv_variant: str = "both"
    expand: int = 6
    head_upsample: str = "bilinear"
    stage_channels: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.dilation_schedule = tuple(int(r) for r in self.dilation_schedule)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.stage_channels = tuple(self.base_channels * 2 ** i for i in range(len(self.stage_depths)))
        if len(self.stage_depths) != 4:
            raise ContractError(f"four encoder stages expected, got depths {self.stage_depths}")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ContractError(f"base_channels must be even (channel split), got {self.base_channels}")
        if self.conv_variant not in CONV_VARIANTS:
            raise ContractError(f"conv_variant must be one of {CONV_VARIANTS}, got {self.conv_variant!r}")
        if self.head_upsample not in ("nearest", "bilinear"):
            raise ContractError(f"head_upsample must be 'nearest' or 'bilinear'")
        if any(r < 1 for r in self.dilation_schedule) or not self.dilation_schedule:
            raise ContractError(f"dilation rates must be >= 1, got {self.dilation_schedule}")
        if self.num_classes < 1 or self.state_size < 1:
            raise ContractError("num_classes and state_size must be positive")
        if any(s % self.divisor for s in self.input_size):
            raise DimensionError(f"input size {self.input_size} must be divisible by {self.divisor}")

    @property
    def divisor(self) -> int:
        return 4 * 2 ** (len(self.stage_depths) - 1)

    @property
    def uses_depthwise(self) -> bool:
        return self.conv_variant in ("dw_only", "both")

    @property
    def uses_dilation(self) -> bool:
        return self.conv_variant in ("dilated_only", "both")

    def hc_rates(self) -> tuple[int, ...]:
        return self.dilation_schedule if self.uses_dilation else (1,) * len(self.dilation_schedule)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("stage_channels")
        return d


def dt_rank(channels: int) -> int:
    return max(1, math.ceil(channels / 16))


# -- parameter layout -------------------------------------------------------

def block_shapes(prefix: str, channels: int, cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    h = channels // 2
    e = cfg.expand * h
    n = cfg.state_size
    r = dt_rank(h)
    k = NUM_DIRECTIONS
    s = OrderedDict()
    p = f"{prefix}.ssm"
    s[f"{p}.norm.gamma"] = (h,)
    s[f"{p}.norm.beta"] = (h,)
    s[f"{p}.in_proj.weight"] = (h, e)
    s[f"{p}.in_proj.bias"] = (e,)
    s[f"{p}.conv.weight"] = (e, 1, 3, 3)
    s[f"{p}.conv.bias"] = (e,)
    s[f"{p}.x_proj"] = (k, e, r + 2 * n)
    s[f"{p}.dt_proj"] = (k, r, e)
    s[f"{p}.dt_bias"] = (k, e)
    s[f"{p}.A_log"] = (e, n)
    s[f"{p}.D"] = (e,)
    s[f"{p}.out_norm.gamma"] = (e,)
    s[f"{p}.out_norm.beta"] = (e,)
    s[f"{p}.out_proj.weight"] = (e, h)
    s[f"{p}.out_proj.bias"] = (h,)
    for i, _ in enumerate(cfg.dilation_schedule):
        q = f"{prefix}.hc.{i}"
        if cfg.uses_depthwise:
            s[f"{q}.dw.weight"] = (h, 1, 3, 3)
            s[f"{q}.dw.bias"] = (h,)
            s[f"{q}.pw.weight"] = (h, h, 1, 1)
            s[f"{q}.pw.bias"] = (h,)
        else:
            s[f"{q}.conv.weight"] = (h, h, 3, 3)
            s[f"{q}.conv.bias"] = (h,)
    return s


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    c0 = cfg.base_channels
    ch = cfg.stage_channels
    s = OrderedDict()
    s["embed.conv.weight"] = (c0, 3, 4, 4)
    s["embed.conv.bias"] = (c0,)
    s["embed.norm.gamma"] = (c0,)
    s["embed.norm.beta"] = (c0,)
    for st, depth in enumerate(cfg.stage_depths):
        for j in range(depth):
            s.update(block_shapes(f"enc.{st}.block.{j}", ch[st], cfg))
        if st < len(ch) - 1:
            s[f"merge.{st}.norm.gamma"] = (4 * ch[st],)
            s[f"merge.{st}.norm.beta"] = (4 * ch[st],)
            s[f"merge.{st}.reduction.weight"] = (4 * ch[st], 2 * ch[st])
    for st in reversed(range(len(ch) - 1)):
        s[f"dec.{st}.reduce.weight"] = (ch[st + 1], ch[st])
        s[f"dec.{st}.reduce.bias"] = (ch[st],)
        s[f"dec.{st}.fuse.weight"] = (2 * ch[st], ch[st])
        s[f"dec.{st}.fuse.bias"] = (ch[st],)
        s.update(block_shapes(f"dec.{st}.block", ch[st], cfg))
    s["head.weight"] = (cfg.num_classes, c0, 1, 1)
    s["head.bias"] = (cfg.num_classes,)
    return s


def _init_array(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf == "beta":
        return np.zeros(shape)
    if leaf == "A_log":
        return init_state_matrix(shape[0], shape[1])
    if leaf == "D":
        return np.ones(shape)
    if leaf == "dt_bias":
        return np.stack([init_dt_bias(shape[-1], rng) for _ in range(shape[0])])
    if leaf == "dt_proj":
        bound = shape[1] ** -0.5
        return rng.uniform(-bound, bound, size=shape)
    if leaf == "x_proj":
        bound = shape[1] ** -0.5
        return rng.uniform(-bound, bound, size=shape)
    if leaf == "bias":
        return np.zeros(shape)
    if len(shape) == 4:  # conv [Cout, Cin/groups, kh, kw]
        bound = (shape[1] * shape[2] * shape[3]) ** -0.5
    else:  # linear [in, out]
        bound = shape[0] ** -0.5
    return rng.uniform(-bound, bound, size=shape)


def _init_tensors(shapes: dict, seed: int, dtype) -> "OrderedDict[str, Tensor]":
    dtype = np.dtype(dtype or get_default_dtype())
    params = OrderedDict()
    for i, (name, shape) in enumerate(shapes.items()):
        rng = np.random.default_rng([seed, i])
        params[name] = Tensor(_init_array(name, shape, rng), requires_grad=True, dtype=dtype)
    return params


def init_params(cfg: ModelConfig, seed: int = 0, dtype=None) -> "OrderedDict[str, Tensor]":
    """Deterministic initialisation; each tensor draws from a generator keyed by (seed, index)."""
    return _init_tensors(parameter_shapes(cfg), seed, dtype)


# -- building blocks --------------------------------------------------------

@dataclass
class HcSsmBlockParams:
    norm_gamma: Tensor
    norm_beta: Tensor
    in_weight: Tensor
    in_bias: Tensor
    conv_weight: Tensor
    conv_bias: Tensor
    x_proj: Tensor
    dt_proj: Tensor
    dt_bias: Tensor
    A_log: Tensor
    D: Tensor
    out_norm_gamma: Tensor
    out_norm_beta: Tensor
    out_weight: Tensor
    out_bias: Tensor
    hc_layers: list[dict[str, Tensor]]

    @classmethod
    def from_dict(cls, params: dict, prefix: str) -> "HcSsmBlockParams":
        p = f"{prefix}.ssm"
        layers = []
        i = 0
        while f"{prefix}.hc.{i}.dw.weight" in params or f"{prefix}.hc.{i}.conv.weight" in params:
            q = f"{prefix}.hc.{i}."
            layers.append({k[len(q):]: v for k, v in params.items() if k.startswith(q)})
            i += 1
        return cls(
            params[f"{p}.norm.gamma"], params[f"{p}.norm.beta"],
            params[f"{p}.in_proj.weight"], params[f"{p}.in_proj.bias"],
            params[f"{p}.conv.weight"], params[f"{p}.conv.bias"],
            params[f"{p}.x_proj"], params[f"{p}.dt_proj"], params[f"{p}.dt_bias"],
            params[f"{p}.A_log"], params[f"{p}.D"],
            params[f"{p}.out_norm.gamma"], params[f"{p}.out_norm.beta"],
            params[f"{p}.out_proj.weight"], params[f"{p}.out_proj.bias"],
            layers)


def init_block_params(channels: int, cfg: ModelConfig, seed: int = 0, dtype=None,
                      prefix: str = "block") -> HcSsmBlockParams:
    """Stand-alone parameters for one HC-SSM block with ``channels`` input channels."""
    return HcSsmBlockParams.from_dict(
        _init_tensors(block_shapes(prefix, channels, cfg), seed, dtype), prefix)


def ss2d(x: Tensor, bp: HcSsmBlockParams) -> Tensor:
    """SSM branch: norm, expand, depthwise conv, SiLU, four-way selective scan, merge, project."""
    _, height, width, _ = x.shape
    z = layer_norm(x, bp.norm_gamma, bp.norm_beta)
    z = linear(z, bp.in_weight, bp.in_bias)
    e = z.shape[-1]
    z = silu(conv2d(z, Conv2dSpec.depthwise(e), bp.conv_weight, bp.conv_bias))
    seqs = scan_expand(z)
    proj = SelectiveProjection(bp.x_proj, bp.dt_proj, bp.dt_bias)
    y = selective_scan(seqs, proj, neg(exp(bp.A_log)), bp.D)
    y = scan_merge(y, height, width)
    y = layer_norm(y, bp.out_norm_gamma, bp.out_norm_beta)
    return linear(y, bp.out_weight, bp.out_bias)


def hc_conv_branch(x: Tensor, layers: list[dict[str, Tensor]], rates, depthwise: bool) -> Tensor:
    """Stack of 3x3 convs at the given dilation rates, SiLU between layers."""
    c = x.shape[-1]
    z = x
    for i, (layer, rate) in enumerate(zip(layers, rates)):
        if depthwise:
            z = conv2d(z, Conv2dSpec.depthwise(c, 3, rate), layer["dw.weight"], layer["dw.bias"])
            z = conv2d(z, Conv2dSpec.pointwise(c, c), layer["pw.weight"], layer["pw.bias"])
        else:
            z = conv2d(z, Conv2dSpec.same(c, c, 3, rate), layer["conv.weight"], layer["conv.bias"])
        if i < len(layers) - 1:
            z = silu(z)
    return z


def hc_ssm_block(x: Tensor, bp: HcSsmBlockParams, rates=(1, 2, 3, 1), depthwise: bool = True) -> Tensor:
    """Split channels, run the SSM and HC-Conv branches, concat, shuffle, add the input."""
    x1, x2 = channel_split(x)
    y1 = ss2d(x1, bp)
    y2 = hc_conv_branch(x2, bp.hc_layers, rates, depthwise)
    return channel_shuffle(concat([y1, y2], axis=-1), groups=2) + x


def patch_embed(x: Tensor, weight: Tensor, bias: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Non-overlapping 4x4 patches projected to C channels, then layer norm."""
    _, h, w, cin = x.shape
    if h % 4 or w % 4:
        raise DimensionError(f"patch embedding needs H, W divisible by 4, got {h}x{w}")
    spec = Conv2dSpec(cin, weight.shape[0], (4, 4), stride=(4, 4))
    return layer_norm(conv2d(x, spec, weight, bias), gamma, beta)


def patch_gather(x: Tensor) -> Tensor:
    """``[B, H, W, C] -> [B, H/2, W/2, 4C]``; channel blocks ordered (0,0), (1,0), (0,1), (1,1)."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"patch merging needs even H, W, got {h}x{w}")
    z = reshape(x, (b, h // 2, 2, w // 2, 2, c))
    z = transpose(z, (0, 1, 3, 4, 2, 5))
    return reshape(z, (b, h // 2, w // 2, 4 * c))


def patch_merge(x: Tensor, gamma: Tensor, beta: Tensor, weight: Tensor) -> Tensor:
    return linear(layer_norm(patch_gather(x), gamma, beta), weight)


# -- network ----------------------------------------------------------------

def forward(params: dict, x, cfg: ModelConfig) -> Tensor:
    """Logits ``[B, H, W, num_classes]`` for images ``[B, H, W, 3]``."""
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=params["head.weight"].dtype)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise DimensionError(f"expected images [B, H, W, 3], got {x.shape}")
    if x.shape[1] % cfg.divisor or x.shape[2] % cfg.divisor:
        raise DimensionError(f"image size {x.shape[1]}x{x.shape[2]} must be divisible by {cfg.divisor}")
    rates, dw = cfg.hc_rates(), cfg.uses_depthwise

    def block(z, prefix):
        return hc_ssm_block(z, HcSsmBlockParams.from_dict(params, prefix), rates, dw)

    z = patch_embed(x, params["embed.conv.weight"], params["embed.conv.bias"],
                    params["embed.norm.gamma"], params["embed.norm.beta"])
    skips = []
    last = len(cfg.stage_depths) - 1
    for st, depth in enumerate(cfg.stage_depths):
        for j in range(depth):
            z = block(z, f"enc.{st}.block.{j}")
        if st < last:
            skips.append(z)
            z = patch_merge(z, params[f"merge.{st}.norm.gamma"], params[f"merge.{st}.norm.beta"],
                            params[f"merge.{st}.reduction.weight"])
    for st in reversed(range(last)):
        z = upsample_nearest(z, 2)
        z = linear(z, params[f"dec.{st}.reduce.weight"], params[f"dec.{st}.reduce.bias"])
        z = concat([z, skips[st]], axis=-1)
        z = linear(z, params[f"dec.{st}.fuse.weight"], params[f"dec.{st}.fuse.bias"])
        z = block(z, f"dec.{st}.block")
    # the 1x1 head commutes with upsampling (interpolation weights sum to 1),
    # so it runs at 1/4 resolution
    logits = conv2d(z, Conv2dSpec.pointwise(cfg.base_channels, cfg.num_classes),
                    params["head.weight"], params["head.bias"])
    if cfg.head_upsample == "nearest":
        return upsample_nearest(logits, 4)
    return upsample_bilinear(logits, 4)


class HCMamba:
    """Convenience wrapper bundling a config with its parameter dict."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None, params=None):
        self.config = config
        self.params = params if params is not None else init_params(config, seed, dtype)

    def __call__(self, x) -> Tensor:
        return forward(self.params, x, self.config)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


# -- parameter accounting ---------------------------------------------------

def _group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "enc":
        return f"encoder.stage{parts[1]}"
    if parts[0] == "dec":
        return f"decoder.stage{parts[1]}"
    if parts[0] == "merge":
        return f"patch_merge.{parts[1]}"
    return {"embed": "patch_embed", "head": "head"}[parts[0]]


def count_parameters(cfg: ModelConfig) -> "OrderedDict[str, int]":
    """Scalar count per module group plus ``total``."""
    table: OrderedDict[str, int] = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        g = _group(name)
        table[g] = table.get(g, 0) + int(np.prod(shape))
    table["total"] = sum(table.values())
    return table


def count_by_kind(cfg: ModelConfig) -> "OrderedDict[str, int]":
    """Totals split into HC-Conv branch, SSM branch and everything else."""
    out = OrderedDict(hc_conv=0, ssm=0, other=0)
    for name, shape in parameter_shapes(cfg).items():
        kind = "hc_conv" if ".hc." in name else "ssm" if ".ssm." in name else "other"
        out[kind] += int(np.prod(shape))
    return out
