"""FC2N network: concat blocks, concat groups, weighted global fusion, upscale head.

Data flow for a config with ``n`` groups of ``m`` blocks::

    x0 = conv3x3(image)                                   shallow features
    x_i = CG_i(x_{i-1}),  i = 1..n
    deep = conv3x3(conv1x1([l0*x0, l1*x1, ..., ln*xn]))   weighted global fusion
    out = conv3x3(upscale(deep))                          3 output channels

A concat block maps ``x`` to ``conv1x1([l1*x, l2*H(x)])`` with
``H = conv3x3 -> relu -> conv3x3`` (wide activation in the middle); a concat
group chains ``m`` blocks and fuses the group input with the last block's
output the same way. In ``residual`` skip mode both become plain additions
and the global fusion loses its weights.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from fc2n.autograd import (
    Parameter,
    Tensor,
    add,
    concat_channels,
    conv2d,
    get_dtype,
    pixel_shuffle,
    relu,
    scale,
)
from fc2n.errors import ConfigError, DimensionError

SUPPORTED_SCALES = (2, 3, 4, 8)
SKIP_MODES = ("wcc", "residual")


@dataclass(frozen=True)
class ModelConfig:
    n: int = 4
    m: int = 4
    base_width: int = 32
    expand_width: int = 128
    scale: int = 2
    weighted_wgff: bool = True
    weighted_cg: bool = True
    weighted_cb: bool = True
    skip_mode: str = "wcc"

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ConfigError(f"n and m must be >= 1, got n={self.n}, m={self.m}")
        if self.base_width < 1 or self.expand_width < 1:
            raise ConfigError("widths must be positive")
        if self.expand_width % self.base_width:
            raise ConfigError(
                f"expand_width ({self.expand_width}) must be an integer multiple of base_width ({self.base_width})"
            )
        if self.scale not in SUPPORTED_SCALES:
            raise ConfigError(f"unsupported scale {self.scale}; expected one of {SUPPORTED_SCALES}")
        if self.skip_mode not in SKIP_MODES:
            raise ConfigError(f"skip_mode must be one of {SKIP_MODES}, got {self.skip_mode!r}")

    @property
    def r_wa(self) -> int:
        """Wide-activation ratio expand_width / base_width."""
        return self.expand_width // self.base_width

    @property
    def residual(self) -> bool:
        return self.skip_mode == "residual"

    @classmethod
    def lightweight(cls, scale: int = 2, **kw) -> "ModelConfig":
        return cls(n=4, m=4, scale=scale, **kw)

    @classmethod
    def largescale(cls, scale: int = 4, **kw) -> "ModelConfig":
        return cls(n=16, m=8, scale=scale, **kw)

    @classmethod
    def from_flags(cls, flags: str, **kw) -> "ModelConfig":
        """Build an ablation variant from a "WGFF CG CB" flag string such as "110"."""
        if len(flags) != 3 or set(flags) - {"0", "1"}:
            raise ConfigError(f"ablation flags must be three 0/1 digits, got {flags!r}")
        w, g, b = (c == "1" for c in flags)
        return cls(weighted_wgff=w, weighted_cg=g, weighted_cb=b, **kw)

    @classmethod
    def residual_baseline(cls, **kw) -> "ModelConfig":
        return cls(weighted_wgff=False, weighted_cg=False, weighted_cb=False, skip_mode="residual", **kw)


def upscale_stages(scale: int) -> list[int]:
    """Pixel-shuffle factors of the upscale head: x4 and x8 cascade x2 stages."""
    return {2: [2], 3: [3], 4: [2, 2], 8: [2, 2, 2]}[scale]


@dataclass
class Conv:
    weight: Parameter
    bias: Parameter

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[0]


@dataclass
class BlockParams:
    conv1: Conv
    conv2: Conv
    fuse: Conv | None
    lam_x: Parameter | None
    lam_h: Parameter | None


@dataclass
class GroupParams:
    blocks: list[BlockParams]
    fuse: Conv | None
    lam_in: Parameter | None
    lam_out: Parameter | None


@dataclass
class Model:
    config: ModelConfig
    shallow: Conv
    groups: list[GroupParams]
    gff_fuse: Conv
    gff_conv: Conv
    gff_lams: list[Parameter] | None
    upscale: list[Conv]
    tail: Conv
    params: dict[str, Parameter] = field(default_factory=dict)
    forward_calls: int = 0

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self):
        return self.shallow.weight.dtype

    def __call__(self, lr_image: Tensor) -> Tensor:
        return model_forward(self, lr_image)


class _Builder:
    """Creates parameters in a fixed order from one seeded generator."""

    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}

    def _add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        p = Parameter(data, name=name, dtype=self.dtype)
        self.params[name] = p
        return p

    def conv(self, name: str, k: int, c_in: int, c_out: int) -> Conv:
        bound = math.sqrt(1.0 / (k * k * c_in))
        w = self.rng.uniform(-bound, bound, size=(k, k, c_in, c_out))
        return Conv(self._add(f"{name}.weight", w), self._add(f"{name}.bias", np.zeros(c_out)))

    def lam(self, name: str) -> Parameter:
        return self._add(name, np.ones((1, 1, 1, 1)))


def build_model(config: ModelConfig, rng_seed: int = 0, dtype=None) -> Model:
    """Construct a model deterministically: same config and seed give identical parameters."""
    b = _Builder(rng_seed, dtype or get_dtype())
    c, e = config.base_width, config.expand_width
    wcc = not config.residual

    shallow = b.conv("shallow", 3, 3, c)
    groups = []
    for i in range(config.n):
        blocks = []
        for j in range(config.m):
            pre = f"cg{i}.cb{j}"
            conv1 = b.conv(f"{pre}.conv1", 3, c, e)
            conv2 = b.conv(f"{pre}.conv2", 3, e, c)
            fuse = b.conv(f"{pre}.fuse", 1, 2 * c, c) if wcc else None
            weighted = wcc and config.weighted_cb
            blocks.append(BlockParams(
                conv1, conv2, fuse,
                b.lam(f"{pre}.lam_x") if weighted else None,
                b.lam(f"{pre}.lam_h") if weighted else None,
            ))
        fuse = b.conv(f"cg{i}.fuse", 1, 2 * c, c) if wcc else None
        weighted = wcc and config.weighted_cg
        groups.append(GroupParams(
            blocks, fuse,
            b.lam(f"cg{i}.lam_in") if weighted else None,
            b.lam(f"cg{i}.lam_out") if weighted else None,
        ))

    gff_fuse = b.conv("gff.fuse", 1, (config.n + 1) * c, c)
    gff_conv = b.conv("gff.conv", 3, c, c)
    gff_lams = None
    if wcc and config.weighted_wgff:
        gff_lams = [b.lam(f"gff.lam{i}") for i in range(config.n + 1)]

    upscale = [b.conv(f"up{s}", 3, c, c * r * r) for s, r in enumerate(upscale_stages(config.scale))]
    tail = b.conv("tail", 3, c, 3)
    return Model(config, shallow, groups, gff_fuse, gff_conv, gff_lams, upscale, tail, b.params)


def _weighted(x: Tensor, lam: Parameter | None) -> Tensor:
    return x if lam is None else scale(x, lam)


def nonlinear_branch(x: Tensor, block: BlockParams) -> Tensor:
    """Conv-ReLU-Conv mapping of a concat block."""
    return block.conv2(relu(block.conv1(x)))


def cb_forward(x: Tensor, block: BlockParams) -> Tensor:
    base = block.conv1.weight.shape[2]
    if x.shape[3] != base:
        raise DimensionError(f"concat block expects {base} channels, got {x.shape[3]}")
    h = nonlinear_branch(x, block)
    if block.fuse is None:
        return add(x, h)
    return block.fuse(concat_channels([_weighted(x, block.lam_x), _weighted(h, block.lam_h)]))


def cg_forward(x: Tensor, group: GroupParams) -> Tensor:
    y = x
    for block in group.blocks:
        y = cb_forward(y, block)
    if group.fuse is None:
        return add(x, y)
    return group.fuse(concat_channels([_weighted(x, group.lam_in), _weighted(y, group.lam_out)]))


def model_forward(model: Model, lr_image: Tensor) -> Tensor:
    """Map a normalized (N, h, w, 3) batch to (N, r*h, r*w, 3)."""
    if lr_image.data.ndim != 4 or lr_image.shape[3] != 3:
        raise DimensionError(f"model input must be (N, h, w, 3), got {lr_image.shape}")
    model.forward_calls += 1
    feats = [model.shallow(lr_image)]
    for group in model.groups:
        feats.append(cg_forward(feats[-1], group))
    if model.gff_lams is not None:
        feats = [scale(f, lam) for f, lam in zip(feats, model.gff_lams)]
    x = model.gff_conv(model.gff_fuse(concat_channels(feats)))
    for conv, r in zip(model.upscale, upscale_stages(model.config.scale)):
        x = pixel_shuffle(conv(x), r)
    return model.tail(x)


# ---------------------------------------------------------------------------
# accounting


def _conv_layers(config: ModelConfig) -> Iterator[tuple[int, int, int, int]]:
    """Yield (k, c_in, c_out, resolution_factor) for every conv.

    ``resolution_factor`` is the linear upsampling factor of the feature map
    the conv runs on, relative to the LR input.
    """
    c, e = config.base_width, config.expand_width
    wcc = not config.residual
    yield 3, 3, c, 1
    for _ in range(config.n):
        for _ in range(config.m):
            yield 3, c, e, 1
            yield 3, e, c, 1
            if wcc:
                yield 1, 2 * c, c, 1
        if wcc:
            yield 1, 2 * c, c, 1
    yield 1, (config.n + 1) * c, c, 1
    yield 3, c, c, 1
    res = 1
    for r in upscale_stages(config.scale):
        yield 3, c, c * r * r, res
        res *= r
    yield 3, c, 3, res


def _num_lambdas(config: ModelConfig) -> int:
    if config.residual:
        return 0
    total = 0
    if config.weighted_cb:
        total += 2 * config.n * config.m
    if config.weighted_cg:
        total += 2 * config.n
    if config.weighted_wgff:
        total += config.n + 1
    return total


def count_params(config: ModelConfig) -> int:
    """Closed-form count of conv weights, biases and learnable weighting factors."""
    convs = sum(k * k * ci * co + co for k, ci, co, _ in _conv_layers(config))
    return convs + _num_lambdas(config)


def compute_multiadds(config: ModelConfig, out_h: int = 720, out_w: int = 1280) -> int:
    """Kernel multiply-accumulates needed to produce one out_h x out_w image.

    Bias additions and scalar weightings are not counted. The LR pixel count
    is out_h * out_w / scale**2, kept fractional so that sizes not divisible
    by the scale (720p at x3) are still well defined; the total is rounded
    at the end.
    """
    r = config.scale
    total = Fraction(0)
    for k, ci, co, res in _conv_layers(config):
        total += k * k * ci * co * Fraction(out_h * out_w * res * res, r * r)
    return round(total)
