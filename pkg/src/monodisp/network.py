"""Encoder-decoder disparity networks built from explicit layer tables.

Each architecture is a list of :class:`LayerSpec` rows (name, kernel, stride,
channels, downscale factors, inputs).  :class:`DispNet` walks the table at
construction time, checks that channel counts and downscale factors chain,
and executes it in order.  Input names ending in ``*`` refer to a disparity
head upsampled by two; ``a+b`` inputs are summed instead of concatenated.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError
from .losses import DisparityPyramid

PYRAMID_LEVELS = 4


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | upconv | residual-skip-block | disparity-head
    kernel: int
    stride: int
    in_channels: int
    out_channels: int
    scale_in: int
    scale_out: int
    inputs: tuple
    combine: str = "concat"
    activate: bool = True


def _row(name, kernel, stride, cin, cout, s_in, s_out, inputs, kind=None, activate=True):
    combine = "add" if "+" in inputs else "concat"
    names = tuple(inputs.split("+" if combine == "add" else "|"))
    if kind is None:
        if "disp" in name and "conv" not in name:
            kind = "disparity-head"
        elif "upconv" in name:
            kind = "upconv"
        elif name.startswith("rskip"):
            kind = "residual-skip-block"
        else:
            kind = "conv"
    return LayerSpec(name, kind, kernel, stride, cin, cout, s_in, s_out, names, combine, activate)


def _encoder(first_stride_one: bool) -> list:
    rows = []
    prev, cin = "left", 3
    if first_stride_one:
        rows.append(_row("conv0", 7, 1, 3, 32, 1, 1, "left"))
        prev, cin = "conv0", 32
    depth = 6 if first_stride_one else 7
    widths = [32, 64, 128, 256, 512, 512, 512]
    kernels = [7, 5, 3, 3, 3, 3, 3]
    for i in range(depth):
        n, k, cout = i + 1, kernels[i], widths[i]
        s = 2 ** i
        rows.append(_row(f"conv{n}", k, 2, cin, cout, s, 2 * s, prev))
        rows.append(_row(f"conv{n}b", k, 1, cout, cout, 2 * s, 2 * s, f"conv{n}"))
        prev, cin = f"conv{n}b", cout
    return rows


SINGLE_BRANCH_TABLE = _encoder(first_stride_one=False) + [
    _row("upconv7", 3, 2, 512, 512, 128, 64, "conv7b"),
    _row("iconv7", 3, 1, 1024, 512, 64, 64, "upconv7|conv6b"),
    _row("upconv6", 3, 2, 512, 512, 64, 32, "iconv7"),
    _row("iconv6", 3, 1, 1024, 512, 32, 32, "upconv6|conv5b"),
    _row("upconv5", 3, 2, 512, 256, 32, 16, "iconv6"),
    _row("iconv5", 3, 1, 512, 256, 16, 16, "upconv5|conv4b"),
    _row("upconv4", 3, 2, 256, 128, 16, 8, "iconv5"),
    # printed as in=128; the concatenated inputs carry 128 + 128
    _row("iconv4", 3, 1, 256, 128, 8, 8, "upconv4|conv3b"),
    _row("disp4", 3, 1, 128, 2, 8, 8, "iconv4"),
    _row("upconv3", 3, 2, 128, 64, 8, 4, "iconv4"),
    _row("iconv3", 3, 1, 130, 64, 4, 4, "upconv3|conv2b|disp4*"),
    _row("disp3", 3, 1, 64, 2, 4, 4, "iconv3"),
    _row("upconv2", 3, 2, 64, 32, 4, 2, "iconv3"),
    _row("iconv2", 3, 1, 66, 32, 2, 2, "upconv2|conv1b|disp3*"),
    _row("disp2", 3, 1, 32, 2, 2, 2, "iconv2"),
    _row("upconv1", 3, 2, 32, 16, 2, 1, "iconv2"),
    _row("iconv1", 3, 1, 18, 16, 1, 1, "upconv1|disp2*"),
    _row("disp1", 3, 1, 16, 2, 1, 1, "iconv1"),
]


def _residual_skip(n, ch, scale, skip):
    return [
        _row(f"sconv{n}", 3, 1, ch, ch, scale, scale, skip),
        _row(f"sconv{n}b", 3, 1, ch, ch, scale, scale, f"sconv{n}", activate=False),
        _row(f"rskip{n}", 3, 1, ch, ch, scale, scale, f"{skip}+sconv{n}b"),
    ]


TWO_BRANCH_TABLE = _encoder(first_stride_one=True) + [
    _row("iupconv6", 3, 2, 512, 512, 64, 32, "conv6b"),
    _row("iconv6", 3, 1, 1024, 512, 32, 32, "iupconv6|conv5b"),
    _row("iupconv5", 3, 2, 512, 256, 32, 16, "iconv6"),
    _row("iconv5", 3, 1, 512, 256, 16, 16, "iupconv5|conv4b"),
    _row("iupconv4", 3, 2, 256, 128, 16, 8, "iconv5"),
    _row("iconv4", 3, 1, 256, 128, 8, 8, "iupconv4|conv3b"),
    _row("idisp4", 3, 1, 128, 2, 8, 8, "iconv4"),
    *_residual_skip(4, 128, 8, "conv3b"),
    _row("rconv4", 3, 1, 258, 128, 8, 8, "iconv4|idisp4|rskip4"),
    _row("rdisp4", 3, 1, 128, 2, 8, 8, "rconv4"),
    _row("iupconv3", 3, 2, 128, 64, 8, 4, "iconv4"),
    _row("iconv3", 3, 1, 130, 64, 4, 4, "iupconv3|conv2b|idisp4*"),
    _row("idisp3", 3, 1, 64, 2, 4, 4, "iconv3"),
    *_residual_skip(3, 64, 4, "conv2b"),
    _row("rupconv3", 3, 2, 128, 64, 8, 4, "rconv4"),
    _row("rconv3", 3, 1, 196, 64, 4, 4, "iconv3|idisp3|rupconv3|rskip3|rdisp4*"),
    _row("rdisp3", 3, 1, 64, 2, 4, 4, "rconv3"),
    _row("iupconv2", 3, 2, 64, 32, 4, 2, "iconv3"),
    _row("iconv2", 3, 1, 66, 32, 2, 2, "iupconv2|conv1b|idisp3*"),
    _row("idisp2", 3, 1, 32, 2, 2, 2, "iconv2"),
    *_residual_skip(2, 32, 2, "conv1b"),
    _row("rupconv2", 3, 2, 64, 32, 4, 2, "rconv3"),
    _row("rconv2", 3, 1, 100, 32, 2, 2, "iconv2|idisp2|rupconv2|rskip2|rdisp3*"),
    _row("rdisp2", 3, 1, 32, 2, 2, 2, "rconv2"),
    _row("iupconv1", 3, 2, 32, 16, 2, 1, "iconv2"),
    _row("iconv1", 3, 1, 18, 16, 1, 1, "iupconv1|idisp2*"),
    _row("idisp1", 3, 1, 16, 2, 1, 1, "iconv1"),
    *_residual_skip(1, 32, 1, "conv0"),
    # printed as 64 -> 32; rconv2 emits 32 and rconv1's 68 inputs need 16 here
    _row("rupconv1", 3, 2, 32, 16, 2, 1, "rconv2"),
    _row("rconv1", 3, 1, 68, 16, 1, 1, "iconv1|idisp1|rupconv1|rskip1|rdisp2*"),
    _row("rdisp1", 5, 1, 16, 2, 1, 1, "rconv1"),
]

ARCHITECTURES = {"single-branch": SINGLE_BRANCH_TABLE, "two-branch": TWO_BRANCH_TABLE}


def walk_table(table: list, in_channels: int = 3) -> dict:
    """Check that every row's ``in`` column equals what its inputs produce.

    Returns ``{name: (out_channels, scale_out)}``; raises :class:`ConfigError`
    on the first inconsistent row.
    """
    produced = {"left": (in_channels, 1)}
    for spec in table:
        chans, scales = [], []
        for ref in spec.inputs:
            upsampled = ref.endswith("*")
            key = ref.rstrip("*")
            if key not in produced:
                raise ConfigError(f"{spec.name}: unknown input {key!r}")
            c, s = produced[key]
            if upsampled:
                s //= 2
            chans.append(c)
            scales.append(s)
        expected_in = chans[0] if spec.combine == "add" else sum(chans)
        if spec.combine == "add" and len(set(chans)) != 1:
            raise ConfigError(f"{spec.name}: summed inputs have channels {chans}")
        if expected_in != spec.in_channels:
            raise ConfigError(f"{spec.name}: table says in={spec.in_channels}, inputs give {expected_in}")
        if any(s != spec.scale_in for s in scales):
            raise ConfigError(f"{spec.name}: input scales {scales} != {spec.scale_in}")
        expected_out = spec.scale_in * spec.stride if spec.kind != "upconv" else spec.scale_in // spec.stride
        if expected_out != spec.scale_out:
            raise ConfigError(f"{spec.name}: stride {spec.stride} maps {spec.scale_in} to {expected_out}, "
                              f"table says {spec.scale_out}")
        produced[spec.name] = (spec.out_channels, spec.scale_out)
    return produced


@dataclass(frozen=True)
class NetworkConfig:
    width: int = 512
    height: int = 256
    in_channels: int = 3
    d_max_frac: float = 0.3


@dataclass
class NetworkOutput:
    final: DisparityPyramid
    initial: Optional[DisparityPyramid] = None


class DispNet(nn.Module):
    """Executes a layer table; produces a 4-scale pyramid of (left, right) disparities."""

    def __init__(self, table: list, config: NetworkConfig, arch: str, seed: Optional[int] = None):
        super().__init__()
        divisor = 2 ** (PYRAMID_LEVELS - 1)
        if config.width % divisor or config.height % divisor:
            raise ConfigError(f"resolution {config.width}x{config.height} is not divisible by {divisor}")
        walk_table(table, config.in_channels)
        self.table = list(table)
        self.config = config
        self.arch = arch
        self.layers = nn.ModuleDict({
            s.name: nn.Conv2d(s.in_channels, s.out_channels, s.kernel,
                              stride=s.stride if s.kind != "upconv" else 1, padding=s.kernel // 2)
            for s in self.table
        })
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        for conv in self.layers.values():
            nn.init.xavier_uniform_(conv.weight, generator=gen)
            nn.init.zeros_(conv.bias)

    def heads(self, prefix: str = "") -> list:
        """Disparity-head names, finest first."""
        names = [s.name for s in self.table if s.kind == "disparity-head" and s.name.startswith(prefix)]
        return sorted(names, key=lambda n: int(n[-1]))

    def forward(self, image: torch.Tensor) -> NetworkOutput:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        expected = (self.config.in_channels, self.config.height, self.config.width)
        if tuple(image.shape[1:]) != expected:
            raise InvalidInputError(f"input {tuple(image.shape[1:])} does not match configured {expected}")
        feats = {"left": image}
        sizes = {1: image.shape[-2:]}
        for spec in self.table:
            srcs = []
            for ref in spec.inputs:
                x = feats[ref.rstrip("*")]
                if ref.endswith("*"):
                    x = F.interpolate(x, scale_factor=2, mode="nearest")
                srcs.append(x)
            x = srcs[0] + srcs[1] if spec.combine == "add" else torch.cat(srcs, dim=1)
            if spec.kind == "upconv":
                x = F.interpolate(x, size=tuple(sizes[spec.scale_out]), mode="nearest")
            y = self.layers[spec.name](x)
            if spec.kind == "disparity-head":
                y = self.config.d_max_frac * torch.sigmoid(y)
            elif spec.activate:
                y = F.elu(y)
            sizes.setdefault(spec.scale_out, y.shape[-2:])
            feats[spec.name] = y
        if self.arch == "two-branch":
            return NetworkOutput(self._pyramid(feats, "r"), self._pyramid(feats, "i"))
        return NetworkOutput(self._pyramid(feats, ""))

    def _pyramid(self, feats: dict, prefix: str) -> DisparityPyramid:
        scales = []
        for name in self.heads(prefix):
            frac = feats[name]
            px = frac * frac.shape[-1]
            scales.append((px[:, 0], px[:, 1]))
        return DisparityPyramid(scales)


def build_single_branch(config: NetworkConfig = NetworkConfig(), seed: Optional[int] = None) -> DispNet:
    return DispNet(SINGLE_BRANCH_TABLE, config, "single-branch", seed)


def build_two_branch(config: NetworkConfig = NetworkConfig(), seed: Optional[int] = None) -> DispNet:
    return DispNet(TWO_BRANCH_TABLE, config, "two-branch", seed)


def build(arch: str, config: NetworkConfig = NetworkConfig(), seed: Optional[int] = None) -> DispNet:
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    return DispNet(ARCHITECTURES[arch], config, arch, seed)


def count_parameters(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters() if p.requires_grad)
