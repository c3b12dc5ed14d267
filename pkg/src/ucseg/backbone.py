"""Two small, structurally different encoder-decoder segmentation nets.

Variant ``A`` is U-Net flavoured (double conv, batch norm, ReLU, max-pool
down, bilinear up + concat skips).  Variant ``B`` is V-Net flavoured
(residual blocks, group norm, ELU, strided-conv down, transposed-conv up
+ additive skips).  Both return pre-activation logits at input resolution
and the list of encoder stage outputs.
"""

from dataclasses import asdict, dataclass
from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class SubnetConfig:
    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 8
    depth: int = 3
    variant: str = "A"
    spatial_rank: int = 2

    def __post_init__(self):
        if self.depth < 3:
            raise ConfigError(f"depth must be >= 3, got {self.depth}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_width < 4:
            raise ConfigError(f"base_width must be >= 4, got {self.base_width}")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.variant not in ("A", "B"):
            raise ConfigError(f"variant must be 'A' or 'B', got {self.variant!r}")
        if self.spatial_rank not in (2, 3):
            raise ConfigError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")

    def to_dict(self):
        return asdict(self)

    def widths(self):
        return [self.base_width * 2 ** s for s in range(self.depth)]


@dataclass
class SubnetOutput:
    logits: torch.Tensor
    features: List[torch.Tensor]


def _layers(rank):
    if rank == 2:
        return nn.Conv2d, nn.ConvTranspose2d, nn.BatchNorm2d, nn.MaxPool2d
    return nn.Conv3d, nn.ConvTranspose3d, nn.BatchNorm3d, nn.MaxPool3d


class _DoubleConv(nn.Module):
    def __init__(self, rank, cin, cout):
        super().__init__()
        Conv, _, Norm, _ = _layers(rank)
        self.body = nn.Sequential(
            Conv(cin, cout, 3, padding=1, bias=False), Norm(cout), nn.ReLU(inplace=True),
            Conv(cout, cout, 3, padding=1, bias=False), Norm(cout), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class _ResBlock(nn.Module):
    def __init__(self, rank, cin, cout):
        super().__init__()
        Conv = _layers(rank)[0]
        groups = 4 if cout % 4 == 0 else 1
        self.conv1 = Conv(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, cout)
        self.conv2 = Conv(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.skip = Conv(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = F.elu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.elu(h + self.skip(x))


class SubnetA(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        rank, w = cfg.spatial_rank, cfg.widths()
        Conv, _, _, Pool = _layers(rank)
        self.pool = Pool(2)
        self.enc = nn.ModuleList()
        cin = cfg.in_channels
        for width in w:
            self.enc.append(_DoubleConv(rank, cin, width))
            cin = width
        self.dec = nn.ModuleList(_DoubleConv(rank, w[s + 1] + w[s], w[s]) for s in reversed(range(cfg.depth - 1)))
        self.head = Conv(w[0], cfg.num_classes, 1)
        self._up_mode = "bilinear" if rank == 2 else "trilinear"

    def forward(self, x):
        feats = []
        h = x
        for s, block in enumerate(self.enc):
            if s > 0:
                h = self.pool(h)
            h = block(h)
            feats.append(h)
        for i, block in enumerate(self.dec):
            skip = feats[-2 - i]
            h = F.interpolate(h, size=skip.shape[2:], mode=self._up_mode, align_corners=False)
            h = block(torch.cat([h, skip], dim=1))
        return self.head(h), feats


class SubnetB(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        rank, w = cfg.spatial_rank, cfg.widths()
        Conv, ConvT, _, _ = _layers(rank)
        self.stem = _ResBlock(rank, cfg.in_channels, w[0])
        self.down = nn.ModuleList(Conv(w[s], w[s + 1], 2, stride=2) for s in range(cfg.depth - 1))
        self.enc = nn.ModuleList(_ResBlock(rank, w[s + 1], w[s + 1]) for s in range(cfg.depth - 1))
        self.up = nn.ModuleList(ConvT(w[s + 1], w[s], 2, stride=2) for s in reversed(range(cfg.depth - 1)))
        self.dec = nn.ModuleList(_ResBlock(rank, w[s], w[s]) for s in reversed(range(cfg.depth - 1)))
        self.head = Conv(w[0], cfg.num_classes, 1)

    def forward(self, x):
        h = self.stem(x)
        feats = [h]
        for down, block in zip(self.down, self.enc):
            h = block(F.elu(down(h)))
            feats.append(h)
        for i, (up, block) in enumerate(zip(self.up, self.dec)):
            h = block(up(h) + feats[-2 - i])
        return self.head(h), feats


def build_subnet(config, seed=0, dtype=torch.float32):
    """Construct a subnet with parameters drawn deterministically from ``seed``."""
    cls = SubnetA if config.variant == "A" else SubnetB
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = cls(config)
    return model.to(dtype)


def forward_subnet(model, images):
    cfg = model.cfg
    expected_dim = cfg.spatial_rank + 2
    if images.dim() != expected_dim or images.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected N x {cfg.in_channels} x spatial(rank {cfg.spatial_rank}), "
                         f"got {tuple(images.shape)}")
    factor = 2 ** (cfg.depth - 1)
    if any(d % factor for d in images.shape[2:]):
        raise ShapeError(f"spatial dims {tuple(images.shape[2:])} must be divisible by {factor}")
    logits, feats = model(images)
    return SubnetOutput(logits=logits, features=feats)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())
