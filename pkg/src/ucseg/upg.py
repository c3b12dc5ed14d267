"""Uncertainty-guided fusion of the two subnet predictions.

Both uncertainty maps are cut into non-overlapping ``patch``-sized tokens.
Every token of ``u_a`` attends over all tokens of ``u_b``; the attended map
(plus a residual MLP) gates both logit maps, which a small conv head ``psi``
then fuses into one prediction.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .evidential import uncertainty_from_logits


@dataclass
class FusedPrediction:
    logits: torch.Tensor
    uncertainty: torch.Tensor


def tokenize(maps, patch):
    """``N x *spatial`` -> ``N x T x patch**rank`` (row-major over patches)."""
    n, *spatial = maps.shape
    if any(s % patch for s in spatial):
        raise ShapeError(f"spatial dims {tuple(spatial)} not divisible by patch {patch}")
    grid = [s // patch for s in spatial]
    shape = [n]
    for g in grid:
        shape += [g, patch]
    x = maps.reshape(shape)
    rank = len(spatial)
    perm = [0] + [1 + 2 * i for i in range(rank)] + [2 + 2 * i for i in range(rank)]
    return x.permute(perm).reshape(n, math.prod(grid), patch ** rank)


def detokenize(tokens, spatial, patch):
    n = tokens.shape[0]
    rank = len(spatial)
    grid = [s // patch for s in spatial]
    x = tokens.reshape([n] + grid + [patch] * rank)
    perm = [0]
    for i in range(rank):
        perm += [1 + i, 1 + rank + i]
    return x.permute(perm).reshape([n] + list(spatial))


class FusionHead(nn.Module):
    """``2C -> C`` fusion: Conv-BN-ReLU stack plus a linear 1x1 path.

    The last projection is linear so the fused logits can take either sign;
    ``averaging_init`` makes the head start as the mean of the two gated inputs.
    """

    def __init__(self, num_classes, spatial_rank=2, averaging_init=True):
        super().__init__()
        C = num_classes
        Conv = nn.Conv2d if spatial_rank == 2 else nn.Conv3d
        Norm = nn.BatchNorm2d if spatial_rank == 2 else nn.BatchNorm3d
        self.body = nn.Sequential(
            Conv(2 * C, C, 3, padding=1), Norm(C), nn.ReLU(),
            Conv(C, C, 3, padding=1), Norm(C), nn.ReLU(),
        )
        self.out = Conv(C, C, 1)
        self.linear = Conv(2 * C, C, 1)
        if averaging_init:
            self.set_averaging()

    @torch.no_grad()
    def set_averaging(self):
        C = self.out.out_channels
        self.linear.weight.zero_()
        self.linear.bias.zero_()
        for c in range(C):
            self.linear.weight[c, c].fill_(0.5)
            self.linear.weight[c, C + c].fill_(0.5)
        self.out.weight.zero_()
        self.out.bias.zero_()

    def forward(self, x):
        return self.linear(x) + self.out(self.body(x))


class UPG(nn.Module):
    def __init__(self, num_classes, spatial_shape, patch=4, head_dim=None, use_value_proj=False,
                 averaging_init=True):
        super().__init__()
        self.num_classes = num_classes
        self.spatial_shape = tuple(spatial_shape)
        self.patch = patch
        if any(s % patch for s in self.spatial_shape):
            raise ShapeError(f"spatial shape {self.spatial_shape} not divisible by patch {patch}")
        rank = len(self.spatial_shape)
        self.token_dim = patch ** rank
        # values are de-tokenized back onto the patch grid, so d must equal patch**rank
        self.head_dim = head_dim or self.token_dim
        if self.head_dim != self.token_dim:
            raise ShapeError(f"head_dim {self.head_dim} must equal patch**rank = {self.token_dim}")
        d = self.head_dim
        n_tokens = math.prod(s // patch for s in self.spatial_shape)
        self.use_value_proj = use_value_proj
        self.w_q = nn.Linear(self.token_dim, d, bias=False)
        self.w_k = nn.Linear(self.token_dim, d, bias=False)
        self.w_v = nn.Linear(self.token_dim, d, bias=False)
        self.pos_embed = nn.Parameter(torch.zeros(n_tokens, d))
        self.mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.psi = FusionHead(num_classes, rank, averaging_init)
        with torch.no_grad():
            for w in (self.w_q, self.w_k, self.w_v):
                w.weight.copy_(torch.eye(d) + 0.02 * torch.randn(d, d))
            nn.init.normal_(self.pos_embed, std=0.02)
            self.mlp[2].weight.zero_()
            self.mlp[2].bias.zero_()

    def attention(self, u_a, u_b):
        """Return ``(A_u, attn)`` for ``N x *spatial`` uncertainty maps."""
        if u_a.shape != u_b.shape:
            raise ShapeError(f"uncertainty maps differ: {tuple(u_a.shape)} vs {tuple(u_b.shape)}")
        if tuple(u_a.shape[1:]) != self.spatial_shape:
            raise ShapeError(f"expected spatial shape {self.spatial_shape}, got {tuple(u_a.shape[1:])}")
        ta = tokenize(u_a, self.patch)
        tb = tokenize(u_b, self.patch)
        keys = self.w_k(tb)
        q = self.w_q(ta) + self.pos_embed
        k = keys + self.pos_embed
        v = self.w_v(tb) if self.use_value_proj else keys
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.head_dim), dim=-1)
        ctx = attn @ v
        out = self.mlp(ctx) + ctx
        return detokenize(out, self.spatial_shape, self.patch), attn

    def fuse(self, a_u, logits_a, logits_b):
        if logits_a.shape != logits_b.shape:
            raise ShapeError(f"logit shapes differ: {tuple(logits_a.shape)} vs {tuple(logits_b.shape)}")
        if a_u.shape != logits_a.shape[:1] + logits_a.shape[2:]:
            raise ShapeError(f"gate {tuple(a_u.shape)} does not match logits {tuple(logits_a.shape)}")
        gate = a_u.unsqueeze(1)
        fused = self.psi(torch.cat([gate * logits_a, gate * logits_b], dim=1))
        return FusedPrediction(fused, uncertainty_from_logits(fused, dim=1))

    def forward(self, logits_a, logits_b, u_a, u_b):
        a_u, _ = self.attention(u_a, u_b)
        return self.fuse(a_u, logits_a, logits_b)


def build_upg(num_classes, spatial_shape, patch=4, seed=0, dtype=torch.float32, **kwargs):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UPG(num_classes, spatial_shape, patch, **kwargs)
    return model.to(dtype)


def cross_attention_uncertainty(u_a, u_b, params):
    """Single-map convenience wrapper: ``H x W`` in, ``H x W`` out."""
    if u_a.dim() == len(params.spatial_shape):
        return params.attention(u_a.unsqueeze(0), u_b.unsqueeze(0))[0][0]
    return params.attention(u_a, u_b)[0]


def fuse_predictions(a_u, logits_a, logits_b, params):
    if logits_a.dim() == len(params.spatial_shape) + 1:
        fp = params.fuse(a_u.unsqueeze(0), logits_a.unsqueeze(0), logits_b.unsqueeze(0))
        return FusedPrediction(fp.logits[0], fp.uncertainty[0])
    return params.fuse(a_u, logits_a, logits_b)


def make_pseudo_label(fused, class_dim=1):
    """Per-pixel argmax (lowest index on ties), cut from the graph.

    Pass ``class_dim=0`` for an unbatched ``C x H x W`` prediction.
    """
    logits = fused.logits if isinstance(fused, FusedPrediction) else fused
    return logits.detach().argmax(dim=class_dim)
