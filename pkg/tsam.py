"""
Temporal-Spatio Awareness Module
================================

Splits a feature map along channels into a spatial half and a temporal half,
runs spatial attention (tokens = positions within a frame) on the first and
temporal attention (tokens = frames at one position) on the second, then
fuses both with a position-wise MLP and a residual:

    F_s, F_t = Split(F)
    F_s = F_s + SpatialAttention(Norm(F_s));  F_s = F_s + FFN(Norm(F_s))
    F_t = F_t + TemporalAttention(Norm(F_t)); F_t = F_t + FFN(Norm(F_t))
    F̂  = MLP(Concat(F_s, F_t)) + F

Feature maps are (B·L, C, H, W) with segments flattened into the leading axis.
"""

import logging
from typing import Optional, Tuple

import torch
import torch.nn as nn
from einops import rearrange

import config
from attention_core import AttentionSubLayer, FeedForwardSubLayer

logger = logging.getLogger(__name__)


def split_channels(F_map: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Channels [0, C/2) are the spatial half, [C/2, C) the temporal half"""
    channels = F_map.shape[1]
    if channels % 2:
        raise ValueError(f"TSAM needs an even channel count, got {channels}")
    half = channels // 2
    return F_map[:, :half], F_map[:, half:]


class SpatialBranch(nn.Module):
    """Attention over the H·W positions of each frame; frames never mix"""

    def __init__(self, channels: int, heads: int = config.ATTENTION_HEADS,
                 ffn_mult: int = config.FFN_MULT, zero_out: bool = False):
        super().__init__()
        self.attn = AttentionSubLayer(channels, heads=heads, zero_out=zero_out)
        self.ff = FeedForwardSubLayer(channels, ffn_mult, zero_out=zero_out)

    def forward(self, F_s: torch.Tensor) -> torch.Tensor:
        height, width = F_s.shape[-2:]
        x = rearrange(F_s, 'n c h w -> n (h w) c')
        x = self.ff(self.attn(x))
        return rearrange(x, 'n (h w) c -> n c h w', h=height, w=width)


class TemporalBranch(nn.Module):
    """
    Attention over the L frames at each spatial position; positions never mix

    A zero-initialized positional table over frame indices is added to the
    normalized tokens so attention can tell frames apart.
    """

    def __init__(self, channels: int, heads: int = config.ATTENTION_HEADS,
                 ffn_mult: int = config.FFN_MULT, max_frames: int = config.MAX_FRAMES,
                 zero_out: bool = False):
        super().__init__()
        self.max_frames = max_frames
        self.frame_embedding = nn.Parameter(torch.zeros(max_frames, channels))
        self.attn = AttentionSubLayer(channels, heads=heads, zero_out=zero_out)
        self.ff = FeedForwardSubLayer(channels, ffn_mult, zero_out=zero_out)

    def forward(self, F_t: torch.Tensor, num_frames: Optional[int] = None) -> torch.Tensor:
        num_frames = num_frames or F_t.shape[0]
        if F_t.shape[0] % num_frames:
            raise ValueError(f"{F_t.shape[0]} feature frames do not split into segments of {num_frames}")
        if num_frames > self.max_frames:
            raise ValueError(f"segment length {num_frames} exceeds the positional table ({self.max_frames})")

        height, width = F_t.shape[-2:]
        x = rearrange(F_t, '(b l) c h w -> (b h w) l c', l=num_frames)
        x = self.attn(x, offset=self.frame_embedding[:num_frames])
        x = self.ff(x)
        return rearrange(x, '(b h w) l c -> (b l) c h w', h=height, w=width)


class FuseMLP(nn.Module):
    """Position-wise C -> C map; the last layer is zero-initialized"""

    def __init__(self, channels: int, depth: int = config.FUSE_MLP_DEPTH):
        super().__init__()
        layers = []
        for _ in range(depth - 1):
            layers += [nn.Linear(channels, channels), nn.GELU()]
        last = nn.Linear(channels, channels)
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        layers.append(last)
        self.net = nn.Sequential(*layers)
        self.channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return rearrange(self.net(rearrange(x, 'n c h w -> n h w c')), 'n h w c -> n c h w')


def spatial_branch(F_s: torch.Tensor, params: SpatialBranch) -> torch.Tensor:
    return params(F_s)


def temporal_branch(F_t: torch.Tensor, params: TemporalBranch, num_frames: Optional[int] = None) -> torch.Tensor:
    return params(F_t, num_frames)


def fuse(F_s: torch.Tensor, F_t: torch.Tensor, F_map: torch.Tensor, mlp_params: FuseMLP) -> torch.Tensor:
    """MLP(Concat(F_s', F_t')) + F, spatial half first"""
    if F_s.shape[1] + F_t.shape[1] != F_map.shape[1] or F_map.shape[1] != mlp_params.channels:
        raise ValueError(
            f"fuse channel mismatch: {F_s.shape[1]} + {F_t.shape[1]} vs {F_map.shape[1]} (MLP {mlp_params.channels})"
        )
    return mlp_params(torch.cat([F_s, F_t], dim=1)) + F_map


class TSAMBlock(nn.Module):
    def __init__(self, channels: int, heads: int = config.ATTENTION_HEADS, ffn_mult: int = config.FFN_MULT,
                 max_frames: int = config.MAX_FRAMES, mlp_depth: int = config.FUSE_MLP_DEPTH, level: int = 0):
        super().__init__()
        if channels % 2:
            raise ValueError(f"TSAM needs an even channel count, got {channels}")
        half = channels // 2
        self.level = level
        self.spatial = SpatialBranch(half, heads, ffn_mult)
        self.temporal = TemporalBranch(half, heads, ffn_mult, max_frames)
        self.mlp = FuseMLP(channels, mlp_depth)

    def forward(self, F_map: torch.Tensor, num_frames: Optional[int] = None) -> torch.Tensor:
        F_s, F_t = split_channels(F_map)
        return fuse(self.spatial(F_s), self.temporal(F_t, num_frames), F_map, self.mlp)


def tsam_block(F_map: torch.Tensor, params: TSAMBlock, num_frames: Optional[int] = None) -> torch.Tensor:
    return params(F_map, num_frames)
