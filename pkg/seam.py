"""
Semantic Alignment Module
=========================

This module handles semantic conditioning of the denoiser:
- A pluggable, frozen semantic encoder interface with a registry
- A deterministic stub encoder (patch pooling + fixed random projection)
- Frame-aligned semantic cross-attention injected residually into U-Net features
- The semantic spatial transformer block (self-attn -> semantic cross-attn -> FFN)

Frame i's spatial features only ever attend to frame i's semantic tokens.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

import config
from attention_core import (
    Attention, AttentionSubLayer, FeedForwardSubLayer, scaled_dot_attention,
)
from codec import VideoSegment

logger = logging.getLogger(__name__)


@dataclass
class SemanticEmbedding:
    """Per-frame semantic tokens (L, N_s, d_s)"""
    tokens: torch.Tensor
    encoder: str = "stub"

    def __post_init__(self):
        if self.tokens.dim() != 3 or self.tokens.shape[1] < 1:
            raise ValueError(f"semantic tokens must be (L, N_s>=1, d_s), got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("semantic tokens contain non-finite values")


class SemanticEncoder(ABC):
    """Frozen frame -> token encoder; same frames always give the same tokens"""

    name = "abstract"

    @abstractmethod
    def encode(self, frames: VideoSegment) -> SemanticEmbedding:
        ...

    @property
    @abstractmethod
    def descriptor(self) -> Dict[str, object]:
        ...


_ENCODERS: Dict[str, Callable[..., SemanticEncoder]] = {}


def register_encoder(name: str):
    """Class decorator adding an encoder factory to the registry"""
    def wrap(cls):
        _ENCODERS[name] = cls
        cls.name = name
        return cls
    return wrap


def available_encoders():
    return sorted(_ENCODERS)


def get_encoder(name: str, **kwargs) -> SemanticEncoder:
    if name not in _ENCODERS:
        raise ValueError(f"Unknown semantic encoder '{name}'. Available: {', '.join(available_encoders())}")
    return _ENCODERS[name](**kwargs)


def encoder_from_config(cfg: config.SemanticConfig, **kwargs) -> SemanticEncoder:
    if cfg.encoder == "stub":
        return get_encoder("stub", patch=cfg.patch, d_s=cfg.dim, seed=cfg.seed)
    return get_encoder(cfg.encoder, **kwargs)


def _projection(channels: int, d_s: int, seed: int) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(channels, d_s, generator=generator, dtype=torch.float64) / channels ** 0.5


def stub_encode(frames: VideoSegment, patch: int = config.SEMANTIC_PATCH, d_s: int = config.SEMANTIC_DIM,
                seed: int = config.SEMANTIC_PROJECTION_SEED) -> SemanticEmbedding:
    """
    Deterministic stand-in for a frozen segmentation backbone

    Average-pools non-overlapping patch×patch cells per channel, then maps
    each cell's channel vector through a fixed seeded projection to d_s.
    One token per cell.
    """
    x = frames.frames
    _, channels, height, width = x.shape
    if patch <= 0 or height % patch or width % patch:
        raise ValueError(f"frame size {height}x{width} is not divisible by semantic patch {patch}")

    with torch.no_grad():
        pooled = F.avg_pool2d(x.to(torch.float64), kernel_size=patch, stride=patch)
        cells = rearrange(pooled, 'l c h w -> l (h w) c')
        tokens = cells @ _projection(channels, d_s, seed)
    return SemanticEmbedding(tokens.to(x.dtype).detach(), encoder="stub")


@register_encoder("stub")
class StubSemanticEncoder(SemanticEncoder):
    def __init__(self, patch: int = config.SEMANTIC_PATCH, d_s: int = config.SEMANTIC_DIM,
                 seed: int = config.SEMANTIC_PROJECTION_SEED):
        self.patch = patch
        self.d_s = d_s
        self.seed = seed

    def encode(self, frames: VideoSegment) -> SemanticEmbedding:
        return stub_encode(frames, self.patch, self.d_s, self.seed)

    @property
    def descriptor(self):
        return {"name": self.name, "patch": self.patch, "d_s": self.d_s, "seed": self.seed}


@register_encoder("module")
class ModuleSemanticEncoder(SemanticEncoder):
    """
    Adapter for an external frozen network mapping (L, 3, H, W) -> (L, N_s, d_s)

    The wrapped module is put in eval mode with gradients disabled; it is
    never registered with an optimizer.
    """

    def __init__(self, module: nn.Module, identifier: str = "external"):
        self.module = module.eval().requires_grad_(False)
        self.identifier = identifier

    def encode(self, frames: VideoSegment) -> SemanticEmbedding:
        with torch.no_grad():
            tokens = self.module(frames.frames)
        return SemanticEmbedding(tokens.detach(), encoder=self.identifier)

    @property
    def descriptor(self):
        params = sum(p.numel() for p in self.module.parameters())
        return {"name": self.name, "identifier": self.identifier, "parameters": params}


def semantic_cross_attention(F_map: torch.Tensor, f: torch.Tensor, p: Attention) -> torch.Tensor:
    """
    Residual semantic injection F + W_out·Attention(W_q F_i, W_k f_i, W_v f_i)

    Parameters:
    F_map: Features (L, C, H, W); queries are the H·W positions of each frame
    f: Semantic tokens (L, N_s, d_s), frame-aligned with F_map
    p: Attention projections (d_model=C, d_ctx=d_s)

    Returns:
    Features with the same shape as F_map
    """
    if F_map.shape[0] != f.shape[0]:
        raise ValueError(f"frame count mismatch: features {F_map.shape[0]}, semantic tokens {f.shape[0]}")
    height, width = F_map.shape[-2:]
    queries = rearrange(F_map, 'l c h w -> l (h w) c')
    injected = scaled_dot_attention(queries, f, p)
    return F_map + rearrange(injected, 'l (h w) c -> l c h w', h=height, w=width)


class SemanticSpatialTransformer(nn.Module):
    """
    Spatial self-attention, semantic cross-attention and FFN, each pre-norm
    with a residual; every output projection starts at zero so a fresh block
    is an exact identity.
    """

    def __init__(self, channels: int, semantic_dim: int, heads: int = config.ATTENTION_HEADS,
                 ffn_mult: int = config.FFN_MULT, self_attention: bool = True, level: int = 0):
        super().__init__()
        self.level = level
        self.channels = channels
        self.self_attn = AttentionSubLayer(channels, heads=heads, zero_out=True) if self_attention else None
        self.cross_attn = AttentionSubLayer(channels, d_ctx=semantic_dim, heads=heads, zero_out=True)
        self.ff = FeedForwardSubLayer(channels, ffn_mult, zero_out=True)

    def forward(self, F_map: torch.Tensor, semantic: torch.Tensor) -> torch.Tensor:
        if F_map.shape[0] != semantic.shape[0]:
            raise ValueError(f"frame count mismatch: features {F_map.shape[0]}, semantic tokens {semantic.shape[0]}")
        height, width = F_map.shape[-2:]
        x = rearrange(F_map, 'l c h w -> l (h w) c')
        if self.self_attn is not None:
            x = self.self_attn(x)
        x = self.cross_attn(x, semantic)
        x = self.ff(x)
        return rearrange(x, 'l (h w) c -> l c h w', h=height, w=width)


def semantic_spatial_transformer_block(F_map: torch.Tensor, f: torch.Tensor,
                                       params: SemanticSpatialTransformer) -> torch.Tensor:
    return params(F_map, f)
