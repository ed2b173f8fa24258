"""
Toy Denoising U-Net
===================

ε_θ(z_t; t, c) for latent video segments. Per level the block order is
ResBlock -> semantic spatial transformer -> temporal transformer -> TSAM,
each attention stage present only at configured levels and only when its
toggle is on. LR conditioning concatenates the encoded LR latents to z_t
at the input.

Tensors inside the network are (B·L, C, H, W); temporal modules receive the
segment length to unflatten frames.
"""

import math
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

import config
from config import DenoiserConfig
from errors import NumericalError
from noise_schedule import LatentSequence
from seam import SemanticEmbedding, SemanticSpatialTransformer
from tsam import TemporalBranch, TSAMBlock

logger = logging.getLogger(__name__)

PARAMETER_GROUPS = ('backbone', 'semantic', 'temporal', 'tsam')


@dataclass
class ConditioningBundle:
    """The c in ε_θ(z_t; t, c)"""
    lr_latents: LatentSequence
    semantic: Optional[SemanticEmbedding]
    timestep: int


def timestep_embedding(timesteps: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding (N,) -> (N, dim)"""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = timesteps.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimestepMLP(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, 4 * dim)

    def forward(self, timesteps: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(timesteps, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(emb)))


class ResBlock(nn.Module):
    """GroupNorm-SiLU-Conv twice, timestep embedding added in between"""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class LevelAttention(nn.Module):
    """Semantic spatial transformer -> temporal transformer -> TSAM at one level"""

    def __init__(self, channels: int, cfg: DenoiserConfig, level: int):
        super().__init__()
        self.level = level
        self.semantic = (SemanticSpatialTransformer(channels, cfg.semantic_dim, cfg.heads, cfg.ffn_mult,
                                                    cfg.semantic_self_attention, level)
                         if cfg.semantic_enabled else None)
        self.temporal = (TemporalBranch(channels, cfg.heads, cfg.ffn_mult, cfg.max_frames, zero_out=True)
                         if cfg.temporal_enabled else None)
        self.tsam = (TSAMBlock(channels, cfg.heads, cfg.ffn_mult, cfg.max_frames, cfg.fuse_mlp_depth, level)
                     if cfg.tsam_enabled else None)

    def forward(self, x: torch.Tensor, semantic: Optional[torch.Tensor], num_frames: int,
                active: Optional[Dict[str, bool]] = None) -> torch.Tensor:
        active = active or {}
        if self.semantic is not None and active.get("semantic", True):
            x = self.semantic(x, semantic)
        if self.temporal is not None and active.get("temporal", True):
            x = self.temporal(x, num_frames)
        if self.tsam is not None and active.get("tsam", True):
            x = self.tsam(x, num_frames)
        return x


class DenoiserNetwork(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.active = {"semantic": True, "temporal": True, "tsam": True}
        channels = cfg.level_channels()
        temb_dim = 4 * cfg.timestep_embed_dim
        groups = cfg.norm_groups
        attn_levels = set(cfg.attention_levels)

        self.time_mlp = TimestepMLP(cfg.timestep_embed_dim)
        self.in_conv = nn.Conv2d(2 * cfg.latent_channels, channels[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsamples = nn.ModuleList()
        prev = channels[0]
        for level, width in enumerate(channels):
            self.down_blocks.append(ResBlock(prev, width, temb_dim, groups))
            if level in attn_levels:
                self.down_attn[str(level)] = LevelAttention(width, cfg, level)
            if level < len(channels) - 1:
                self.downsamples.append(nn.Conv2d(width, width, 3, stride=2, padding=1))
            prev = width

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(len(channels))):
            width = channels[level]
            if level < len(channels) - 1:
                self.upsamples.append(nn.Conv2d(prev, prev, 3, padding=1))
            self.up_blocks.append(ResBlock(prev + width, width, temb_dim, groups))
            if level in attn_levels:
                self.up_attn[str(level)] = LevelAttention(width, cfg, level)
            prev = width

        self.out_norm = nn.GroupNorm(groups, channels[0])
        self.out_conv = nn.Conv2d(channels[0], cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, z_t: torch.Tensor, lr_latents: torch.Tensor, timesteps: torch.Tensor,
                semantic: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Predict noise for a batch of segments

        Parameters:
        z_t: Noisy latents (B, L, C_z, h, w)
        lr_latents: Encoded LR latents, same shape as z_t
        timesteps: Integer timesteps (B,)
        semantic: Semantic tokens (B, L, N_s, d_s); required iff semantic_enabled

        Returns:
        Predicted noise (B, L, C_z, h, w)
        """
        self._check_inputs(z_t, lr_latents, timesteps, semantic)
        batch, num_frames = z_t.shape[:2]
        levels = len(self.down_blocks)

        x = rearrange(condition_on_lr(z_t, lr_latents), 'b l c h w -> (b l) c h w')
        frame_t = timesteps.repeat_interleave(num_frames)
        temb = self.time_mlp(frame_t)
        sem = rearrange(semantic, 'b l n d -> (b l) n d') if semantic is not None else None

        x = self._finite(self.in_conv(x), 'in_conv')
        skips = []
        for level in range(levels):
            x = self._finite(self.down_blocks[level](x, temb), f'down_blocks.{level}')
            if str(level) in self.down_attn:
                x = self._finite(self.down_attn[str(level)](x, sem, num_frames, self.active), f'down_attn.{level}')
            skips.append(x)
            if level < levels - 1:
                x = self._finite(self.downsamples[level](x), f'downsamples.{level}')

        for i, level in enumerate(reversed(range(levels))):
            if level < levels - 1:
                x = F.interpolate(x, scale_factor=2, mode='nearest')
                x = self._finite(self.upsamples[i - 1](x), f'upsamples.{i - 1}')
            x = torch.cat([x, skips[level]], dim=1)
            x = self._finite(self.up_blocks[i](x, temb), f'up_blocks.{i}')
            if str(level) in self.up_attn:
                x = self._finite(self.up_attn[str(level)](x, sem, num_frames, self.active), f'up_attn.{level}')

        out = self.out_conv(F.silu(self.out_norm(x)))
        out = self._finite(out, 'out_conv')
        return rearrange(out, '(b l) c h w -> b l c h w', b=batch)

    def _check_inputs(self, z_t, lr_latents, timesteps, semantic) -> None:
        if z_t.dim() != 5:
            raise ValueError(f"z_t must be (B, L, C, h, w), got {tuple(z_t.shape)}")
        if z_t.shape[2] != self.cfg.latent_channels:
            raise ValueError(f"z_t has {z_t.shape[2]} channels, network expects {self.cfg.latent_channels}")
        if lr_latents.shape != z_t.shape:
            raise ValueError(f"LR latents {tuple(lr_latents.shape)} do not match z_t {tuple(z_t.shape)}")
        factor = 2 ** (len(self.cfg.level_multipliers) - 1)
        if z_t.shape[-1] % factor or z_t.shape[-2] % factor:
            raise ValueError(f"latent size {tuple(z_t.shape[-2:])} not divisible by U-Net factor {factor}")
        if timesteps.shape != (z_t.shape[0],):
            raise ValueError(f"need one timestep per segment, got shape {tuple(timesteps.shape)}")
        if z_t.shape[1] > self.cfg.max_frames and (self.cfg.temporal_enabled or self.cfg.tsam_enabled):
            raise ValueError(f"segment length {z_t.shape[1]} exceeds max_frames={self.cfg.max_frames}")
        if self.uses_semantic:
            if semantic is None:
                raise ValueError("semantic conditioning is enabled but no semantic tokens were given")
            if semantic.shape[:2] != z_t.shape[:2] or semantic.shape[-1] != self.cfg.semantic_dim:
                raise ValueError(f"semantic tokens {tuple(semantic.shape)} do not match segments {tuple(z_t.shape[:2])}")
        elif semantic is not None:
            raise ValueError("semantic tokens given to a network whose semantic conditioning is off")

    @property
    def uses_semantic(self) -> bool:
        return self.cfg.semantic_enabled and self.active["semantic"]

    def set_active(self, semantic: bool = True, temporal: bool = True, tsam: bool = True) -> None:
        """Runtime bypass of built attention stages; parameters are kept"""
        self.active = {"semantic": semantic, "temporal": temporal, "tsam": tsam}

    @staticmethod
    def _finite(x: torch.Tensor, layer: str) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise NumericalError(layer)
        return x

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        groups = {name: [] for name in PARAMETER_GROUPS}
        for name, param in self.named_parameters():
            groups[parameter_group(name)].append(param)
        return groups

    def named_group_parameters(self, *groups: str):
        return [(name, p) for name, p in self.named_parameters() if parameter_group(name) in groups]


def parameter_group(name: str) -> str:
    """Group of a hierarchical parameter name: backbone / semantic / temporal / tsam"""
    parts = name.split('.')
    for group in ('semantic', 'temporal', 'tsam'):
        if len(parts) > 2 and parts[0] in ('down_attn', 'up_attn') and parts[2] == group:
            return group
    return 'backbone'


def count_parameters(net: nn.Module, group: Optional[str] = None) -> int:
    if group is None:
        return sum(p.numel() for p in net.parameters())
    return sum(p.numel() for name, p in net.named_parameters() if parameter_group(name) == group)


def parameter_report(net: nn.Module) -> Dict[str, int]:
    report = {f"{group}_params": count_parameters(net, group) for group in PARAMETER_GROUPS}
    report['total_params'] = count_parameters(net)
    return report


def build_denoiser(cfg: DenoiserConfig, seed: int = config.DEFAULT_SEED) -> DenoiserNetwork:
    """
    Build a denoiser with deterministic initialization

    Residual-injection output projections (semantic attention, temporal
    attention, TSAM fusion MLP) and the final conv start at zero.
    """
    is_valid, errors = _validate(cfg)
    if not is_valid:
        raise ValueError('; '.join(errors))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = DenoiserNetwork(cfg)
    report = parameter_report(net)
    logger.info(
        f"🧱 Built denoiser: {report['total_params']:,} params "
        f"(semantic {report['semantic_params']:,}, temporal {report['temporal_params']:,}, tsam {report['tsam_params']:,})"
    )
    return net


def _validate(cfg: DenoiserConfig):
    errors = config.validate_denoiser_config(cfg)
    return len(errors) == 0, errors


def condition_on_lr(z_t: torch.Tensor, lr: torch.Tensor) -> torch.Tensor:
    """Channel concat: [0, C_z) = z_t, [C_z, 2·C_z) = lr; works on (L, ...) or (B, L, ...)"""
    if z_t.shape != lr.shape:
        raise ValueError(f"LR latents {tuple(lr.shape)} do not match z_t {tuple(z_t.shape)}")
    return torch.cat([z_t, lr], dim=-3)


def predict_noise(net: DenoiserNetwork, z_t: LatentSequence, cond: ConditioningBundle) -> LatentSequence:
    """ε_θ for a single segment"""
    if z_t.timestep is not None and z_t.timestep != cond.timestep:
        raise ValueError(f"z_t is at timestep {z_t.timestep} but conditioning says {cond.timestep}")
    dtype = next(net.parameters()).dtype
    semantic = cond.semantic.tokens[None].to(dtype) if cond.semantic is not None else None
    timesteps = torch.tensor([cond.timestep], dtype=torch.long)
    out = net(z_t.data[None].to(dtype), cond.lr_latents.data[None].to(dtype), timesteps, semantic)
    return LatentSequence(out[0], timestep=cond.timestep)


def load_backbone_state(net: DenoiserNetwork, state: Dict[str, torch.Tensor]) -> List[str]:
    """
    Load parameters present in both the state and the network

    Returns the network parameter names that were not in the state; raises
    if any stored tensor has the wrong shape.
    """
    own = net.state_dict()
    missing = []
    for name, tensor in own.items():
        if name in state:
            if state[name].shape != tensor.shape:
                raise ValueError(f"shape mismatch for {name}: stored {tuple(state[name].shape)}, network {tuple(tensor.shape)}")
            own[name] = state[name].to(tensor.dtype)
        else:
            missing.append(name)
    net.load_state_dict(own)
    return missing
