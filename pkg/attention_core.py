"""
Attention Primitives
====================

Scaled dot-product attention, per-token layer normalization and the
position-wise feed-forward network shared by the semantic spatial
transformer, the temporal transformer and both TSAM branches.

Token blocks are (B, N, d) tensors: B independent sequences of N tokens.
"""

import math
import logging
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

import config

logger = logging.getLogger(__name__)


class Attention(nn.Module):
    """
    Projection weights for one attention layer (W_q, W_k, W_v, W_out)

    Parameters:
    d_model: Width of the query source (and of the output)
    d_ctx: Width of the key/value source (defaults to d_model: self-attention)
    d_attn: Inner attention width (defaults to d_model)
    heads: Number of heads; d_attn must be divisible by it
    zero_out: Zero-initialize W_out so the layer starts as a no-op on a residual path
    """

    def __init__(self, d_model: int, d_ctx: Optional[int] = None, d_attn: Optional[int] = None,
                 heads: int = config.ATTENTION_HEADS, zero_out: bool = False):
        super().__init__()
        d_ctx = d_ctx or d_model
        d_attn = d_attn or d_model
        if d_attn % heads:
            raise ValueError(f"d_attn={d_attn} is not divisible by heads={heads}")

        self.d_model = d_model
        self.d_ctx = d_ctx
        self.d_attn = d_attn
        self.heads = heads
        self.d_head = d_attn // heads

        self.w_q = nn.Linear(d_model, d_attn, bias=False)
        self.w_k = nn.Linear(d_ctx, d_attn, bias=False)
        self.w_v = nn.Linear(d_ctx, d_attn, bias=False)
        self.w_out = nn.Linear(d_attn, d_model, bias=False)
        if zero_out:
            nn.init.zeros_(self.w_out.weight)

    def forward(self, q_src: torch.Tensor, kv_src: Optional[torch.Tensor] = None,
                return_weights: bool = False):
        return scaled_dot_attention(q_src, q_src if kv_src is None else kv_src, self, return_weights)


def scaled_dot_attention(q_src: torch.Tensor, kv_src: torch.Tensor, p: Attention,
                         return_weights: bool = False):
    """
    Softmax(QKᵀ/√d)V per head, followed by W_out

    Parameters:
    q_src: Query tokens (B, N_q, d_model)
    kv_src: Context tokens (B, N_k, d_ctx)
    p: Attention projections
    return_weights: Also return the (B, heads, N_q, N_k) attention weights

    Returns:
    Output tokens (B, N_q, d_model), optionally with the weights
    """
    if q_src.dim() != 3 or kv_src.dim() != 3:
        raise ValueError("attention inputs must be (B, N, d) token blocks")
    if q_src.shape[0] != kv_src.shape[0]:
        raise ValueError(f"batch mismatch: {q_src.shape[0]} queries vs {kv_src.shape[0]} contexts")
    if q_src.shape[-1] != p.d_model:
        raise ValueError(f"query width {q_src.shape[-1]} != W_q input {p.d_model}")
    if kv_src.shape[-1] != p.d_ctx:
        raise ValueError(f"context width {kv_src.shape[-1]} != W_k/W_v input {p.d_ctx}")
    if q_src.shape[1] < 1 or kv_src.shape[1] < 1:
        raise ValueError("attention needs at least one query and one key token")
    if torch.isnan(q_src).any() or torch.isnan(kv_src).any():
        raise ValueError("NaN in attention inputs")

    q = rearrange(p.w_q(q_src), 'b n (h d) -> b h n d', h=p.heads)
    k = rearrange(p.w_k(kv_src), 'b n (h d) -> b h n d', h=p.heads)
    v = rearrange(p.w_v(kv_src), 'b n (h d) -> b h n d', h=p.heads)

    logits = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(p.d_head)
    weights = logits.softmax(dim=-1)
    mixed = rearrange(torch.matmul(weights, v), 'b h n d -> b n (h d)')
    out = p.w_out(mixed)

    if return_weights:
        return out, weights
    return out


def layer_normalize(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
                    eps: float = config.LAYER_NORM_EPS) -> torch.Tensor:
    """Per-token normalization to zero mean / unit variance, then gain and bias"""
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ValueError(f"norm width mismatch: tokens {x.shape[-1]}, gain {gain.shape[-1]}, bias {bias.shape[-1]}")
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


class FeedForward(nn.Module):
    """Position-wise two-layer map d -> mult·d -> d with GELU"""

    def __init__(self, dim: int, mult: int = config.FFN_MULT, zero_out: bool = False):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)
        if zero_out:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return feed_forward(x, self)


def feed_forward(x: torch.Tensor, params: FeedForward) -> torch.Tensor:
    if x.shape[-1] != params.dim:
        raise ValueError(f"FFN width mismatch: tokens {x.shape[-1]}, layer {params.dim}")
    return params.fc2(F.gelu(params.fc1(x)))


def token_norm(dim: int) -> nn.LayerNorm:
    """Pre-norm used in front of every attention / FFN sub-layer"""
    return nn.LayerNorm(dim, eps=config.LAYER_NORM_EPS)


class AttentionSubLayer(nn.Module):
    """x + Attention(Norm(x), context): one pre-norm residual sub-layer"""

    def __init__(self, dim: int, d_ctx: Optional[int] = None, heads: int = config.ATTENTION_HEADS,
                 zero_out: bool = False):
        super().__init__()
        self.norm = token_norm(dim)
        self.attn = Attention(dim, d_ctx=d_ctx, heads=heads, zero_out=zero_out)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None,
                offset: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = layer_normalize(x, self.norm.weight, self.norm.bias, self.norm.eps)
        if offset is not None:
            h = h + offset
        return x + self.attn(h, context)


class FeedForwardSubLayer(nn.Module):
    """x + FFN(Norm(x))"""

    def __init__(self, dim: int, mult: int = config.FFN_MULT, zero_out: bool = False):
        super().__init__()
        self.norm = token_norm(dim)
        self.ffn = FeedForward(dim, mult, zero_out=zero_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.ffn(layer_normalize(x, self.norm.weight, self.norm.bias, self.norm.eps))
