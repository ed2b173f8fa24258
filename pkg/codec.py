"""
Toy Latent Codec
================

Strided-conv encoder / transposed-conv decoder standing in for the VAE.
Frames (L, 3, H, W) in [0, 1] map to latents (L, 4, H/4, W/4) and back.
The codec is strictly per-frame and, once pre-trained, frozen.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

import config
from noise_schedule import LatentSequence

logger = logging.getLogger(__name__)

RANGE_TOLERANCE = 1e-6


@dataclass
class VideoSegment:
    """Block of L pixel frames, the unit of processing"""
    frames: torch.Tensor
    source_id: str = ""
    frame_offset: int = 0
    pad: int = 0                # trailing frames repeated to fill the segment

    def __post_init__(self):
        if self.frames.dim() != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must be (L, 3, H, W), got {tuple(self.frames.shape)}")
        if self.frames.shape[0] < 1:
            raise ValueError("a segment needs at least one frame")
        if self.frames.numel() and (self.frames.min() < -RANGE_TOLERANCE or self.frames.max() > 1 + RANGE_TOLERANCE):
            raise ValueError("frame values must lie within [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def trimmed(self) -> torch.Tensor:
        """Frames without the padding tail"""
        return self.frames[: self.num_frames - self.pad]


def _conv(in_ch: int, out_ch: int, kernel: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=1, padding_mode='replicate')


class LatentCodec(nn.Module):
    """
    Autoencoder with an exact ×4 spatial factor

    The first three latent channels carry the 4×4 block means of the frame and
    the decoder starts from their bicubic upsampling. The strided-conv encoder
    and transposed-conv decoder learn residuals on top of that path; both output
    layers start at zero, so an untrained codec is block-mean / bicubic.
    """

    def __init__(self, hidden: int = config.CODEC_HIDDEN_CHANNELS,
                 latent_channels: int = config.LATENT_CHANNELS):
        super().__init__()
        if latent_channels < 3:
            raise ValueError(f"the codec needs at least 3 latent channels, got {latent_channels}")
        self.hidden = hidden
        self.latent_channels = latent_channels
        self.factor = config.CODEC_FACTOR

        self.encoder_body = nn.Sequential(
            _conv(3, hidden, 3),
            nn.SiLU(),
            _conv(hidden, hidden, 4, stride=2),                          # H -> H/2
            nn.SiLU(),
            _conv(hidden, hidden, 4, stride=2),                          # H/2 -> H/4
            nn.SiLU(),
            _conv(hidden, hidden, 3),
            nn.SiLU(),
        )
        self.encoder_out = _conv(hidden, latent_channels, 3)
        self.decoder_body = nn.Sequential(
            _conv(latent_channels, hidden, 3),
            nn.SiLU(),
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1),  # h -> 2h
            nn.SiLU(),
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1),  # 2h -> 4h
            nn.SiLU(),
            _conv(hidden, hidden, 3),
            nn.SiLU(),
        )
        self.decoder_out = _conv(hidden, 3, 3)
        for layer in (self.encoder_out, self.decoder_out):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def encoder(self, frames: torch.Tensor) -> torch.Tensor:
        means = F.avg_pool2d(frames, self.factor)
        base = F.pad(means, (0, 0, 0, 0, 0, self.latent_channels - 3))
        return base + self.encoder_out(self.encoder_body(frames))

    def decoder(self, z: torch.Tensor) -> torch.Tensor:
        base = F.interpolate(z[:, :3], scale_factor=self.factor, mode='bicubic', align_corners=False)
        return base + self.decoder_out(self.decoder_body(z))

    def forward(self, frames: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        z = self.encoder(frames)
        return self.decoder(z), z

    def freeze(self) -> "LatentCodec":
        self.requires_grad_(False)
        self.eval()
        return self


def _check_divisible(height: int, width: int, factor: int) -> None:
    if height % factor or width % factor:
        raise ValueError(f"frame size {height}x{width} is not divisible by the codec factor {factor}")


def encode(frames: VideoSegment, codec: LatentCodec) -> LatentSequence:
    """Encode a segment frame by frame into (L, C_z, H/4, W/4) latents"""
    _, _, height, width = frames.frames.shape
    _check_divisible(height, width, codec.factor)
    x = frames.frames.to(next(codec.parameters()).dtype)
    with torch.no_grad():
        z = codec.encoder(x)
    return LatentSequence(z)


def decode(z: LatentSequence, codec: LatentCodec, source_id: str = "", frame_offset: int = 0) -> VideoSegment:
    """Decode latents to frames (L, 3, 4h, 4w), clamped to [0, 1]"""
    if z.data.shape[1] != codec.latent_channels:
        raise ValueError(f"latents have {z.data.shape[1]} channels, codec expects {codec.latent_channels}")
    with torch.no_grad():
        frames = codec.decoder(z.data.to(next(codec.parameters()).dtype)).clamp(0.0, 1.0)
    return VideoSegment(frames, source_id=source_id, frame_offset=frame_offset)


def pretrain_codec(dataset: torch.Tensor, epochs: int = config.CODEC_EPOCHS, seed: int = config.DEFAULT_SEED,
                   cfg: config.CodecConfig = None) -> Tuple[LatentCodec, List[float]]:
    """
    Train the codec on reconstruction MSE

    Parameters:
    dataset: Frames (N, 3, H, W) in [0, 1]
    epochs: Passes over the dataset
    seed: Seed for initialization and shuffling
    cfg: Codec sizes and optimizer settings

    Returns:
    Tuple of (frozen codec, per-epoch mean losses)
    """
    cfg = cfg or config.CodecConfig()
    if dataset.dim() != 4 or dataset.shape[0] == 0:
        raise ValueError("pretrain_codec needs a non-empty (N, 3, H, W) frame dataset")
    _check_divisible(dataset.shape[2], dataset.shape[3], config.CODEC_FACTOR)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        codec = LatentCodec(cfg.hidden_channels, cfg.latent_channels)

    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(codec.parameters(), lr=cfg.learning_rate)
    data = dataset.float()
    batches_per_epoch = -(-data.shape[0] // cfg.batch_size)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(epochs * batches_per_epoch, 1))
    history = []

    logger.info(f"🚀 Pretraining codec on {data.shape[0]} frames for {epochs} epochs")
    for epoch in range(epochs):
        order = torch.randperm(data.shape[0], generator=generator)
        total, count = 0.0, 0
        for start in range(0, data.shape[0], cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            recon, _ = codec(batch)
            loss = F.mse_loss(recon, batch)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            total += loss.item() * batch.shape[0]
            count += batch.shape[0]
        history.append(total / count)
        if epoch % 10 == 0 or epoch == epochs - 1:
            logger.info(f"📊 codec epoch {epoch + 1}/{epochs}: mse={history[-1]:.6f}")

    logger.info(f"✅ Codec pretrained (final mse {history[-1]:.6f})")
    return codec.freeze(), history


def codec_state(codec: LatentCodec) -> Dict[str, torch.Tensor]:
    """Codec tensors under the `codec.` prefix used inside checkpoints"""
    return {f"codec.{name}": tensor for name, tensor in codec.state_dict().items()}


def codec_from_state(tensors: Dict[str, torch.Tensor], cfg: config.CodecConfig) -> LatentCodec:
    codec = LatentCodec(cfg.hidden_channels, cfg.latent_channels)
    state = {name[len("codec."):]: t for name, t in tensors.items() if name.startswith("codec.")}
    codec.load_state_dict(state)
    return codec.freeze()
