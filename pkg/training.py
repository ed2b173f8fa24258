"""
Two-Stage Training
==================

Stage 1 trains the spatial backbone and semantic cross-attention on
independent frames (L = 1) with the temporal transformer and TSAM absent
from the network. Stage 2 rebuilds the network with the temporal modules,
loads the stage-1 weights, freezes them and optimizes only the new modules.

Both stages minimize the same epsilon-prediction MSE. Every random draw
(data window, crop, degradation, timestep, noise) comes from a stream
derived from (seed, stage, step), so a resumed run continues exactly like
an uninterrupted one.
"""

import os
import json
import time
import logging
from dataclasses import dataclass, asdict, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

import config
from config import RunConfig, DenoiserConfig
from errors import CheckpointError, ConfigError, FreezeViolation
from noise_schedule import (
    NoiseSchedule, LatentSequence, make_schedule, q_sample, denoising_loss, derive_seed,
)
from codec import VideoSegment, LatentCodec, encode, pretrain_codec, codec_state, codec_from_state
from seam import SemanticEncoder, encoder_from_config
from denoiser import (
    DenoiserNetwork, build_denoiser, load_backbone_state, parameter_group, parameter_report,
)
from degrade import degrade_segment, bicubic_upsample
from checkpoint_store import save_checkpoint, load_checkpoint, state_checksum
from video_io import read_clips

logger = logging.getLogger(__name__)

FROZEN_GROUPS = ('backbone', 'semantic')
STAGE2_GROUPS = ('temporal', 'tsam')
DATA_STREAM, NOISE_STREAM = 0, 1


@dataclass
class SegmentBatch:
    """Paired HQ (B, L, 3, H, W) and LQ (B, L, 3, H/4, W/4) segments"""
    hq: torch.Tensor
    lq: torch.Tensor


@dataclass
class LatentBatch:
    """Encoded training batch; semantic is None when SeAM is off"""
    z0: torch.Tensor
    lr: torch.Tensor
    semantic: Optional[torch.Tensor] = None

    @property
    def size(self) -> int:
        return self.z0.shape[0]


def sample_training_batch(clips: List[torch.Tensor], batch_size: int, segment_length: int, crop: int,
                          seed: int, stage: int, step: int,
                          degrade_cfg: config.DegradeConfig) -> SegmentBatch:
    """Random L-frame windows and crops, degraded on the fly with per-item seeds"""
    if not clips:
        raise ValueError("no training clips")
    rng = np.random.default_rng(derive_seed(seed, stage, step, DATA_STREAM))
    hq_items, lq_items = [], []
    for item in range(batch_size):
        clip = clips[int(rng.integers(len(clips)))]
        frames, _, height, width = clip.shape
        if frames < segment_length or height < crop or width < crop:
            raise ValueError(f"clip of {frames}x{height}x{width} is too small for "
                             f"L={segment_length} and crop {crop}")
        start = int(rng.integers(frames - segment_length + 1))
        top = int(rng.integers(height - crop + 1))
        left = int(rng.integers(width - crop + 1))
        hq = clip[start:start + segment_length, :, top:top + crop, left:left + crop]
        lq = degrade_segment(VideoSegment(hq), derive_seed(seed, stage, step, DATA_STREAM, item),
                             degrade_cfg, segment_index=item)
        hq_items.append(hq)
        lq_items.append(lq.frames)
    return SegmentBatch(hq=torch.stack(hq_items), lq=torch.stack(lq_items))


def lr_latents(lq: VideoSegment, codec: LatentCodec) -> LatentSequence:
    """LQ frames bicubically upsampled ×4, clamped, then encoded"""
    up = bicubic_upsample(lq.frames).clamp(0.0, 1.0)
    return encode(VideoSegment(up, source_id=lq.source_id, frame_offset=lq.frame_offset), codec)


def prepare_batch(batch: SegmentBatch, codec: LatentCodec,
                  encoder: Optional[SemanticEncoder]) -> LatentBatch:
    """Encode HQ targets, LR conditioning latents and (optionally) semantic tokens"""
    z0, lr, semantic = [], [], []
    for hq, lq in zip(batch.hq, batch.lq):
        lq_segment = VideoSegment(lq)
        z0.append(encode(VideoSegment(hq), codec).data)
        lr.append(lr_latents(lq_segment, codec).data)
        if encoder is not None:
            semantic.append(encoder.encode(lq_segment).tokens)
    return LatentBatch(z0=torch.stack(z0), lr=torch.stack(lr),
                       semantic=torch.stack(semantic) if encoder is not None else None)


def diffusion_loss(net: DenoiserNetwork, batch: LatentBatch, schedule: NoiseSchedule,
                   generator: torch.Generator, t: Optional[torch.Tensor] = None,
                   eps: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Epsilon-prediction MSE over a batch; t ~ U[0, T) per segment and ε ~ N(0, I) unless given"""
    if batch.size == 0:
        raise ValueError("empty training batch")
    if t is None:
        t = torch.randint(0, schedule.T, (batch.size,), generator=generator)
    if eps is None:
        eps = torch.randn(batch.z0.shape, generator=generator, dtype=batch.z0.dtype)
    if eps.shape != batch.z0.shape or t.shape != (batch.size,):
        raise ValueError("fixed (t, eps) do not match the batch")

    z_t = torch.stack([
        q_sample(LatentSequence(batch.z0[b]), int(t[b]), LatentSequence(eps[b]), schedule).data
        for b in range(batch.size)
    ])
    eps_hat = net(z_t, batch.lr, t, batch.semantic)
    return denoising_loss(eps, eps_hat)


def _apply_update(net: nn.Module, optimizer: torch.optim.Optimizer, loss: torch.Tensor, grad_clip: float) -> None:
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    trainable = [p for p in net.parameters() if p.requires_grad]
    if grad_clip and grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(trainable, grad_clip)
    optimizer.step()


def stage1_step(net: DenoiserNetwork, optimizer: torch.optim.Optimizer, batch: LatentBatch,
                schedule: NoiseSchedule, generator: torch.Generator,
                grad_clip: float = config.GRAD_CLIP_NORM,
                t: Optional[torch.Tensor] = None, eps: Optional[torch.Tensor] = None) -> float:
    """One stage-1 update of backbone + SeAM; returns the loss before the update"""
    temporal = net.named_group_parameters(*STAGE2_GROUPS)
    if any(p.requires_grad for _, p in temporal):
        raise FreezeViolation(f"stage 1 network has trainable temporal parameters: {temporal[0][0]}")

    loss = diffusion_loss(net, batch, schedule, generator, t, eps)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for name, p in temporal:
        if p.grad is not None and torch.any(p.grad != 0):
            raise FreezeViolation(f"temporal parameter {name} received gradient in stage 1")
    if grad_clip and grad_clip > 0:
        torch.nn.utils.clip_grad_norm_([p for p in net.parameters() if p.requires_grad], grad_clip)
    optimizer.step()
    return loss.item()


def frozen_checksum(net: DenoiserNetwork) -> str:
    return state_checksum((name, p.detach()) for name, p in net.named_group_parameters(*FROZEN_GROUPS))


def stage2_step(net: DenoiserNetwork, optimizer: torch.optim.Optimizer, batch: LatentBatch,
                schedule: NoiseSchedule, generator: torch.Generator, expected_checksum: str,
                grad_clip: float = config.GRAD_CLIP_NORM,
                t: Optional[torch.Tensor] = None, eps: Optional[torch.Tensor] = None) -> float:
    """One stage-2 update of temporal transformer (+ TSAM); frozen set verified after the step"""
    if not net.cfg.temporal_enabled:
        raise ValueError("stage 2 needs a network with the temporal transformer enabled")

    loss = diffusion_loss(net, batch, schedule, generator, t, eps)
    _apply_update(net, optimizer, loss, grad_clip)
    if frozen_checksum(net) != expected_checksum:
        raise FreezeViolation("frozen stage-1 parameters changed during a stage-2 step")
    return loss.item()


def freeze_for_stage2(net: DenoiserNetwork) -> Tuple[List[nn.Parameter], str]:
    """Freeze backbone + SeAM; returns (trainable parameters, frozen-set checksum)"""
    trainable = []
    for name, param in net.named_parameters():
        train = parameter_group(name) in STAGE2_GROUPS
        param.requires_grad_(train)
        if train:
            trainable.append(param)
    if not trainable:
        raise ValueError("network has no temporal parameters to train in stage 2")
    return trainable, frozen_checksum(net)


def stage1_denoiser_config(cfg: DenoiserConfig) -> DenoiserConfig:
    return replace(cfg, temporal_enabled=False, tsam_enabled=False)


def stage2_denoiser_config(cfg: DenoiserConfig) -> DenoiserConfig:
    """Temporal transformer always on; TSAM as configured"""
    return replace(cfg, temporal_enabled=True)


def build_stage2_network(cfg: DenoiserConfig, stage1_state: Dict[str, torch.Tensor],
                         seed: int = config.DEFAULT_SEED) -> DenoiserNetwork:
    """Stage-2 network carrying the stage-1 weights; new modules keep their zero init"""
    net = build_denoiser(stage2_denoiser_config(cfg), seed)
    own = set(net.state_dict())
    unexpected = sorted(set(stage1_state) - own)
    if unexpected:
        raise CheckpointError(f"stage-1 state has tensors the network lacks: {unexpected[:3]}")
    try:
        missing = load_backbone_state(net, stage1_state)
    except ValueError as e:
        raise CheckpointError(str(e)) from e
    stray = [name for name in missing if parameter_group(name) not in STAGE2_GROUPS]
    if stray:
        raise CheckpointError(f"stage-1 checkpoint is missing backbone tensors: {stray[:3]}")
    return net


def model_state(net: nn.Module) -> Dict[str, torch.Tensor]:
    return {f"model.{name}": t for name, t in net.state_dict().items()}


def strip_prefix(tensors: Dict[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    return {name[len(prefix):]: t for name, t in tensors.items() if name.startswith(prefix)}


def optimizer_state(optimizer: torch.optim.Optimizer) -> Dict[str, torch.Tensor]:
    tensors = {}
    for index, state in optimizer.state_dict()['state'].items():
        for key, value in state.items():
            tensors[f"optim.{index}.{key}"] = value if torch.is_tensor(value) else torch.tensor(float(value))
    return tensors


def restore_optimizer(optimizer: torch.optim.Optimizer, tensors: Dict[str, torch.Tensor]) -> None:
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for name, value in strip_prefix(tensors, "optim.").items():
        index, key = name.split('.', 1)
        state.setdefault(int(index), {})[key] = value
    full = optimizer.state_dict()
    full['state'] = state
    optimizer.load_state_dict(full)


class TwoStageTrainer:
    """
    Runs one training stage over a directory of HQ clips

    Parameters:
    cfg: Effective run configuration
    clips: HQ clips (N, 3, H, W)
    codec: Frozen latent codec
    net: Denoiser for this stage
    start_step: First step to run (non-zero when resuming)
    """

    def __init__(self, cfg: RunConfig, clips: List[torch.Tensor], codec: LatentCodec,
                 net: DenoiserNetwork, start_step: int = 0,
                 optimizer_tensors: Optional[Dict[str, torch.Tensor]] = None):
        self.logger = self._setup_logging()
        self.cfg = cfg
        self.stage = cfg.train.stage
        self.clips = clips
        self.codec = codec
        self.net = net
        self.step = start_step
        self.schedule = make_schedule(**config.get_schedule_parameters(cfg.train))
        self.encoder = encoder_from_config(cfg.semantic) if net.cfg.semantic_enabled else None
        self.segment_length = cfg.train.effective_segment_length(cfg.data.segment_length)
        self.learning_rate = cfg.train.effective_learning_rate()

        if self.stage == 1:
            trainable = [p for p in net.parameters() if p.requires_grad]
            self.expected_checksum = None
        else:
            trainable, self.expected_checksum = freeze_for_stage2(net)
        self.optimizer = torch.optim.Adam(trainable, lr=self.learning_rate,
                                          betas=tuple(cfg.train.adam_betas), eps=cfg.train.adam_eps)
        if optimizer_tensors:
            restore_optimizer(self.optimizer, optimizer_tensors)

    def _setup_logging(self):
        """Set up logging for the trainer"""
        logger = logging.getLogger(f"{__name__}.TwoStageTrainer")
        if not logger.handlers:
            handler = logging.StreamHandler()
            formatter = logging.Formatter(config.LOG_FORMAT)
            handler.setFormatter(formatter)
            logger.addHandler(handler)
            logger.setLevel(config.LOG_LEVEL)
            logger.propagate = False
        return logger

    def train_step(self) -> float:
        """Run the step at self.step and advance"""
        tc = self.cfg.train
        batch = sample_training_batch(self.clips, tc.batch_size, self.segment_length, tc.crop_size,
                                      tc.seed, self.stage, self.step, self.cfg.degrade)
        latents = prepare_batch(batch, self.codec, self.encoder)
        generator = torch.Generator().manual_seed(derive_seed(tc.seed, self.stage, self.step, NOISE_STREAM))
        if self.stage == 1:
            loss = stage1_step(self.net, self.optimizer, latents, self.schedule, generator, tc.grad_clip)
        else:
            loss = stage2_step(self.net, self.optimizer, latents, self.schedule, generator,
                               self.expected_checksum, tc.grad_clip)
        self.step += 1
        return loss

    def checkpoint_meta(self) -> Dict[str, object]:
        meta = {
            'stage': f"stage{self.stage}",
            'step': self.step,
            'schema_version': config.SCHEMA_VERSION,
            'config': config.run_config_to_dict(self.cfg),
            'denoiser': asdict(self.net.cfg),
            'codec_config': asdict(self.cfg.codec),
            'parameters': parameter_report(self.net),
        }
        if self.expected_checksum is not None:
            meta['frozen_checksum'] = self.expected_checksum
        return meta

    def save(self, path: str) -> None:
        tensors = model_state(self.net)
        tensors.update(codec_state(self.codec))
        tensors.update(optimizer_state(self.optimizer))
        save_checkpoint(path, tensors, self.checkpoint_meta())

    def run(self, out_checkpoint: str, log_path: str) -> List[Dict[str, object]]:
        """Train to cfg.train.steps, appending (step, stage, loss, lr, wall_ms) records to log_path"""
        tc = self.cfg.train
        records = _read_log(log_path, before_step=self.step)
        _write_log(log_path, records)

        self.logger.info(f"🚀 Stage {self.stage} training: steps {self.step}..{tc.steps - 1}, "
                         f"L={self.segment_length}, batch={tc.batch_size}, lr={self.learning_rate}")
        with open(log_path, 'a') as log_file:
            while self.step < tc.steps:
                started = time.perf_counter()
                step = self.step
                loss = self.train_step()
                record = {'step': step, 'stage': self.stage, 'loss': loss, 'lr': self.learning_rate,
                          'wall_ms': round((time.perf_counter() - started) * 1000.0, 3)}
                records.append(record)
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()

                if tc.log_every and (step % tc.log_every == 0 or self.step == tc.steps):
                    self.logger.info(f"📊 stage {self.stage} step {step}: loss={loss:.6f}")
                if tc.checkpoint_every and self.step % tc.checkpoint_every == 0 and self.step < tc.steps:
                    self.save(out_checkpoint)

        self.save(out_checkpoint)
        self.logger.info(f"✅ Stage {self.stage} finished at step {self.step}: {out_checkpoint}")
        return records


def _read_log(path: str, before_step: int) -> List[Dict[str, object]]:
    if before_step == 0 or not os.path.exists(path):
        return []
    with open(path) as f:
        records = [json.loads(line) for line in f if line.strip()]
    return [r for r in records if r['step'] < before_step]


def _write_log(path: str, records: List[Dict[str, object]]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w') as f:
        for record in records:
            f.write(json.dumps(record) + "\n")


def loss_log_path(out_checkpoint: str) -> str:
    return f"{os.path.splitext(out_checkpoint)[0]}_loss.jsonl"


def codec_path(out_checkpoint: str) -> str:
    return f"{os.path.splitext(out_checkpoint)[0]}_codec.ckpt"


def load_codec_checkpoint(path: str, cfg: config.CodecConfig) -> LatentCodec:
    tensors, meta = load_checkpoint(path, expected_stage=('codec', 'stage1', 'stage2'))
    if not any(name.startswith("codec.") for name in tensors):
        raise CheckpointError(f"{path} holds no codec tensors")
    stored = meta.get('codec_config')
    if stored:
        cfg = config.CodecConfig(**stored)
    return codec_from_state(tensors, cfg)


def save_codec_checkpoint(path: str, codec: LatentCodec, cfg: config.CodecConfig,
                          history: Optional[List[float]] = None) -> str:
    meta = {'stage': 'codec', 'codec_config': asdict(cfg), 'schema_version': config.SCHEMA_VERSION,
            'checksum': state_checksum(codec_state(codec).items())}
    if history:
        meta['final_mse'] = history[-1]
    save_checkpoint(path, codec_state(codec), meta)
    return path


def _check_architecture(stored: Dict[str, object], requested: DenoiserConfig, path: str) -> DenoiserConfig:
    stored_cfg = DenoiserConfig(**stored)
    left = asdict(replace(stored_cfg, temporal_enabled=False, tsam_enabled=False))
    right = asdict(replace(requested, temporal_enabled=False, tsam_enabled=False))
    diff = sorted(k for k in left if left[k] != right[k])
    if diff:
        raise CheckpointError(f"{path} was trained with a different denoiser config ({', '.join(diff)})")
    return stored_cfg


def run_training(cfg: RunConfig, data_dir: str, out_checkpoint: str,
                 resume_from: Optional[str] = None,
                 codec_checkpoint: Optional[str] = None) -> List[Dict[str, object]]:
    """
    Run one training stage end to end

    Parameters:
    cfg: Run configuration; cfg.train.stage selects the stage
    data_dir: HQ clip directory (one clip or a directory of clips)
    out_checkpoint: Checkpoint written periodically and at the end
    resume_from: Stage-1 checkpoint (required for stage 2) or a same-stage checkpoint to resume
    codec_checkpoint: Pretrained codec; pretrained here and saved next to the output when omitted

    Returns:
    Loss records (step, stage, loss, lr, wall_ms)
    """
    is_valid, errors = config.validate_config(cfg)
    if not is_valid:
        raise ConfigError('; '.join(errors))
    stage = cfg.train.stage
    clips = [clip.frames for clip in read_clips(data_dir)]

    tensors, meta = {}, {}
    if resume_from:
        accepted = ('stage1',) if stage == 1 else ('stage1', 'stage2')
        tensors, meta = load_checkpoint(resume_from, expected_stage=accepted)
    elif stage == 2:
        raise CheckpointError("stage 2 needs a stage-1 checkpoint to start from (resume_from)")

    if any(name.startswith("codec.") for name in tensors):
        codec = codec_from_state(tensors, config.CodecConfig(**meta.get('codec_config', asdict(cfg.codec))))
    elif codec_checkpoint:
        codec = load_codec_checkpoint(codec_checkpoint, cfg.codec)
    else:
        frames = torch.cat(clips)
        codec, history = pretrain_codec(frames, cfg.codec.epochs, cfg.train.seed, cfg.codec)
        save_codec_checkpoint(codec_path(out_checkpoint), codec, cfg.codec, history)

    start_step, optim_tensors = 0, None
    state = strip_prefix(tensors, "model.")
    if stage == 1:
        net_cfg = stage1_denoiser_config(cfg.denoiser)
        net = build_denoiser(net_cfg, cfg.train.seed)
        if resume_from:
            _check_architecture(meta['denoiser'], net_cfg, resume_from)
            net.load_state_dict(state)
            start_step, optim_tensors = int(meta["step"]), tensors
    else:
        _check_architecture(meta['denoiser'], cfg.denoiser, resume_from)
        if meta['stage'] == 'stage1':
            net = build_stage2_network(cfg.denoiser, state, cfg.train.seed)
        else:
            if meta["denoiser"]["tsam_enabled"] != cfg.denoiser.tsam_enabled:
                raise CheckpointError(f"{resume_from} differs from the config in denoiser.tsam_enabled")
            net = build_denoiser(stage2_denoiser_config(cfg.denoiser), cfg.train.seed)
            net.load_state_dict(state)
            start_step, optim_tensors = int(meta["step"]), tensors

    trainer = TwoStageTrainer(cfg, clips, codec, net, start_step, optim_tensors)
    return trainer.run(out_checkpoint, loss_log_path(out_checkpoint))
