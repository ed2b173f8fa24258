"""
Ablation Harness
================

Runs the four SeAM / TSAM configurations end to end at toy scale:

    (a) neither    (b) SeAM only    (c) TSAM only    (d) both

The temporal transformer is part of every row. All rows share one
synthetic dataset and one pretrained codec; each row trains stage 1 and
stage 2, super-resolves held-out degraded clips and scores them against
their HQ originals.
"""

import os
import time
import logging
from dataclasses import replace
from typing import Dict, List

import torch

import config
from config import RunConfig
from checkpoint_store import load_checkpoint
from codec import VideoSegment, pretrain_codec
from degrade import degrade_segment
from denoiser import build_denoiser, parameter_report
from metrics import evaluate_video, write_records
from noise_schedule import derive_seed, make_schedule
from sampler import super_resolve, segment_video
from seam import encoder_from_config
from training import (
    run_training, save_codec_checkpoint, load_codec_checkpoint, strip_prefix, stage2_denoiser_config,
)
from video_io import read_clips, synthesize_clip, write_synthetic_dataset

ABLATION_TOGGLES = {
    'a': {'seam': False, 'tsam': False},
    'b': {'seam': True, 'tsam': False},
    'c': {'seam': False, 'tsam': True},
    'd': {'seam': True, 'tsam': True},
}

TEST_SEED_OFFSET = 10_000


class AblationRunner:
    """
    Table-style ablation over SeAM / TSAM

    Parameters:
    run_cfg: Base run configuration; ablation.* sets step counts and rows
    out_dir: Output directory for data, checkpoints and the report
    """

    def __init__(self, run_cfg: RunConfig, out_dir: str):
        self.logger = self._setup_logging()
        self.cfg = run_cfg
        self.out_dir = out_dir
        self.data_dir = os.path.join(out_dir, 'data', 'train')
        self.codec_checkpoint = os.path.join(out_dir, 'codec.ckpt')

    def _setup_logging(self):
        """Set up logging for the ablation runner"""
        logger = logging.getLogger(f"{__name__}.AblationRunner")
        if not logger.handlers:
            handler = logging.StreamHandler()
            formatter = logging.Formatter(config.LOG_FORMAT)
            handler.setFormatter(formatter)
            logger.addHandler(handler)
            logger.setLevel(config.LOG_LEVEL)
            logger.propagate = False
        return logger

    def prepare_data(self) -> None:
        data = self.cfg.data
        write_synthetic_dataset(self.data_dir, data.num_clips, data.num_frames, data.height, data.width, data.seed)
        frames = torch.cat([clip.frames for clip in read_clips(self.data_dir)])
        codec, history = pretrain_codec(frames, self.cfg.codec.epochs, self.cfg.train.seed, self.cfg.codec)
        save_codec_checkpoint(self.codec_checkpoint, codec, self.cfg.codec, history)

    def test_pairs(self) -> List[Dict[str, VideoSegment]]:
        """Held-out HQ clips and their degraded LQ versions, one degradation draw per segment"""
        data = self.cfg.data
        pairs = []
        for index in range(self.cfg.ablation.test_clips):
            seed = data.seed + TEST_SEED_OFFSET + index
            hq = synthesize_clip(seed, data.num_frames, data.height, data.width)
            lq_parts = []
            for seg_index, segment in enumerate(segment_video(hq, data.segment_length)):
                lq = degrade_segment(segment, derive_seed(seed, seg_index), self.cfg.degrade, seg_index)
                lq_parts.append(lq.trimmed())
            clip_id = f"test_{index:03d}"
            pairs.append({'id': clip_id,
                          'hq': VideoSegment(hq, source_id=clip_id),
                          'lq': VideoSegment(torch.cat(lq_parts), source_id=clip_id)})
        return pairs

    def row_config(self, tag: str) -> RunConfig:
        toggles = ABLATION_TOGGLES[tag]
        denoiser = replace(self.cfg.denoiser, semantic_enabled=toggles['seam'],
                           temporal_enabled=True, tsam_enabled=toggles['tsam'])
        sampler = replace(self.cfg.sampler, semantic_enabled=toggles['seam'], tsam_enabled=toggles['tsam'],
                          segment_length=self.cfg.data.segment_length)
        return replace(self.cfg, denoiser=denoiser, sampler=sampler)

    def run_configuration(self, tag: str, pairs: List[Dict[str, VideoSegment]]) -> Dict[str, object]:
        row_cfg = self.row_config(tag)
        row_dir = os.path.join(self.out_dir, tag)
        stage1_ckpt = os.path.join(row_dir, 'stage1.ckpt')
        stage2_ckpt = os.path.join(row_dir, 'stage2.ckpt')
        self.logger.info(f"🚀 Ablation row ({tag}): SeAM={row_cfg.denoiser.semantic_enabled}, "
                         f"TSAM={row_cfg.denoiser.tsam_enabled}")

        stage1 = replace(row_cfg, train=replace(row_cfg.train, stage=1, steps=self.cfg.ablation.stage1_steps))
        log1 = run_training(stage1, self.data_dir, stage1_ckpt, codec_checkpoint=self.codec_checkpoint)
        stage2 = replace(row_cfg, train=replace(row_cfg.train, stage=2, steps=self.cfg.ablation.stage2_steps))
        log2 = run_training(stage2, self.data_dir, stage2_ckpt, resume_from=stage1_ckpt)

        tensors, _ = load_checkpoint(stage2_ckpt, expected_stage=('stage2',))
        net = build_denoiser(stage2_denoiser_config(row_cfg.denoiser), row_cfg.train.seed)
        net.load_state_dict(strip_prefix(tensors, "model."))
        codec = load_codec_checkpoint(stage2_ckpt, row_cfg.codec)
        encoder = encoder_from_config(row_cfg.semantic) if row_cfg.denoiser.semantic_enabled else None
        schedule = make_schedule(**config.get_schedule_parameters(row_cfg.train))

        records = []
        for pair in pairs:
            pred = super_resolve(net, codec, encoder, pair['lq'], row_cfg.sampler, schedule)
            records.append(evaluate_video(pair['id'], pred, pair['hq'], tag=tag))

        row = {
            'config': tag,
            'seam': row_cfg.denoiser.semantic_enabled,
            'tsam': row_cfg.denoiser.tsam_enabled,
            'psnr_db': sum(r['psnr_db'] for r in records) / len(records),
            'flicker': sum(r['flicker'] for r in records) / len(records),
            'flicker_ref': sum(r['flicker_ref'] for r in records) / len(records),
            'stage1_final_loss': log1[-1]['loss'],
            'stage2_final_loss': log2[-1]['loss'],
        }
        row.update(parameter_report(net))
        self.logger.info(f"📊 ({tag}) psnr={row['psnr_db']:.3f} dB flicker={row['flicker']:.5f}")
        return row

    def run(self) -> List[Dict[str, object]]:
        """Run every configured row; any failure aborts the whole ablation"""
        started = time.perf_counter()
        os.makedirs(self.out_dir, exist_ok=True)
        self.prepare_data()
        pairs = self.test_pairs()
        rows = [self.run_configuration(tag, pairs) for tag in self.cfg.ablation.configurations]
        write_records(rows, os.path.join(self.out_dir, 'ablation.jsonl'))
        self.logger.info(f"✅ Ablation finished: {len(rows)} rows in {time.perf_counter() - started:.1f}s")
        return rows
