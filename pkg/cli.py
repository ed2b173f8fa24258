"""
Command-line interface for the latent video super-resolution engine.

Commands:
    synth           write a deterministic toy HQ dataset
    degrade         synthesize LQ frame directories plus a degradation manifest
    pretrain-codec  train and save the latent codec
    train           run stage 1 or stage 2 training
    sr              super-resolve LQ frame directories
    eval            PSNR / flicker records and temporal-profile images
    ablate          run the SeAM / TSAM ablation end to end

Exit codes: 0 success, 2 validation error, 3 numerical error.
"""

import os
import sys
import json
import time
import argparse
import logging
from dataclasses import replace
from typing import List, Optional

import torch

import config
from config import RunConfig, load_run_config, write_run_metadata
from errors import NumericalError, FreezeViolation
from checkpoint_store import load_checkpoint
from codec import VideoSegment, codec_from_state, pretrain_codec
from degrade import draw_degradation_params, apply_degradation
from denoiser import build_denoiser
from metrics import evaluate_video, temporal_profile, save_profile_image, save_profile_comparison, write_records
from noise_schedule import derive_seed, make_schedule
from sampler import super_resolve, segment_video
from seam import encoder_from_config
from training import run_training, save_codec_checkpoint, strip_prefix
from video_io import list_clips, read_frames, write_frames, write_synthetic_dataset
from ablation import AblationRunner

logger = logging.getLogger(__name__)


def _config_with_seed(args) -> RunConfig:
    cfg = load_run_config(getattr(args, 'config', None))
    seed = getattr(args, 'seed', None)
    if seed is None:
        return cfg
    return replace(cfg, train=replace(cfg.train, seed=seed), sampler=replace(cfg.sampler, seed=seed),
                   data=replace(cfg.data, seed=seed))


def _mirror_dir(in_root: str, clip_dir: str, clip_id: str, out_root: str) -> str:
    """Single-clip inputs write straight into out_root, multi-clip inputs into out_root/clip_id"""
    if os.path.normpath(clip_dir) == os.path.normpath(in_root):
        return out_root
    return os.path.join(out_root, clip_id)


def cmd_synth(args) -> RunConfig:
    cfg = _config_with_seed(args)
    write_synthetic_dataset(args.out, args.clips, args.frames, args.size, args.size, cfg.data.seed)
    return cfg


def cmd_degrade(args) -> RunConfig:
    cfg = _config_with_seed(args)
    seed = cfg.data.seed
    manifest = []
    for clip_index, (clip_id, clip_dir) in enumerate(list_clips(args.input)):
        frames = read_frames(clip_dir)
        clip_seed = derive_seed(seed, clip_index)
        lq_parts = []
        for seg_index, segment in enumerate(segment_video(frames, cfg.data.segment_length, clip_id)):
            params = draw_degradation_params(clip_seed, cfg.degrade, seg_index)
            lq_parts.append(apply_degradation(segment, params, cfg.degrade).trimmed())
            manifest.append(dict(params.to_dict(), clip=clip_id, frame_offset=segment.frame_offset,
                                 frames=segment.num_frames - segment.pad))
        write_frames(torch.cat(lq_parts), _mirror_dir(args.input, clip_dir, clip_id, args.out))

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, 'manifest.json'), 'w') as fh:
        json.dump({'seed': seed, 'segments': manifest}, fh, indent=2, sort_keys=True)
    logger.info(f"✅ Degraded {len(manifest)} segments into {args.out}")
    return cfg


def cmd_pretrain_codec(args) -> RunConfig:
    cfg = _config_with_seed(args)
    frames = torch.cat([read_frames(clip_dir) for _, clip_dir in list_clips(args.data)])
    codec, history = pretrain_codec(frames, cfg.codec.epochs, cfg.train.seed, cfg.codec)
    save_codec_checkpoint(args.out, codec, cfg.codec, history)
    return cfg


def cmd_train(args) -> RunConfig:
    cfg = _config_with_seed(args)
    train = replace(cfg.train, stage=args.stage)
    if args.steps is not None:
        train = replace(train, steps=args.steps)
    cfg = replace(cfg, train=train)
    run_training(cfg, args.data, args.out, resume_from=args.resume_from, codec_checkpoint=args.codec)
    return cfg


def load_model(path: str):
    """Denoiser, codec and the run config echoed into a stage checkpoint"""
    tensors, meta = load_checkpoint(path, expected_stage=('stage1', 'stage2'))
    saved = config.run_config_from_dict(meta['config'])
    net = build_denoiser(config.DenoiserConfig(**meta['denoiser']), saved.train.seed)
    net.load_state_dict(strip_prefix(tensors, "model."))
    codec = codec_from_state(tensors, config.CodecConfig(**meta['codec_config']))
    return net, codec, saved


def cmd_sr(args) -> RunConfig:
    net, codec, saved = load_model(args.ckpt)
    cfg = saved
    if args.config:
        cfg = replace(saved, sampler=load_run_config(args.config).sampler)
    sampler = replace(cfg.sampler, steps=args.steps,
                      semantic_enabled=cfg.sampler.semantic_enabled and not args.no_seam,
                      tsam_enabled=cfg.sampler.tsam_enabled and not args.no_tsam)
    if args.seed is not None:
        sampler = replace(sampler, seed=args.seed)
    if args.segment_length is not None:
        sampler = replace(sampler, segment_length=args.segment_length)
    cfg = replace(cfg, sampler=sampler)

    encoder = encoder_from_config(cfg.semantic) if net.cfg.semantic_enabled else None
    schedule = make_schedule(**config.get_schedule_parameters(cfg.train))
    for clip_id, clip_dir in list_clips(args.input):
        lq = VideoSegment(read_frames(clip_dir), source_id=clip_id)
        hq = super_resolve(net, codec, encoder, lq, sampler, schedule)
        write_frames(hq.frames, _mirror_dir(args.input, clip_dir, clip_id, args.out))
    logger.info(f"✅ Super-resolved {args.input} into {args.out}")
    return cfg


def cmd_eval(args) -> RunConfig:
    cfg = _config_with_seed(args)
    refs = dict(list_clips(args.ref)) if args.ref else {}
    profile_dir = os.path.join(args.out, 'profiles')
    os.makedirs(profile_dir, exist_ok=True)

    records = []
    for clip_id, clip_dir in list_clips(args.pred):
        pred = VideoSegment(read_frames(clip_dir), source_id=clip_id)
        ref = None
        if args.ref:
            ref_dir = refs.get(clip_id) or (args.ref if len(refs) == 1 else None)
            if ref_dir is None:
                raise ValueError(f"no reference clip named {clip_id} under {args.ref}")
            ref = VideoSegment(read_frames(ref_dir), source_id=clip_id)
        records.append(evaluate_video(clip_id, pred, ref, tag=args.tag))

        profiles = {'pred': temporal_profile(pred, args.profile_row)}
        if ref is not None:
            profiles['ref'] = temporal_profile(ref, args.profile_row)
        for label, profile in profiles.items():
            save_profile_image(profile, os.path.join(profile_dir, f"{clip_id}_{label}.png"))
        save_profile_comparison(profiles, os.path.join(profile_dir, f"{clip_id}_profile.png"), args.profile_row)

    write_records(records, os.path.join(args.out, 'metrics.jsonl'))
    return cfg


def cmd_ablate(args) -> RunConfig:
    cfg = _config_with_seed(args)
    AblationRunner(cfg, args.out).run()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='latent-vsr', description='Latent diffusion video super-resolution')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='write a toy HQ dataset')
    p.add_argument('--out', required=True)
    p.add_argument('--clips', type=int, default=4)
    p.add_argument('--frames', type=int, default=8)
    p.add_argument('--size', type=int, default=32)
    p.add_argument('--seed', type=int)
    p.add_argument('--config')
    p.set_defaults(func=cmd_synth, out_dir=lambda a: a.out)

    p = sub.add_parser('degrade', help='write LQ frames and a degradation manifest')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int)
    p.add_argument('--config')
    p.set_defaults(func=cmd_degrade, out_dir=lambda a: a.out)

    p = sub.add_parser('pretrain-codec', help='train the latent codec')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int)
    p.add_argument('--config')
    p.set_defaults(func=cmd_pretrain_codec, out_dir=lambda a: os.path.dirname(os.path.abspath(a.out)))

    p = sub.add_parser('train', help='run one training stage')
    p.add_argument('--stage', type=int, choices=(1, 2), required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--resume-from')
    p.add_argument('--codec')
    p.add_argument('--steps', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--config')
    p.set_defaults(func=cmd_train, out_dir=lambda a: os.path.dirname(os.path.abspath(a.out)))

    p = sub.add_parser('sr', help='super-resolve LQ frame directories')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--ckpt', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--steps', type=int, default=config.NUM_INFERENCE_STEPS)
    p.add_argument('--seed', type=int)
    p.add_argument('--segment-length', type=int)
    p.add_argument('--no-seam', action='store_true')
    p.add_argument('--no-tsam', action='store_true')
    p.add_argument('--config')
    p.set_defaults(func=cmd_sr, out_dir=lambda a: a.out)

    p = sub.add_parser('eval', help='metric records and temporal profiles')
    p.add_argument('--pred', required=True)
    p.add_argument('--ref')
    p.add_argument('--profile-row', type=int, default=0)
    p.add_argument('--out', required=True)
    p.add_argument('--tag', default='')
    p.add_argument('--config')
    p.set_defaults(func=cmd_eval, out_dir=lambda a: a.out)

    p = sub.add_parser('ablate', help='run the SeAM / TSAM ablation')
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int)
    p.add_argument('--config')
    p.set_defaults(func=cmd_ablate, out_dir=lambda a: a.out)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
    args = build_parser().parse_args(argv)

    started = time.perf_counter()
    try:
        cfg = args.func(args)
        seed = getattr(args, 'seed', None)
        write_run_metadata(args.out_dir(args), args.command, argv, cfg,
                           seed if seed is not None else cfg.train.seed, time.perf_counter() - started)
    except (NumericalError, FreezeViolation, FloatingPointError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return config.EXIT_NUMERICAL
    except ValueError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return config.EXIT_VALIDATION
    return config.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
