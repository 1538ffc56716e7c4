"""Command-line entry points: pretrain, eval-sampler, gradcheck, visualize,
gen-data."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as tt
from .config import ConfigError, TrainConfig, load_config
from .evaluate import config_from_state, evaluate_sampler, sampler_params_from
from .gradcheck import SUITES, run_suites
from .images import export_visualization
from .sampler import policy_probs, sample_visible
from .synthetic import generate_dataset, generate_clip, scene_params_from
from .tokenizer import TokenGrid, positional_encoding, read_clip, tokenize, write_clip
from .trainer import TrainingAborted, load_checkpoint, train
from .trajectory import SpaceTimeLayout, attention_heatmap

# Spec-facing module names accepted by `gradcheck --module`.
MODULE_SUITES = {
    "trajectory_attention": ["ta_block"],
    "tats_sampler": ["policy_probs", "masked_logprob", "value_estimate"],
    "masked_autoencoder": ["reconstruction_loss"],
    "ppo_trainer": ["ppo_objective"],
}


def _load_cfg(path: str | None, seed: int | None) -> TrainConfig:
    cfg = load_config(path) if path else TrainConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips, _ = generate_dataset(cfg, n_clips=args.clips)
    for i, clip in enumerate(clips):
        write_clip(out / f"clip_{i:05d}.tatsclip", clip)
    print(f"wrote {len(clips)} clips to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args.config, args.seed)
    clips, motion = generate_dataset(cfg)
    try:
        result = train(cfg, clips, motion, out_dir=args.out)
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 1
    first, last = result.epoch_recon[0], result.epoch_recon[-1]
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    print(f"recon_first_epoch={first!r} recon_last_epoch={last!r}")
    return 0


def cmd_eval_sampler(args) -> int:
    state = load_checkpoint(args.ckpt)
    result = evaluate_sampler(state, n_clips=args.clips, seed=args.seed)
    print(f"hit_rate_tats={result.hit_rate_tats!r}")
    print(f"hit_rate_random={result.hit_rate_random!r}")
    print(f"ratio={result.ratio!r}")
    print(f"mean_entropy={result.mean_entropy!r}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.module is None:
        suites = None
    elif args.module in MODULE_SUITES:
        suites = MODULE_SUITES[args.module]
    elif args.module in SUITES:
        suites = [args.module]
    else:
        known = sorted(set(MODULE_SUITES) | set(SUITES))
        print(f"unknown module {args.module!r}; choose from {known}", file=sys.stderr)
        return 2
    results = run_suites(suites)
    ok = True
    for suite, errs in results.items():
        worst = max(errs.values())
        ok = ok and worst <= 1e-4
        print(f"{suite}: max_relative_error={worst:.3e}")
    return 0 if ok else 1


def cmd_visualize(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = config_from_state(state)
    tok_cfg = cfg.tokenizer_config()
    if args.clip:
        clip = read_clip(args.clip)
    else:
        scene = scene_params_from(cfg, seed=args.seed)
        clip, _ = generate_clip(scene, tok_cfg, cfg.frames, cfg.height, cfg.width)
    params = sampler_params_from(state.sampler, cfg)
    with tt.no_grad():
        grid = tokenize(clip, tok_cfg, state.mae)
        pos = positional_encoding(grid.n, cfg.embed_dim, grid.coords)
        grid_pos = TokenGrid(
            tokens=tt.add(grid.tokens, tt.constant(pos)), coords=grid.coords, grid=grid.grid
        )
        policy = policy_probs(grid_pos, params)
        mask = sample_visible(policy, cfg.mask_ratio, np.random.default_rng(args.seed))
        saliency = attention_heatmap(grid_pos.tokens, params.ta, SpaceTimeLayout.from_grid(grid.grid))
    written = export_visualization(clip, tok_cfg, policy, mask, saliency, args.out, prefix=args.prefix)
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tats",
        description="Trajectory-aware adaptive token sampling for masked video modeling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic clips as TATSCLIP files")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=64)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run the full alternating training recipe")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("eval-sampler", help="motion hit rate vs the random baseline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clips", type=int, default=64)
    p.add_argument("--seed", type=int, default=777)
    p.set_defaults(fn=cmd_eval_sampler)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--module", default=None)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("visualize", help="emit probability/mask/heatmap images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip", default=None, help="TATSCLIP file (default: synthesize)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="clip")
    p.set_defaults(fn=cmd_visualize)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
