"""Quantitative sampler evaluation: learned masking vs the random baseline
on held-out clips with motion ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .config import TrainConfig, parse_config
from .mae import random_spacetime_mask
from .sampler import SamplerParams, policy_entropy, policy_probs, sample_visible
from .synthetic import generate_dataset, motion_hit_rate
from .tensor import ParamStore
from .tokenizer import TokenGrid, positional_encoding, tokenize
from .trainer import TrainState
from .trajectory import TAParams


def sampler_params_from(store: ParamStore, cfg: TrainConfig) -> SamplerParams:
    return SamplerParams(
        store=store,
        ta=TAParams(store, "ta", cfg.embed_dim, cfg.ta_heads),
        dim=cfg.embed_dim,
        n_tokens=cfg.n_tokens,
    )


def config_from_state(state: TrainState) -> TrainConfig:
    return parse_config(state.config_text)


@dataclass
class SamplerEvalResult:
    hit_rate_tats: float
    hit_rate_random: float
    ratio: float
    mean_entropy: float
    n_clips: int


def evaluate_sampler(
    state: TrainState,
    n_clips: int = 64,
    seed: int = 777,
    cfg: TrainConfig | None = None,
) -> SamplerEvalResult:
    """Mean motion hit rate of the learned sampler vs random masking.

    Held-out clips come from the config's scene recipe under a fresh seed;
    both strategies draw one mask per clip at the training mask ratio.
    """
    cfg = cfg or config_from_state(state)
    clips, motion = generate_dataset(cfg, n_clips=n_clips, seed=seed)
    params = sampler_params_from(state.sampler, cfg)
    tok_cfg = cfg.tokenizer_config()

    rng_tats = np.random.default_rng(seed + 1)
    rng_rand = np.random.default_rng(seed + 2)
    hits_tats, hits_rand, entropies = [], [], []
    with tt.no_grad():
        for clip, clip_motion in zip(clips, motion):
            grid = tokenize(clip, tok_cfg, state.mae)
            pos = positional_encoding(grid.n, cfg.embed_dim, grid.coords)
            grid_pos = TokenGrid(
                tokens=tt.add(grid.tokens, tt.constant(pos)), coords=grid.coords, grid=grid.grid
            )
            policy = policy_probs(grid_pos, params)
            entropies.append(policy_entropy(policy).item())
            learned = sample_visible(policy, cfg.mask_ratio, rng_tats)
            baseline = random_spacetime_mask(grid.n, cfg.mask_ratio, rng_rand)
            hits_tats.append(motion_hit_rate(learned, clip_motion))
            hits_rand.append(motion_hit_rate(baseline, clip_motion))

    hit_tats = float(np.mean(hits_tats))
    hit_rand = float(np.mean(hits_rand))
    return SamplerEvalResult(
        hit_rate_tats=hit_tats,
        hit_rate_random=hit_rand,
        ratio=hit_tats / hit_rand if hit_rand > 0 else float("inf"),
        mean_entropy=float(np.mean(entropies)),
        n_clips=n_clips,
    )
