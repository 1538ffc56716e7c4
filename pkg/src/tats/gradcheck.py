"""Finite-difference verification suites for every differentiable surface.

Each suite builds a toy-sized model with O(1)-scale weights (tiny training
init would drown real gradients in central-difference roundoff), then checks
the analytic gradient of a scalar loss against central differences for every
parameter it touches. Deeper suites use a larger step: their smallest true
gradient coordinates sit near the relative-error floor, where shrinking the
step only amplifies cancellation noise.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as tt
from .mae import MAEConfig, decode, encode, init_mae_params, random_spacetime_mask, reconstruction_loss
from .sampler import SamplerParams, init_sampler_params, masked_logprob, policy_probs, value_estimate
from .tensor import DiffTensor, ParamStore, constant, finite_difference_check
from .tokenizer import ClipTensor, TokenGrid, TokenizerConfig, grid_coords, init_tokenizer_params, tokenize
from .trajectory import SpaceTimeLayout, TAParams, ta_block


def fd_check_param(
    store: ParamStore,
    name: str,
    loss_fn: Callable[[ParamStore], DiffTensor],
    step: float = 1e-5,
) -> float:
    """Finite-difference error for one named parameter of a loss builder."""
    base = store[name].values.copy()

    def f(w):
        probe = ParamStore()
        for pname, p in store.items():
            probe.add(pname, w if pname == name else p.values)
        return loss_fn(probe)

    return finite_difference_check(f, constant(base), step=step)


def _scaled_store(store: ParamStore, rng: np.random.Generator, std: float = 0.5) -> None:
    """Replace trained-scale init with O(1) random weights, keeping shapes."""
    for _, p in store.items():
        p.values[:] = rng.normal(scale=std, size=p.values.shape)


def _toy_sampler(seed: int, grid=(2, 2, 2), dim: int = 6, n_heads: int = 2):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_sampler_params(store, dim=dim, n_tokens=8, n_heads=n_heads, rng=rng)
    _scaled_store(store, rng)
    n = grid[0] * grid[1] * grid[2]
    tokens = rng.normal(size=(n, dim))
    token_grid = TokenGrid(tokens=constant(tokens), coords=grid_coords(grid), grid=grid)
    return store, token_grid, dim, n_heads


def check_ta_block(seed: int = 8, step: float = 1e-5) -> dict[str, float]:
    store, token_grid, dim, n_heads = _toy_sampler(seed)
    layout = SpaceTimeLayout.from_grid(token_grid.grid)

    def loss(probe: ParamStore) -> DiffTensor:
        params = TAParams(probe, "ta", dim, n_heads)
        return tt.mean(tt.square(ta_block(token_grid.tokens, params, layout)))

    names = [f"ta.{w}" for w in ("q", "k", "v", "tq", "tk", "tv", "out")]
    return {name: fd_check_param(store, name, loss, step) for name in names}


def _sampler_view(probe: ParamStore, dim: int, n_heads: int, n_tokens: int) -> SamplerParams:
    return SamplerParams(
        store=probe, ta=TAParams(probe, "ta", dim, n_heads), dim=dim, n_tokens=n_tokens
    )


def check_policy_probs(seed: int = 9, step: float = 5e-4) -> dict[str, float]:
    store, token_grid, dim, n_heads = _toy_sampler(seed)

    def loss(probe: ParamStore) -> DiffTensor:
        params = _sampler_view(probe, dim, n_heads, token_grid.n)
        return tt.sum(tt.square(policy_probs(token_grid, params).probs))

    names = [f"ta.{w}" for w in ("q", "k", "v", "tq", "tk", "tv", "out")]
    names += ["policy.w", "policy.b"]
    return {name: fd_check_param(store, name, loss, step) for name in names}


def check_masked_logprob(seed: int = 10, step: float = 1e-3) -> dict[str, float]:
    store, token_grid, dim, n_heads = _toy_sampler(seed)
    idx = np.array([0, 3, 5, 6])

    def loss(probe: ParamStore) -> DiffTensor:
        params = _sampler_view(probe, dim, n_heads, token_grid.n)
        return masked_logprob(policy_probs(token_grid, params), idx)

    names = ["policy.w", "policy.b", "ta.q", "ta.out"]
    return {name: fd_check_param(store, name, loss, step) for name in names}


def check_value_estimate(seed: int = 11, step: float = 1e-5) -> dict[str, float]:
    store, token_grid, dim, n_heads = _toy_sampler(seed)

    def loss(probe: ParamStore) -> DiffTensor:
        params = _sampler_view(probe, dim, n_heads, token_grid.n)
        return value_estimate(token_grid, params).value

    names = [f"value.fc{i}.{s}" for i in (1, 2, 3) for s in ("w", "b")]
    return {name: fd_check_param(store, name, loss, step) for name in names}


def _toy_mae(seed: int):
    """N=16 toy: 4x2x2 grid, encoder/decoder width 6, tiny tubelets."""
    rng = np.random.default_rng(seed)
    tok_cfg = TokenizerConfig(tubelet_t=1, channels=1, tubelet_h=2, tubelet_w=2, embed_dim=6)
    mae_cfg = MAEConfig(
        encoder_depth=1,
        encoder_dim=6,
        encoder_heads=2,
        decoder_depth=1,
        decoder_dim=6,
        decoder_heads=2,
        patch_dim=tok_cfg.patch_dim,
    )
    store = ParamStore()
    init_tokenizer_params(store, tok_cfg, rng)
    init_mae_params(store, mae_cfg, rng)
    _scaled_store(store, rng, std=0.4)
    clip = ClipTensor(rng.random((4, 1, 4, 4)))
    mask = random_spacetime_mask(16, 0.625, np.random.default_rng(seed + 1))
    dec_pos = rng.normal(size=(16, mae_cfg.decoder_dim))
    targets = rng.normal(size=(16, mae_cfg.patch_dim))
    return store, tok_cfg, mae_cfg, clip, mask, dec_pos, targets


def check_reconstruction_loss(
    seed: int = 12, names: list[str] | None = None, step: float = 5e-4
) -> dict[str, float]:
    store, tok_cfg, mae_cfg, clip, mask, dec_pos, targets = _toy_mae(seed)

    def loss(probe: ParamStore) -> DiffTensor:
        grid = tokenize(clip, tok_cfg, probe)
        visible = tt.gather_rows(grid.tokens, mask.visible)
        encoded = encode(visible, probe, mae_cfg)
        predicted = decode(encoded, mask, probe, mae_cfg, dec_pos)
        return reconstruction_loss(predicted, targets, mask)

    if names is None:
        names = store.names()
    return {name: fd_check_param(store, name, loss, step) for name in names}


def check_ppo_objective(seed: int = 13, step: float = 1e-3) -> dict[str, float]:
    from .trainer import PPOConfig, Episode, ppo_objective

    rng = np.random.default_rng(seed)
    store, token_grid, dim, n_heads = _toy_sampler(seed)
    other = TokenGrid(
        tokens=constant(rng.normal(size=token_grid.tokens.shape)),
        coords=token_grid.coords,
        grid=token_grid.grid,
    )
    episodes = [
        Episode(tokens=token_grid.tokens.values, grid=token_grid.grid,
                masked=np.array([1, 4, 6]), old_logprob=-6.0, reward=0.9, old_value=0.4),
        Episode(tokens=other.tokens.values, grid=other.grid,
                masked=np.array([0, 2, 7]), old_logprob=-5.5, reward=0.2, old_value=0.6),
    ]
    cfg = PPOConfig(clip_eps=0.2, c_policy=1e-4, c_value=1e-4, c_entropy=1e-4)

    def loss(probe: ParamStore) -> DiffTensor:
        params = _sampler_view(probe, dim, n_heads, token_grid.n)
        loss_s, _ = ppo_objective(episodes, params, cfg)
        return loss_s

    names = ["policy.w", "policy.b", "value.fc1.w", "value.fc3.b", "ta.q", "ta.tv", "ta.out"]
    return {name: fd_check_param(store, name, loss, step) for name in names}


SUITES: dict[str, Callable[[], dict[str, float]]] = {
    "ta_block": check_ta_block,
    "policy_probs": check_policy_probs,
    "masked_logprob": check_masked_logprob,
    "value_estimate": check_value_estimate,
    "reconstruction_loss": check_reconstruction_loss,
    "ppo_objective": check_ppo_objective,
}


def run_suites(modules: list[str] | None = None) -> dict[str, dict[str, float]]:
    picked = modules or list(SUITES)
    results = {}
    for module in picked:
        if module not in SUITES:
            raise ValueError(f"unknown gradcheck suite {module!r}; choose from {sorted(SUITES)}")
        results[module] = SUITES[module]()
    return results
