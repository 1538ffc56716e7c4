"""Trainer: advantage, clipped surrogate, PPO objective, loop invariants,
checkpoint format."""

import math
from dataclasses import replace

import numpy as np
import pytest

from tats import tensor as tt
from tats.config import TrainConfig, format_config
from tats.gradcheck import check_ppo_objective
from tats.sampler import init_sampler_params, masked_logprob, policy_probs
from tats.synthetic import generate_dataset
from tats.tensor import ParamStore, backward, constant
from tats.tokenizer import TokenGrid, grid_coords
from tats.trainer import (
    Episode,
    MemoryBuffer,
    MetricsLog,
    METRICS_HEADER,
    PPOConfig,
    TrainingAborted,
    TrainState,
    clipped_surrogate,
    compute_advantage,
    episode_grid,
    load_checkpoint,
    mae_lr_at,
    ppo_objective,
    save_checkpoint,
    train,
)
from tats.evaluate import sampler_params_from


def make_episode(tokens, masked, old_logprob, reward, old_value, grid=(2, 2, 2)):
    return Episode(
        tokens=np.asarray(tokens, dtype=np.float64),
        grid=grid,
        masked=np.asarray(masked, dtype=np.intp),
        old_logprob=float(old_logprob),
        reward=float(reward),
        old_value=float(old_value),
    )


def toy_sampler(seed=0, dim=6, n_heads=2, n_tokens=8):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    params = init_sampler_params(store, dim=dim, n_tokens=n_tokens, n_heads=n_heads, rng=rng, std=0.3)
    return store, params


# ---------------------------------------------------------------------------
# Advantage and clipped surrogate
# ---------------------------------------------------------------------------

def test_advantage_zero_when_value_matches_reward():
    ep = make_episode(np.zeros((8, 6)), [1], -1.0, reward=0.5, old_value=0.5)
    assert compute_advantage(ep) == 0.0


def test_advantage_subtraction():
    ep = make_episode(np.zeros((8, 6)), [1], -1.0, reward=0.8, old_value=0.5)
    np.testing.assert_allclose(compute_advantage(ep), 0.3)


def test_advantage_is_per_episode():
    eps = [
        make_episode(np.zeros((8, 6)), [1], -1.0, reward=r, old_value=v)
        for r, v in [(0.8, 0.5), (0.2, 0.7)]
    ]
    np.testing.assert_allclose([compute_advantage(e) for e in eps], [0.3, -0.5])


def test_surrogate_identity_at_ratio_one():
    out = clipped_surrogate(constant(1.0), advantage=0.37, clip_eps=0.2)
    assert out.item() == 0.37


def test_surrogate_clips_large_ratio():
    out = clipped_surrogate(constant(2.0), advantage=1.0, clip_eps=0.2)
    np.testing.assert_allclose(out.item(), 1.2)


def test_surrogate_negative_advantage_branch():
    out = clipped_surrogate(constant(0.5), advantage=-1.0, clip_eps=0.2)
    np.testing.assert_allclose(out.item(), -0.8)


# ---------------------------------------------------------------------------
# PPO objective
# ---------------------------------------------------------------------------

def uniform_policy_setup():
    """Sampler rigged so the policy is uniform and the value equals 0.9."""
    store, params = toy_sampler(seed=3)
    store["policy.w"].values[:] = 0.0
    store["policy.b"].values[:] = 0.0
    for name in ("value.fc1.w", "value.fc2.w", "value.fc3.w"):
        store[name].values[:] = 0.0
    store["value.fc3.b"].values[:] = 0.9
    return store, params


def test_objective_reduces_to_entropy_term_at_old_parameters():
    store, params = uniform_policy_setup()
    masked = np.array([1, 3, 4, 6])
    old_logprob = 4 * math.log(1 / 8)  # uniform policy over 8 tokens
    ep = make_episode(
        np.random.default_rng(4).normal(size=(8, 6)), masked, old_logprob, reward=0.9, old_value=0.9
    )
    cfg = PPOConfig()
    j, comps = ppo_objective([ep], params, cfg)
    np.testing.assert_allclose(j.item(), cfg.c_entropy * math.log(8), atol=1e-12)
    np.testing.assert_allclose(comps.ratio_mean, 1.0, atol=1e-12)


def test_plug_in_arithmetic_example():
    # r=1.5, A=0.2, psi-L_R=0.1, H=2.0, all coefficients 1e-4, eps=0.2.
    c = 1e-4
    surrogate = clipped_surrogate(constant(1.5), advantage=0.2, clip_eps=0.2)
    np.testing.assert_allclose(surrogate.item(), 0.24, atol=1e-15)
    j = c * surrogate.item() - c * 0.1**2 + c * 2.0
    np.testing.assert_allclose(j, 2.23e-4, atol=1e-15)


def test_ratio_is_one_and_jclip_is_mean_advantage_at_old_parameters():
    store, params = toy_sampler(seed=5)
    rng = np.random.default_rng(5)
    episodes = []
    for reward, value in [(0.9, 0.4), (0.3, 0.6), (0.7, 0.7)]:
        tokens = rng.normal(size=(8, 6))
        grid = TokenGrid(tokens=constant(tokens), coords=grid_coords((2, 2, 2)), grid=(2, 2, 2))
        masked = np.array([0, 2, 5])
        with tt.no_grad():
            old_lp = masked_logprob(policy_probs(grid, params), masked).item()
        episodes.append(make_episode(tokens, masked, old_lp, reward, value))
    j, comps = ppo_objective(episodes, params, PPOConfig())
    np.testing.assert_allclose(comps.ratios, 1.0, atol=1e-12)
    np.testing.assert_allclose(comps.j_clip, comps.advantages.mean(), atol=1e-12)


def test_policy_term_bounded_by_clip(seed=6):
    # The bound holds for every ratio when A >= 0, and within the trust
    # region (r <= 1+eps) when A < 0 — which is where recorded episodes sit,
    # since each group is first evaluated at its recording parameters.
    store, params = toy_sampler(seed=seed)
    rng = np.random.default_rng(seed)
    cfg = PPOConfig()
    episodes = []
    for _ in range(12):
        tokens = rng.normal(size=(8, 6))
        masked = rng.choice(8, 3, replace=False)
        grid = TokenGrid(tokens=constant(tokens), coords=grid_coords((2, 2, 2)), grid=(2, 2, 2))
        with tt.no_grad():
            true_lp = masked_logprob(policy_probs(grid, params), masked).item()
        drift = float(rng.uniform(-0.15, 0.15))  # ratio within e^+/-0.15 < 1+eps
        episodes.append(
            make_episode(tokens, masked, true_lp + drift,
                         reward=rng.uniform(0, 1.5), old_value=rng.uniform(0, 1.5))
        )
    _, comps = ppo_objective(episodes, params, cfg)
    assert comps.ratios.max() <= 1.0 + cfg.clip_eps
    bound = (1.0 + cfg.clip_eps) * np.abs(comps.advantages)
    assert (np.abs(comps.surrogates) <= bound + 1e-12).all()


def test_gradient_matches_unclipped_estimator_at_old_parameters():
    store, params = toy_sampler(seed=7)
    rng = np.random.default_rng(7)
    tokens = rng.normal(size=(8, 6))
    masked = np.array([1, 4])
    grid = TokenGrid(tokens=constant(tokens), coords=grid_coords((2, 2, 2)), grid=(2, 2, 2))
    with tt.no_grad():
        old_lp = masked_logprob(policy_probs(grid, params), masked).item()
    ep = make_episode(tokens, masked, old_lp, reward=1.1, old_value=0.3)

    def clipped_loss():
        policy = policy_probs(episode_grid(ep), params)
        ratio = tt.exp(tt.sub(masked_logprob(policy, ep.masked), ep.old_logprob))
        return tt.scale(clipped_surrogate(ratio, compute_advantage(ep), 0.2), -1.0)

    def unclipped_loss():
        policy = policy_probs(episode_grid(ep), params)
        ratio = tt.exp(tt.sub(masked_logprob(policy, ep.masked), ep.old_logprob))
        return tt.scale(tt.scale(ratio, compute_advantage(ep)), -1.0)

    store.zero_grad()
    backward(clipped_loss())
    g_clip = store["policy.w"].grad.copy()
    store.zero_grad()
    backward(unclipped_loss())
    g_free = store["policy.w"].grad.copy()
    assert (g_clip == g_free).all()
    assert np.abs(g_clip).max() > 0


def test_nonfinite_ratio_names_episode():
    store, params = toy_sampler(seed=8)
    ep = make_episode(
        np.random.default_rng(8).normal(size=(8, 6)), [1, 2], old_logprob=-5000.0,
        reward=0.5, old_value=0.2,
    )
    with np.errstate(over="ignore"):
        with pytest.raises(FloatingPointError, match="episode 0"):
            ppo_objective([ep], params, PPOConfig())


def test_ppo_gradients_pass_finite_differences():
    results = check_ppo_objective()
    assert max(results.values()) <= 1e-4, results


def test_episode_carries_no_gradient_linkage():
    ep = make_episode(np.zeros((8, 6)), [1], -1.0, reward=0.5, old_value=0.2)
    assert isinstance(ep.reward, float) and isinstance(ep.old_value, float)
    assert isinstance(ep.tokens, np.ndarray)
    assert isinstance(ep.old_logprob, float)


def test_objective_touches_only_sampler_parameters():
    store, params = toy_sampler(seed=9)
    rng = np.random.default_rng(9)
    ep = make_episode(rng.normal(size=(8, 6)), [0, 3], -4.0, 0.8, 0.1)
    j, _ = ppo_objective([ep], params, PPOConfig())
    store.zero_grad()
    backward(tt.scale(j, -1.0))
    assert all(store[name].grad is not None for name in store.names())


# ---------------------------------------------------------------------------
# Memory buffer
# ---------------------------------------------------------------------------

def test_buffer_groups_and_reset():
    buf = MemoryBuffer()
    ep = make_episode(np.zeros((8, 6)), [1], -1.0, 0.5, 0.2)
    buf.record([ep, ep])
    buf.record([ep])
    assert len(buf) == 3
    assert [len(g) for g in buf.groups()] == [2, 1]
    buf.reset()
    assert len(buf) == 0


# ---------------------------------------------------------------------------
# Config invariants
# ---------------------------------------------------------------------------

def test_ppo_config_validation():
    with pytest.raises(ValueError, match="clip"):
        PPOConfig(clip_eps=1.5)
    with pytest.raises(ValueError, match="interval"):
        PPOConfig(update_interval=0)
    with pytest.raises(ValueError, match="warmup"):
        PPOConfig(mae_only_epochs=-1)


def test_lr_schedule_shape():
    cfg = TrainConfig(epochs=100, lr_warmup_epochs=10, base_lr=1e-3)
    assert mae_lr_at(cfg, 0.0) == 0.0
    np.testing.assert_allclose(mae_lr_at(cfg, 5.0), 5e-4)
    np.testing.assert_allclose(mae_lr_at(cfg, 10.0), 1e-3)
    np.testing.assert_allclose(mae_lr_at(cfg, 55.0), 5e-4, atol=1e-12)
    assert mae_lr_at(cfg, 100.0) <= 1e-9


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

SMALL = TrainConfig(epochs=2, n_clips=16, batch_size=8, mae_only_epochs=0, seed=11)


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(SMALL)


def test_warmup_only_run_never_touches_sampler(tmp_path, small_dataset):
    clips, motion = small_dataset
    cfg = replace(SMALL, mae_only_epochs=5)  # epochs < m_o: warmup only
    result = train(cfg, clips, motion, out_dir=tmp_path / "warm")
    lines = (tmp_path / "warm" / "metrics.csv").read_text().splitlines()
    assert lines[0] == METRICS_HEADER
    assert all(row.split(",")[2] == "warmup" for row in lines[1:])

    # Sampler parameters must equal a freshly initialized store bit-for-bit.
    from tats.trainer import build_stores

    seed_root = np.random.SeedSequence(cfg.seed)
    rng = np.random.Generator(np.random.PCG64(seed_root.spawn(4)[0]))
    _, fresh_sampler, _ = build_stores(cfg, rng)
    assert fresh_sampler.checksum() == result.state.sampler.checksum()


def test_fixed_seed_reruns_are_bit_identical(tmp_path, small_dataset):
    clips, motion = small_dataset
    a = train(SMALL, clips, motion, out_dir=tmp_path / "a")
    b = train(SMALL, clips, motion, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()
    assert a.state.mae.checksum() == b.state.mae.checksum()
    assert a.state.sampler.checksum() == b.state.sampler.checksum()


def test_metrics_rows_have_both_phases(tmp_path, small_dataset):
    clips, motion = small_dataset
    result = train(SMALL, clips, motion, out_dir=tmp_path / "phases")
    phases = [row.split(",")[2] for row in result.metrics_path.read_text().splitlines()[1:]]
    assert "mae" in phases and "tats" in phases


def test_nonfinite_loss_aborts(tmp_path, small_dataset):
    clips, motion = small_dataset
    cfg = replace(SMALL, base_lr=float("nan"), mae_only_epochs=5)
    with pytest.raises(TrainingAborted, match="checkpoint"):
        train(cfg, clips, motion, out_dir=tmp_path / "abort")


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_is_byte_identical(tmp_path, small_dataset):
    clips, motion = small_dataset
    result = train(SMALL, clips, motion, out_dir=tmp_path / "ck")
    first = result.checkpoint_path.read_bytes()
    assert first[:8] == b"TATSCKPT"
    state = load_checkpoint(result.checkpoint_path)
    again = tmp_path / "resaved.ckpt"
    save_checkpoint(again, state)
    assert again.read_bytes() == first


def test_checkpoint_preserves_values_and_config(tmp_path, small_dataset):
    clips, motion = small_dataset
    result = train(SMALL, clips, motion, out_dir=tmp_path / "ck2")
    state = load_checkpoint(result.checkpoint_path)
    assert state.config_text == format_config(SMALL)
    assert state.epoch == SMALL.epochs
    for name in result.state.mae.names():
        np.testing.assert_array_equal(state.mae[name].values, result.state.mae[name].values)
    # rng streams restored exactly
    for key in ("data", "mask", "diag"):
        a = state.rngs[key].random(4)
        b = result.state.rngs[key].random(4)
        np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)
