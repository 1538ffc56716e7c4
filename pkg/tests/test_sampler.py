"""Sampler: policy distribution, value net, without-replacement sampling."""

import math

import numpy as np
import pytest

from tats import tensor as tt
from tats.tensor import ParamStore, constant, finite_difference_check
from tats.tokenizer import TokenGrid, grid_coords
from tats.sampler import (
    MaskSpec,
    PolicyOutput,
    SamplerParams,
    init_sampler_params,
    masked_logprob,
    policy_entropy,
    policy_probs,
    sample_visible,
    value_estimate,
    value_hidden_widths,
    visible_count,
)
from tats.trajectory import SpaceTimeLayout, TAParams


def make_grid(rng, grid=(4, 2, 2), dim=6):
    n = grid[0] * grid[1] * grid[2]
    return TokenGrid(tokens=constant(rng.normal(size=(n, dim))), coords=grid_coords(grid), grid=grid)


def make_policy(probs) -> PolicyOutput:
    p = np.asarray(probs, dtype=np.float64)
    return PolicyOutput(probs=constant(p), log_probs=constant(np.log(p)))


@pytest.fixture
def rng():
    return np.random.default_rng(5)


# ---------------------------------------------------------------------------
# Policy branch
# ---------------------------------------------------------------------------

def test_zero_head_gives_uniform_policy(rng):
    store = ParamStore()
    params = init_sampler_params(store, dim=6, n_tokens=16, n_heads=2, rng=rng)
    store["policy.w"].values[:] = 0.0
    store["policy.b"].values[:] = 0.0
    grid = make_grid(rng)
    out = policy_probs(grid, params)
    np.testing.assert_allclose(out.probs.values, 1.0 / 16, atol=1e-15)


def test_policy_sums_to_one_n64(rng):
    store = ParamStore()
    params = init_sampler_params(store, dim=6, n_tokens=64, n_heads=2, rng=rng, std=0.5)
    grid = make_grid(rng, grid=(4, 4, 4))
    out = policy_probs(grid, params)
    assert out.n == 64
    assert abs(out.probs.values.sum() - 1.0) <= 1e-10
    assert (out.probs.values > 0).all()
    np.testing.assert_allclose(out.log_probs.values, np.log(out.probs.values))


def test_policy_permutation_equivariance(rng):
    store = ParamStore()
    params = init_sampler_params(store, dim=6, n_tokens=8, n_heads=2, rng=rng, std=0.5)
    grid = make_grid(rng, grid=(2, 2, 2))
    base = policy_probs(grid, params).probs.values

    perm_s = np.random.default_rng(1).permutation(4)
    full = np.concatenate([perm_s + 4 * t for t in range(2)])
    permuted_grid = TokenGrid(
        tokens=constant(grid.tokens.values[full]), coords=grid.coords, grid=grid.grid
    )
    permuted = policy_probs(permuted_grid, params).probs.values
    np.testing.assert_allclose(permuted, base[full], atol=1e-12)


# ---------------------------------------------------------------------------
# Value branch
# ---------------------------------------------------------------------------

def test_value_widths_follow_halving_rule():
    assert value_hidden_widths(1568) == (1568, 784)
    assert value_hidden_widths(64) == (64, 32)


def test_value_network_shapes(rng):
    store = ParamStore()
    init_sampler_params(store, dim=6, n_tokens=64, n_heads=2, rng=rng)
    assert store["value.fc1.w"].shape == (6, 64)
    assert store["value.fc2.w"].shape == (64, 32)
    assert store["value.fc3.w"].shape == (32, 1)


def test_zero_value_weights_return_bias(rng):
    store = ParamStore()
    params = init_sampler_params(store, dim=6, n_tokens=16, n_heads=2, rng=rng)
    for name in ("value.fc1.w", "value.fc2.w", "value.fc3.w"):
        store[name].values[:] = 0.0
    store["value.fc3.b"].values[:] = 0.7
    out = value_estimate(make_grid(rng), params)
    assert out.value.shape == ()
    np.testing.assert_allclose(out.value.item(), 0.7)


def test_value_is_finite(rng):
    store = ParamStore()
    params = init_sampler_params(store, dim=6, n_tokens=16, n_heads=2, rng=rng, std=0.5)
    assert np.isfinite(value_estimate(make_grid(rng), params).value.item())


# ---------------------------------------------------------------------------
# Sampling without replacement
# ---------------------------------------------------------------------------

def test_visible_count_flooring():
    assert visible_count(64, 0.95) == 3
    assert visible_count(64, 0.9) == 6
    assert visible_count(10, 0.8) == 2  # exact product must not round down
    with pytest.raises(ValueError, match="ratio"):
        visible_count(10, 1.0)


def test_vanishing_ratio_keeps_everything_visible(rng):
    policy = make_policy(np.full(8, 1 / 8))
    spec = sample_visible(policy, ratio=1e-18, rng=rng)
    assert spec.n_visible == 8
    np.testing.assert_array_equal(spec.visible, np.arange(8))
    assert spec.masked.size == 0


def test_zero_visible_tokens_is_an_error(rng):
    policy = make_policy(np.full(4, 0.25))
    with pytest.raises(ValueError, match="smaller ratio or more tokens"):
        sample_visible(policy, ratio=0.99, rng=rng)


def test_partition_invariants_every_draw(rng):
    policy = make_policy(np.linspace(1, 6, 6) / np.linspace(1, 6, 6).sum())
    for _ in range(500):
        spec = sample_visible(policy, ratio=2 / 3, rng=rng)
        assert spec.n_visible == 2
        assert spec.visible.size == 2 and spec.masked.size == 4
        assert set(spec.visible) | set(spec.masked) == set(range(6))
        assert not set(spec.visible) & set(spec.masked)


def exact_inclusion_probabilities(weights, k):
    """Sequential renormalized draws without replacement, enumerated exactly."""
    n = len(weights)
    probs = np.zeros(n)

    def recurse(remaining, chosen, mass):
        if len(chosen) == k:
            for i in chosen:
                probs[i] += mass
            return
        total = sum(weights[i] for i in remaining)
        for i in list(remaining):
            recurse(remaining - {i}, chosen + [i], mass * weights[i] / total)

    recurse(frozenset(range(n)), [], 1.0)
    return probs


def test_marginal_inclusion_matches_enumeration_oracle():
    weights = np.arange(1, 7, dtype=np.float64)
    policy = make_policy(weights / weights.sum())
    exact = exact_inclusion_probabilities(weights, k=2)

    rng = np.random.default_rng(2024)
    counts = np.zeros(6)
    draws = 100_000
    for _ in range(draws):
        spec = sample_visible(policy, ratio=2 / 3, rng=rng)
        counts[spec.visible] += 1
    empirical = counts / draws
    np.testing.assert_allclose(empirical, exact, atol=0.01)


def test_sampling_deterministic_under_seed():
    policy = make_policy(np.full(16, 1 / 16))
    a = sample_visible(policy, 0.75, np.random.default_rng(9))
    b = sample_visible(policy, 0.75, np.random.default_rng(9))
    np.testing.assert_array_equal(a.visible, b.visible)


def test_mask_spec_rejects_overlap():
    with pytest.raises(ValueError, match="partition"):
        MaskSpec(ratio=0.5, n_visible=2, visible=[0, 1], masked=[1, 2])


# ---------------------------------------------------------------------------
# Log-probability of an index set
# ---------------------------------------------------------------------------

def test_uniform_masked_logprob():
    policy = make_policy(np.full(8, 1 / 8))
    got = masked_logprob(policy, np.arange(3)).item()
    np.testing.assert_allclose(got, 3 * math.log(1 / 8), atol=1e-12)


def test_singleton_masked_logprob():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    policy = make_policy(p)
    np.testing.assert_allclose(masked_logprob(policy, [2]).item(), math.log(0.3), atol=1e-12)


def test_empty_index_set_is_an_error():
    policy = make_policy(np.full(4, 0.25))
    with pytest.raises(ValueError, match="empty"):
        masked_logprob(policy, np.array([], dtype=int))


def test_masked_logprob_gradient_wrt_policy_head(rng):
    store = ParamStore()
    params = init_sampler_params(store, dim=6, n_tokens=8, n_heads=2, rng=rng, std=0.5)
    grid = make_grid(rng, grid=(2, 2, 2))
    idx = np.array([0, 3, 5])
    base = store["policy.w"].values.copy()

    def f(w):
        probe_store = ParamStore()
        for name, p in store.items():
            probe_store.add(name, w if name == "policy.w" else p.values)
        probe = SamplerParams(
            store=probe_store,
            ta=TAParams(probe_store, "ta", 6, 2),
            dim=6,
            n_tokens=8,
        )
        return masked_logprob(policy_probs(grid, probe), idx)

    err = finite_difference_check(f, constant(base), step=1e-5)
    assert err <= 1e-4


# ---------------------------------------------------------------------------
# Entropy
# ---------------------------------------------------------------------------

def test_uniform_entropy_is_log_n():
    policy = make_policy(np.full(16, 1 / 16))
    np.testing.assert_allclose(policy_entropy(policy).item(), math.log(16), atol=1e-12)


def test_near_one_hot_entropy_approaches_zero():
    p = np.full(8, 1e-12)
    p[3] = 1.0 - 7e-12
    policy = make_policy(p)
    assert policy_entropy(policy).item() < 1e-9


def test_closed_form_entropy():
    policy = make_policy([0.5, 0.25, 0.25])
    np.testing.assert_allclose(policy_entropy(policy).item(), 1.5 * math.log(2), atol=1e-12)


def test_entropy_maximized_at_uniform(rng):
    store = ParamStore()
    params = init_sampler_params(store, dim=6, n_tokens=16, n_heads=2, rng=rng, std=0.5)
    grid = make_grid(rng)
    h = policy_entropy(policy_probs(grid, params)).item()
    assert h <= math.log(16) + 1e-12

    store["policy.w"].values[:] = 0.0
    store["policy.b"].values[:] = 0.0
    h_uniform = policy_entropy(policy_probs(grid, params)).item()
    np.testing.assert_allclose(h_uniform, math.log(16), atol=1e-12)
