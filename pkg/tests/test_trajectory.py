"""Trajectory attention vs brute-force double-sum oracles."""

import math

import numpy as np
import pytest

from tats import tensor as tt
from tats.tensor import ParamStore, backward, constant, finite_difference_check
from tats.trajectory import (
    SpaceTimeLayout,
    TAParams,
    attention_heatmap,
    init_ta_params,
    ta_block,
    temporal_pool,
    trajectory_tokens,
)


# ---------------------------------------------------------------------------
# Brute-force oracles: literal double sums over the attention definitions
# ---------------------------------------------------------------------------

def oracle_trajectory(q, k, v, S, T, n_heads=1, scaled=True):
    n, d = q.shape
    dh = d // n_heads
    out = np.zeros((n, T, d))
    for ref in range(n):
        for tp in range(T):
            for h in range(n_heads):
                cols = slice(h * dh, (h + 1) * dh)
                logits = np.array([q[ref, cols] @ k[tp * S + sp, cols] for sp in range(S)])
                if scaled:
                    logits = logits / math.sqrt(dh)
                w = np.exp(logits)
                w = w / w.sum()
                for sp in range(S):
                    out[ref, tp, cols] += w[sp] * v[tp * S + sp, cols]
    return out


def oracle_temporal(yt, wq, wk, wv, S, n_heads=1, scaled=True):
    n, T, d = yt.shape
    dh = d // n_heads
    out = np.zeros((n, d))
    for ref in range(n):
        q = yt[ref, ref // S] @ wq
        keys = yt[ref] @ wk
        vals = yt[ref] @ wv
        for h in range(n_heads):
            cols = slice(h * dh, (h + 1) * dh)
            logits = np.array([q[cols] @ keys[tp, cols] for tp in range(T)])
            if scaled:
                logits = logits / math.sqrt(dh)
            w = np.exp(logits)
            w = w / w.sum()
            for tp in range(T):
                out[ref, cols] += w[tp] * vals[tp, cols]
    return out


def make_params(dim, n_heads, seed, scaled=True, std=0.5):
    # O(1)-scale weights keep finite-difference denominators healthy; the
    # 0.02 training init would drown tiny gradients in roundoff.
    store = ParamStore()
    return init_ta_params(store, dim, n_heads, np.random.default_rng(seed), scaled=scaled, std=std)


# ---------------------------------------------------------------------------
# Stage one: trajectory tokens
# ---------------------------------------------------------------------------

def test_single_location_passes_values_through():
    layout = SpaceTimeLayout(spatial=1, frames=3)
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
    out = trajectory_tokens(constant(q), constant(k), constant(v), layout)
    for ref in range(3):
        for tp in range(3):
            np.testing.assert_allclose(out.values[ref, tp], v[tp], atol=1e-15)


def test_orthogonal_queries_give_spatial_mean():
    layout = SpaceTimeLayout(spatial=2, frames=2)
    q = np.zeros((4, 2))
    rng = np.random.default_rng(1)
    k, v = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    out = trajectory_tokens(constant(q), constant(k), constant(v), layout)
    for ref in range(4):
        for tp in range(2):
            np.testing.assert_allclose(
                out.values[ref, tp], v[tp * 2 : tp * 2 + 2].mean(axis=0), atol=1e-14
            )


def test_trajectory_matches_oracle_on_hand_toy():
    layout = SpaceTimeLayout(spatial=2, frames=2)
    q = np.array([[1.0, 0.2], [-0.5, 0.8], [0.3, -1.0], [0.0, 0.5]])
    k = np.array([[0.4, -0.3], [1.1, 0.6], [-0.2, 0.9], [0.7, 0.1]])
    v = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.0], [-2.0, 1.5]])
    got = trajectory_tokens(constant(q), constant(k), constant(v), layout)
    want = oracle_trajectory(q, k, v, S=2, T=2)
    np.testing.assert_allclose(got.values, want, atol=1e-12)


def test_trajectory_multihead_matches_oracle():
    layout = SpaceTimeLayout(spatial=3, frames=2)
    rng = np.random.default_rng(5)
    q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
    got = trajectory_tokens(constant(q), constant(k), constant(v), layout, n_heads=2)
    want = oracle_trajectory(q, k, v, S=3, T=2, n_heads=2)
    np.testing.assert_allclose(got.values, want, atol=1e-12)


def test_trajectory_rejects_layout_mismatch():
    layout = SpaceTimeLayout(spatial=2, frames=3)
    x = constant(np.zeros((4, 2)))
    with pytest.raises(ValueError, match="layout"):
        trajectory_tokens(x, x, x, layout)


# ---------------------------------------------------------------------------
# Stage two: temporal pooling
# ---------------------------------------------------------------------------

def test_single_frame_returns_projected_value():
    layout = SpaceTimeLayout(spatial=4, frames=1)
    params = make_params(dim=4, n_heads=1, seed=2)
    rng = np.random.default_rng(2)
    yt = rng.normal(size=(4, 1, 4))
    out = temporal_pool(constant(yt), params, layout)
    want = yt[:, 0, :] @ params.weight("tv").values
    np.testing.assert_allclose(out.values, want, atol=1e-12)


def test_identical_trajectory_tokens_give_uniform_pool():
    layout = SpaceTimeLayout(spatial=2, frames=3)
    params = make_params(dim=4, n_heads=2, seed=3)
    rng = np.random.default_rng(3)
    base = rng.normal(size=(6, 1, 4))
    yt = np.repeat(base, 3, axis=1)
    out = temporal_pool(constant(yt), params, layout)
    want = base[:, 0, :] @ params.weight("tv").values
    np.testing.assert_allclose(out.values, want, atol=1e-12)


def test_temporal_matches_oracle_on_toy():
    layout = SpaceTimeLayout(spatial=2, frames=2)
    params = make_params(dim=2, n_heads=1, seed=4)
    q = np.array([[1.0, 0.2], [-0.5, 0.8], [0.3, -1.0], [0.0, 0.5]])
    k = np.array([[0.4, -0.3], [1.1, 0.6], [-0.2, 0.9], [0.7, 0.1]])
    v = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.0], [-2.0, 1.5]])
    yt = oracle_trajectory(q, k, v, S=2, T=2)
    got = temporal_pool(constant(yt), params, layout)
    want = oracle_temporal(
        yt, params.weight("tq").values, params.weight("tk").values, params.weight("tv").values, S=2
    )
    np.testing.assert_allclose(got.values, want, atol=1e-12)


# ---------------------------------------------------------------------------
# Full block
# ---------------------------------------------------------------------------

def test_zero_output_projection_is_identity():
    layout = SpaceTimeLayout(spatial=2, frames=2)
    params = make_params(dim=4, n_heads=2, seed=6)
    params.weight("out").values[:] = 0.0
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 4))
    out = ta_block(constant(x), params, layout)
    np.testing.assert_array_equal(out.values, x)


def test_block_matches_composed_oracle():
    layout = SpaceTimeLayout(spatial=2, frames=2)
    params = make_params(dim=4, n_heads=2, seed=11)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 4))
    got = ta_block(constant(x), params, layout)
    q = x @ params.weight("q").values
    k = x @ params.weight("k").values
    v = x @ params.weight("v").values
    yt = oracle_trajectory(q, k, v, S=2, T=2, n_heads=2)
    pooled = oracle_temporal(
        yt,
        params.weight("tq").values,
        params.weight("tk").values,
        params.weight("tv").values,
        S=2,
        n_heads=2,
    )
    want = x + pooled @ params.weight("out").values
    np.testing.assert_allclose(got.values, want, atol=1e-12)


def test_single_frame_block_is_spatial_attention():
    # T=1: the temporal stage is a singleton softmax, so the block reduces
    # to spatial attention followed by the tv/out projections.
    layout = SpaceTimeLayout(spatial=4, frames=1)
    params = make_params(dim=4, n_heads=1, seed=7)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 4))
    got = ta_block(constant(x), params, layout)
    q = x @ params.weight("q").values
    k = x @ params.weight("k").values
    v = x @ params.weight("v").values
    scores = (q @ k.T) / math.sqrt(4)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn = e / e.sum(axis=1, keepdims=True)
    spatial = attn @ v
    want = x + (spatial @ params.weight("tv").values) @ params.weight("out").values
    np.testing.assert_allclose(got.values, want, atol=1e-12)


def test_block_gradients_pass_finite_differences():
    layout = SpaceTimeLayout(spatial=2, frames=2)
    params = make_params(dim=4, n_heads=2, seed=8)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 4))

    for name in ("q", "k", "v", "tq", "tk", "tv", "out"):
        base = params.weight(name).values.copy()

        # Rebuild the block with the probed leaf substituted for one weight.
        def f(w, _name=name):
            store = ParamStore()
            for wname in ("q", "k", "v", "tq", "tk", "tv", "out"):
                store.add(f"ta.{wname}", w if wname == _name else params.weight(wname).values)
            probe = TAParams(store, "ta", params.dim, params.n_heads)
            z = ta_block(constant(x), probe, layout)
            return tt.mean(tt.square(z))

        err = finite_difference_check(f, constant(base), step=1e-5)
        assert err <= 1e-4, f"weight {name}: fd error {err}"


# ---------------------------------------------------------------------------
# Properties
# ---------------------------------------------------------------------------

def test_spatial_permutation_equivariance():
    layout = SpaceTimeLayout(spatial=3, frames=2)
    params = make_params(dim=4, n_heads=2, seed=9)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(6, 4))
    perm_s = rng.permutation(3)
    full_perm = np.concatenate([perm_s + 3 * t for t in range(2)])

    base = ta_block(constant(x), params, layout).values
    permuted = ta_block(constant(x[full_perm]), params, layout).values
    np.testing.assert_allclose(permuted, base[full_perm], atol=1e-12)


def test_attention_rows_sum_to_one():
    layout = SpaceTimeLayout(spatial=3, frames=2)
    rng = np.random.default_rng(10)
    q, k = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    # All-ones values: each pooled output reproduces its attention weights'
    # sum, which must be exactly 1 per (reference, frame, head).
    out = trajectory_tokens(constant(q), constant(k), constant(np.ones((6, 4))), layout)
    np.testing.assert_allclose(out.values, 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# Heatmap
# ---------------------------------------------------------------------------

def test_uniform_attention_gives_equal_saliency():
    layout = SpaceTimeLayout(spatial=4, frames=2)
    params = make_params(dim=6, n_heads=2, seed=12)
    x = np.zeros((8, 6))  # zero queries: uniform spatial attention
    sal = attention_heatmap(constant(x), params, layout)
    np.testing.assert_allclose(sal, 2 / 4, atol=1e-12)
    assert sal.shape == (8,)


def test_heatmap_matches_hand_summed_mass():
    layout = SpaceTimeLayout(spatial=2, frames=2)
    params = make_params(dim=2, n_heads=1, seed=13)
    rng = np.random.default_rng(13)
    x = rng.normal(size=(4, 2))
    sal = attention_heatmap(constant(x), params, layout)

    q = x @ params.weight("q").values
    k = x @ params.weight("k").values
    received = np.zeros(4)
    for ref in range(4):
        for tp in range(2):
            logits = np.array([q[ref] @ k[tp * 2 + sp] for sp in range(2)]) / math.sqrt(2)
            w = np.exp(logits)
            w = w / w.sum()
            for sp in range(2):
                received[tp * 2 + sp] += w[sp]
    np.testing.assert_allclose(sal, received * 2 / 4, atol=1e-12)
    assert (sal >= 0).all() and (sal <= 2).all()


def test_heatmap_length_matches_token_count():
    layout = SpaceTimeLayout(spatial=4, frames=4)
    params = make_params(dim=6, n_heads=3, seed=14)
    x = np.random.default_rng(14).normal(size=(16, 6))
    assert attention_heatmap(constant(x), params, layout).shape == (16,)
