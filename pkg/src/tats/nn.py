"""Shared layers built on the tensor engine: linear, layer norm, attention."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tt
from .tensor import DiffTensor, ParamStore


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples truncated to +/- 2 sigma (resampled, not clipped)."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_linear(
    store: ParamStore,
    prefix: str,
    d_in: int,
    d_out: int,
    rng: np.random.Generator,
    std: float = 0.02,
    bias: bool = True,
    zero: bool = False,
) -> None:
    w = np.zeros((d_in, d_out)) if zero else trunc_normal(rng, (d_in, d_out), std)
    store.add(f"{prefix}.w", w)
    if bias:
        store.add(f"{prefix}.b", np.zeros(d_out))


def linear(x: DiffTensor, store: ParamStore, prefix: str) -> DiffTensor:
    out = tt.matmul(x, store[f"{prefix}.w"])
    if f"{prefix}.b" in store:
        out = tt.add(out, store[f"{prefix}.b"])
    return out


def init_layer_norm(store: ParamStore, prefix: str, dim: int) -> None:
    store.add(f"{prefix}.g", np.ones(dim))
    store.add(f"{prefix}.b", np.zeros(dim))


def layer_norm(x: DiffTensor, store: ParamStore, prefix: str, eps: float = 1e-6) -> DiffTensor:
    last = x.values.ndim - 1
    mu = tt.mean(x, axis=last, keepdims=True)
    centered = tt.sub(x, mu)
    var = tt.mean(tt.square(centered), axis=last, keepdims=True)
    # 1/sqrt via exp/log keeps the primitive op set minimal.
    inv_std = tt.exp(tt.scale(tt.log(tt.add(var, eps)), -0.5))
    normed = tt.mul(centered, inv_std)
    return tt.add(tt.mul(normed, store[f"{prefix}.g"]), store[f"{prefix}.b"])


def split_heads(x: DiffTensor, n_heads: int) -> DiffTensor:
    """(n, d) -> (heads, n, d/heads)."""
    n, d = x.shape
    return tt.transpose(tt.reshape(x, (n, n_heads, d // n_heads)), (1, 0, 2))


def merge_heads(x: DiffTensor) -> DiffTensor:
    """(heads, n, dh) -> (n, heads*dh)."""
    h, n, dh = x.shape
    return tt.reshape(tt.transpose(x, (1, 0, 2)), (n, h * dh))


def self_attention(x: DiffTensor, store: ParamStore, prefix: str, n_heads: int) -> DiffTensor:
    """Standard scaled dot-product multi-head self-attention."""
    n, d = x.shape
    dh = d // n_heads
    q = split_heads(linear(x, store, f"{prefix}.q"), n_heads)
    k = split_heads(linear(x, store, f"{prefix}.k"), n_heads)
    v = split_heads(linear(x, store, f"{prefix}.v"), n_heads)
    scores = tt.scale(tt.matmul(q, tt.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = tt.softmax(scores, axis=2)
    out = merge_heads(tt.matmul(attn, v))
    return linear(out, store, f"{prefix}.out")


def init_transformer_block(
    store: ParamStore,
    prefix: str,
    dim: int,
    rng: np.random.Generator,
    mlp_ratio: int = 4,
    std: float = 0.02,
) -> None:
    init_layer_norm(store, f"{prefix}.ln1", dim)
    for name in ("q", "k", "v", "out"):
        init_linear(store, f"{prefix}.attn.{name}", dim, dim, rng, std)
    init_layer_norm(store, f"{prefix}.ln2", dim)
    init_linear(store, f"{prefix}.mlp.fc1", dim, mlp_ratio * dim, rng, std)
    init_linear(store, f"{prefix}.mlp.fc2", mlp_ratio * dim, dim, rng, std)


def transformer_block(x: DiffTensor, store: ParamStore, prefix: str, n_heads: int) -> DiffTensor:
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""
    h = layer_norm(x, store, f"{prefix}.ln1")
    x = tt.add(x, self_attention(h, store, f"{prefix}.attn", n_heads))
    h = layer_norm(x, store, f"{prefix}.ln2")
    h = linear(tt.gelu(linear(h, store, f"{prefix}.mlp.fc1")), store, f"{prefix}.mlp.fc2")
    return tt.add(x, h)
