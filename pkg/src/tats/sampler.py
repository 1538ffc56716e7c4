"""Actor/value token sampler: selection probabilities over tokens, a scalar
reward estimate, and categorical sampling of visible indices without
replacement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .nn import init_linear, linear
from .tensor import DiffTensor, ParamStore
from .tokenizer import TokenGrid
from .trajectory import SpaceTimeLayout, TAParams, init_ta_params, ta_block


@dataclass
class PolicyOutput:
    """Per-token selection distribution: probs sum to 1, strictly positive."""

    probs: DiffTensor  # (N,)
    log_probs: DiffTensor  # (N,)

    @property
    def n(self) -> int:
        return self.probs.shape[0]


@dataclass
class ValueOutput:
    """Scalar expected-reward estimate for one batch element."""

    value: DiffTensor  # shape ()


@dataclass(frozen=True)
class MaskSpec:
    """Disjoint visible/masked index partition for one clip."""

    ratio: float
    n_visible: int
    visible: np.ndarray
    masked: np.ndarray

    def __post_init__(self):
        vis = np.asarray(self.visible, dtype=np.intp)
        msk = np.asarray(self.masked, dtype=np.intp)
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "masked", msk)
        n = vis.size + msk.size
        combined = np.concatenate([vis, msk])
        if n == 0:
            raise ValueError("mask partition is empty")
        if np.unique(combined).size != n or combined.min() < 0 or combined.max() >= n:
            raise ValueError("visible/masked must partition 0..N-1 without repeats")
        if vis.size != self.n_visible:
            raise ValueError(f"expected {self.n_visible} visible indices, got {vis.size}")

    @property
    def n(self) -> int:
        return self.visible.size + self.masked.size


def visible_count(n: int, ratio: float) -> int:
    """floor(N * (1 - ratio)), with a nudge so exact products do not
    round down through float error."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    return int(np.floor(n * (1.0 - ratio) + 1e-9))


@dataclass(frozen=True)
class SamplerParams:
    """Parameter view for the sampler: trajectory-attention block, policy
    head, and the value network (hidden widths N and N/2)."""

    store: ParamStore
    ta: TAParams
    dim: int
    n_tokens: int


def value_hidden_widths(n_tokens: int) -> tuple[int, int]:
    return n_tokens, n_tokens // 2


def init_sampler_params(
    store: ParamStore,
    dim: int,
    n_tokens: int,
    n_heads: int,
    rng: np.random.Generator,
    std: float = 0.02,
) -> SamplerParams:
    ta = init_ta_params(store, dim, n_heads, rng, prefix="ta", std=std)
    init_linear(store, "policy", dim, 1, rng, std=std)
    h1, h2 = value_hidden_widths(n_tokens)
    init_linear(store, "value.fc1", dim, h1, rng, std=std)
    init_linear(store, "value.fc2", h1, h2, rng, std=std)
    init_linear(store, "value.fc3", h2, 1, rng, std=std)
    return SamplerParams(store=store, ta=ta, dim=dim, n_tokens=n_tokens)


def policy_probs(grid: TokenGrid, params: SamplerParams) -> PolicyOutput:
    """Selection distribution: softmax over tokens of a linear head on the
    trajectory-attention output (temperature 1)."""
    layout = SpaceTimeLayout.from_grid(grid.grid)
    z = ta_block(grid.tokens, params.ta, layout)
    logits = tt.reshape(linear(z, params.store, "policy"), (grid.n,))
    probs = tt.softmax(logits, axis=0)
    return PolicyOutput(probs=probs, log_probs=tt.log(probs))


def value_estimate(grid: TokenGrid, params: SamplerParams) -> ValueOutput:
    """Expected reward from the mean token representation."""
    mu = tt.reshape(tt.mean(grid.tokens, axis=0), (1, params.dim))
    h = linear(mu, params.store, "value.fc1")
    h = tt.relu(linear(h, params.store, "value.fc2"))
    out = linear(h, params.store, "value.fc3")
    return ValueOutput(value=tt.reshape(out, ()))


def sample_visible(policy: PolicyOutput, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Visible indices drawn without replacement from the policy.

    Uses perturbed-key top-k, which matches sequential categorical draws
    with renormalization in distribution while staying O(N log N) and
    deterministic under the supplied generator.
    """
    n = policy.n
    n_vis = visible_count(n, ratio)
    if n_vis < 1:
        raise ValueError(
            f"mask ratio {ratio} leaves no visible tokens for N={n}; "
            "use a smaller ratio or more tokens"
        )
    keys = policy.log_probs.values + rng.gumbel(size=n)
    order = np.argsort(-keys, kind="stable")
    visible = np.sort(order[:n_vis])
    masked = np.sort(order[n_vis:])
    return MaskSpec(ratio=ratio, n_visible=n_vis, visible=visible, masked=masked)


def masked_logprob(policy: PolicyOutput, indices: np.ndarray) -> DiffTensor:
    """Sum of per-token log-probabilities over an index set.

    This is the single-categorical log-probability convention (no
    renormalization across sequential draws); differentiable through the
    policy.
    """
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("masked_logprob: index set is empty")
    return tt.sum(tt.gather_rows(policy.log_probs, idx))


def policy_entropy(policy: PolicyOutput) -> DiffTensor:
    """Shannon entropy of the selection distribution (natural log)."""
    return tt.scale(tt.sum(tt.mul(policy.probs, policy.log_probs)), -1.0)
