"""Trajectory attention over space-time tokens.

Two stages: per reference token, spatial attention inside every target frame
builds trajectory tokens (one per frame); 1D temporal attention then pools
each trajectory back to a single vector. Packaged as a residual block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .nn import trunc_normal
from .tensor import DiffTensor, ParamStore


@dataclass(frozen=True)
class SpaceTimeLayout:
    """Bijection between token index and (spatial location, frame).

    Token order is frame-major: index = frame * spatial + location, matching
    the tokenizer's row-major (t, h, w) enumeration with S = gh * gw.
    """

    spatial: int
    frames: int

    def __post_init__(self):
        if self.spatial < 1 or self.frames < 1:
            raise ValueError("layout extents must be positive")

    @property
    def n(self) -> int:
        return self.spatial * self.frames

    def frame_of(self, index: int) -> int:
        return index // self.spatial

    def location_of(self, index: int) -> int:
        return index % self.spatial

    @classmethod
    def from_grid(cls, grid: tuple[int, int, int]) -> "SpaceTimeLayout":
        gt, gh, gw = grid
        return cls(spatial=gh * gw, frames=gt)


@dataclass(frozen=True)
class TAParams:
    """Projection weights and head count for one trajectory-attention block.

    Weights live in `store` under `prefix`: q/k/v for the first (spatial)
    stage, tq/tk/tv for the second (temporal) stage, and the output
    projection. All are bias-free d x d matrices. `scaled` toggles the
    1/sqrt(d_head) dot-product scaling.
    """

    store: ParamStore
    prefix: str
    dim: int
    n_heads: int
    scaled: bool = True

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by {self.n_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    def weight(self, name: str) -> DiffTensor:
        return self.store[f"{self.prefix}.{name}"]


def init_ta_params(
    store: ParamStore,
    dim: int,
    n_heads: int,
    rng: np.random.Generator,
    prefix: str = "ta",
    scaled: bool = True,
    std: float = 0.02,
) -> TAParams:
    for name in ("q", "k", "v", "tq", "tk", "tv", "out"):
        store.add(f"{prefix}.{name}", trunc_normal(rng, (dim, dim), std))
    return TAParams(store=store, prefix=prefix, dim=dim, n_heads=n_heads, scaled=scaled)


def _check_layout(kind: str, n: int, layout: SpaceTimeLayout) -> None:
    if n != layout.n:
        raise ValueError(
            f"{kind}: {n} tokens do not fit layout "
            f"(S={layout.spatial}, T={layout.frames}, N={layout.n})"
        )


def _to_heads(x: DiffTensor, n_heads: int) -> DiffTensor:
    n, d = x.shape
    return tt.transpose(tt.reshape(x, (n, n_heads, d // n_heads)), (1, 0, 2))


def trajectory_tokens(
    q: DiffTensor,
    k: DiffTensor,
    v: DiffTensor,
    layout: SpaceTimeLayout,
    n_heads: int = 1,
    scaled: bool = True,
) -> DiffTensor:
    """First stage: spatially pooled trajectory tokens, shape (N, T, d).

    For reference token st and target frame t', attention normalizes over
    the S locations of frame t' and mixes that frame's value vectors.
    """
    n, d = q.shape
    _check_layout("trajectory_tokens", n, layout)
    if k.shape != (n, d) or v.shape != (n, d):
        raise ValueError(f"trajectory_tokens: q/k/v shapes disagree: {q.shape} {k.shape} {v.shape}")
    s_loc, t_frames = layout.spatial, layout.frames
    dh = d // n_heads

    qh = _to_heads(q, n_heads)  # (H, N, dh)
    kh = _to_heads(k, n_heads)
    scores = tt.matmul(qh, tt.transpose(kh, (0, 2, 1)))  # (H, N, N)
    if scaled:
        scores = tt.scale(scores, 1.0 / math.sqrt(dh))
    # Normalize spatially within each target frame.
    attn = tt.softmax(tt.reshape(scores, (n_heads, n, t_frames, s_loc)), axis=3)
    attn = tt.transpose(attn, (0, 2, 1, 3))  # (H, T, N, S)

    # (N, d) -> (H, T, S, dh), frame-major rows.
    vh = tt.transpose(tt.reshape(v, (t_frames, s_loc, n_heads, dh)), (2, 0, 1, 3))
    pooled = tt.matmul(attn, vh)  # (H, T, N, dh)
    return tt.reshape(tt.transpose(pooled, (2, 1, 0, 3)), (n, t_frames, d))


def temporal_pool(ytilde: DiffTensor, params: TAParams, layout: SpaceTimeLayout) -> DiffTensor:
    """Second stage: 1D attention along each trajectory, shape (N, d).

    The query for reference st is its own-frame trajectory token (t' = t),
    re-projected; keys and values are projections of the full trajectory.
    """
    n, t_frames, d = ytilde.shape
    _check_layout("temporal_pool", n, layout)
    if t_frames != layout.frames or d != params.dim:
        raise ValueError(
            f"temporal_pool: trajectory shape {ytilde.shape} does not match "
            f"layout frames {layout.frames} and dim {params.dim}"
        )
    n_heads, dh = params.n_heads, params.head_dim

    flat = tt.reshape(ytilde, (n * t_frames, d))
    # Row n*T + t holds trajectory token (st, t'); the diagonal t' = frame(st)
    # supplies the updated reference queries.
    diag_rows = np.arange(n) * t_frames + (np.arange(n) // layout.spatial)
    q = tt.matmul(tt.gather_rows(flat, diag_rows), params.weight("tq"))  # (N, d)
    k = tt.matmul(flat, params.weight("tk"))
    v = tt.matmul(flat, params.weight("tv"))

    qh = tt.reshape(_to_heads(q, n_heads), (n_heads, n, 1, dh))
    kh = tt.transpose(tt.reshape(k, (n, t_frames, n_heads, dh)), (2, 0, 3, 1))  # (H, N, dh, T)
    vh = tt.transpose(tt.reshape(v, (n, t_frames, n_heads, dh)), (2, 0, 1, 3))  # (H, N, T, dh)

    scores = tt.matmul(qh, kh)  # (H, N, 1, T)
    if params.scaled:
        scores = tt.scale(scores, 1.0 / math.sqrt(dh))
    attn = tt.softmax(scores, axis=3)
    pooled = tt.matmul(attn, vh)  # (H, N, 1, dh)
    return tt.reshape(tt.transpose(pooled, (1, 2, 0, 3)), (n, d))


def ta_block(x: DiffTensor, params: TAParams, layout: SpaceTimeLayout) -> DiffTensor:
    """Full block: project, run both stages, output-project, add residual."""
    _check_layout("ta_block", x.shape[0], layout)
    q = tt.matmul(x, params.weight("q"))
    k = tt.matmul(x, params.weight("k"))
    v = tt.matmul(x, params.weight("v"))
    traj = trajectory_tokens(q, k, v, layout, params.n_heads, params.scaled)
    pooled = temporal_pool(traj, params, layout)
    return tt.add(x, tt.matmul(pooled, params.weight("out")))


def attention_heatmap(x: DiffTensor, params: TAParams, layout: SpaceTimeLayout) -> np.ndarray:
    """Head-averaged spatial attention mass received, one scalar per token.

    Token j's saliency sums, over reference frames, the mean attention that
    frame's reference points pay to j in the first stage; values lie in
    [0, T]. Uniform attention gives T/S everywhere.
    """
    _check_layout("attention_heatmap", x.shape[0], layout)
    n = x.shape[0]
    s_loc, t_frames = layout.spatial, layout.frames
    n_heads, dh = params.n_heads, params.head_dim

    xv = x.values
    qv = xv @ params.weight("q").values
    kv = xv @ params.weight("k").values
    received = np.zeros(n)
    for h in range(n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        scores = qv[:, cols] @ kv[:, cols].T
        if params.scaled:
            scores /= math.sqrt(dh)
        scores = scores.reshape(n, t_frames, s_loc)
        scores -= scores.max(axis=2, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=2, keepdims=True)  # (ref, t', s')
        received += attn.sum(axis=0).reshape(n)
    return received / n_heads * (t_frames / n)
