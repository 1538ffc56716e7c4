"""Masked autoencoder: visible-token encoder, full-set decoder with a shared
learnable mask token, pixel projector, and the masked reconstruction loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .nn import init_linear, init_transformer_block, linear, transformer_block, trunc_normal
from .sampler import MaskSpec, visible_count
from .tensor import DiffTensor, ParamStore


@dataclass(frozen=True)
class MAEConfig:
    """Encoder/decoder depths and widths plus the pixel-projector output.

    Paper-scale reference: encoder 12 blocks at 768, decoder 4 at 384,
    projector 1536. Desk scale shrinks to 2 blocks at 48 and 1 at 24 (widths
    must split into three positional sub-bands).
    """

    encoder_depth: int
    encoder_dim: int
    encoder_heads: int
    decoder_depth: int
    decoder_dim: int
    decoder_heads: int
    patch_dim: int

    def __post_init__(self):
        if self.encoder_dim % self.encoder_heads or self.decoder_dim % self.decoder_heads:
            raise ValueError("model dims must be divisible by their head counts")

    @classmethod
    def desk(cls, patch_dim: int = 384) -> "MAEConfig":
        return cls(
            encoder_depth=2,
            encoder_dim=48,
            encoder_heads=2,
            decoder_depth=1,
            decoder_dim=24,
            decoder_heads=2,
            patch_dim=patch_dim,
        )

    @classmethod
    def paper_scale(cls) -> "MAEConfig":
        return cls(
            encoder_depth=12,
            encoder_dim=768,
            encoder_heads=12,
            decoder_depth=4,
            decoder_dim=384,
            decoder_heads=6,
            patch_dim=1536,
        )


def init_mae_params(
    store: ParamStore, cfg: MAEConfig, rng: np.random.Generator, std: float = 0.02
) -> None:
    """Register encoder, decoder, mask token, and projector parameters.

    The tokenizer projection is registered separately (see
    tokenizer.init_tokenizer_params); both belong to the same store.
    """
    for i in range(cfg.encoder_depth):
        init_transformer_block(store, f"enc.{i}", cfg.encoder_dim, rng, std=std)
    init_linear(store, "enc_to_dec", cfg.encoder_dim, cfg.decoder_dim, rng, std)
    store.add("mask_token", trunc_normal(rng, (cfg.decoder_dim,), std))
    for i in range(cfg.decoder_depth):
        init_transformer_block(store, f"dec.{i}", cfg.decoder_dim, rng, std=std)
    init_linear(store, "projector", cfg.decoder_dim, cfg.patch_dim, rng, std)


def encode(x_visible: DiffTensor, store: ParamStore, cfg: MAEConfig) -> DiffTensor:
    """Run the pre-norm transformer encoder over visible tokens only."""
    if x_visible.shape[0] == 0:
        raise ValueError("encode: no visible tokens")
    if x_visible.shape[1] != cfg.encoder_dim:
        raise ValueError(
            f"encode: token dim {x_visible.shape[1]} != encoder dim {cfg.encoder_dim}"
        )
    out = x_visible
    for i in range(cfg.encoder_depth):
        out = transformer_block(out, store, f"enc.{i}", cfg.encoder_heads)
    assert out.shape[0] == x_visible.shape[0]
    return out


def scatter_permutation(mask: MaskSpec) -> np.ndarray:
    """Row sources that restore token order from [visible..., masked...]."""
    n = mask.n
    perm = np.empty(n, dtype=np.intp)
    perm[mask.visible] = np.arange(mask.visible.size)
    perm[mask.masked] = mask.visible.size + np.arange(mask.masked.size)
    return perm


def decode(
    f_visible: DiffTensor,
    mask: MaskSpec,
    store: ParamStore,
    cfg: MAEConfig,
    decoder_positions: np.ndarray,
) -> DiffTensor:
    """Decode the full token set to per-token pixel predictions.

    Visible encodings are projected to decoder width, the shared mask token
    fills the masked slots, positions are re-added in token order, and the
    decoder plus projector produce an N x patch_dim output.
    """
    if f_visible.shape[0] != mask.n_visible:
        raise ValueError(
            f"decode: {f_visible.shape[0]} encoded rows but mask expects {mask.n_visible}"
        )
    n = mask.n
    if decoder_positions.shape != (n, cfg.decoder_dim):
        raise ValueError(
            f"decode: positions shape {decoder_positions.shape} != ({n}, {cfg.decoder_dim})"
        )
    narrowed = linear(f_visible, store, "enc_to_dec")
    if mask.masked.size:
        mask_rows = tt.gather_rows(
            tt.reshape(store["mask_token"], (1, cfg.decoder_dim)),
            np.zeros(mask.masked.size, dtype=np.intp),
        )
        stacked = tt.concat_rows([narrowed, mask_rows])
    else:
        stacked = narrowed
    tokens = tt.gather_rows(stacked, scatter_permutation(mask))
    tokens = tt.add(tokens, tt.constant(decoder_positions))
    assert tokens.shape[0] == n
    for i in range(cfg.decoder_depth):
        tokens = transformer_block(tokens, store, f"dec.{i}", cfg.decoder_heads)
    return linear(tokens, store, "projector")


def reconstruction_loss(
    predicted: DiffTensor,
    targets: np.ndarray,
    mask: MaskSpec,
    per_token_norm: bool = False,
) -> DiffTensor:
    """Masked-token reconstruction error, averaged over masked tokens.

    Default is the mean of squared differences across each token's pixel
    values; `per_token_norm` switches to the strict Euclidean-norm reading
    (root of the per-token squared sum, stabilized at zero).
    """
    if mask.masked.size == 0:
        raise ValueError("reconstruction_loss: no masked tokens")
    if predicted.shape != targets.shape:
        raise ValueError(
            f"reconstruction_loss: predicted {predicted.shape} != targets {targets.shape}"
        )
    diff = tt.sub(tt.gather_rows(predicted, mask.masked), tt.constant(targets[mask.masked]))
    if per_token_norm:
        per_token = tt.sum(tt.square(diff), axis=1)
        root = tt.exp(tt.scale(tt.log(tt.add(per_token, 1e-12)), 0.5))
        return tt.mean(root)
    return tt.mean(tt.square(diff))


def random_spacetime_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Uniform without-replacement visible sample (warmup and baseline)."""
    n_vis = visible_count(n, ratio)
    if n_vis < 1:
        raise ValueError(
            f"mask ratio {ratio} leaves no visible tokens for N={n}; "
            "use a smaller ratio or more tokens"
        )
    perm = rng.permutation(n)
    return MaskSpec(
        ratio=ratio,
        n_visible=n_vis,
        visible=np.sort(perm[:n_vis]),
        masked=np.sort(perm[n_vis:]),
    )
