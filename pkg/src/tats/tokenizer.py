"""Space-time tokenizer: clips to embedded tokens, positions, pixel targets.

A clip of T x C x H x W pixels is cut into non-overlapping tubelets of
t x h x w pixels (all channels), each linearly embedded to dimension d.
Token order is row-major with time outermost, then height, then width.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .nn import trunc_normal
from .tensor import DiffTensor, ParamStore

CLIP_MAGIC = b"TATSCLIP"
CLIP_VERSION = 1


@dataclass(frozen=True)
class ClipTensor:
    """Raw video clip, pixels in [0, 1], laid out (frames, channels, H, W)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 4:
            raise ValueError(f"clip must be 4-d (T, C, H, W), got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("clip contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("clip pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[2]

    @property
    def width(self) -> int:
        return self.pixels.shape[3]


@dataclass(frozen=True)
class TokenizerConfig:
    """Tubelet kernel (t, C, h, w), stride, and embedding width.

    The stride must equal the kernel's (t, h, w) extents: tubelets tile the
    clip without overlap.
    """

    tubelet_t: int
    channels: int
    tubelet_h: int
    tubelet_w: int
    embed_dim: int
    stride: tuple[int, int, int] = field(default=None)  # defaults to the kernel

    def __post_init__(self):
        stride = self.stride or (self.tubelet_t, self.tubelet_h, self.tubelet_w)
        if tuple(stride) != (self.tubelet_t, self.tubelet_h, self.tubelet_w):
            raise ValueError(
                f"stride {stride} must equal the tubelet kernel "
                f"({self.tubelet_t}, {self.tubelet_h}, {self.tubelet_w})"
            )
        object.__setattr__(self, "stride", tuple(stride))

    @property
    def patch_dim(self) -> int:
        """Pixel count per tubelet: C * t * h * w."""
        return self.channels * self.tubelet_t * self.tubelet_h * self.tubelet_w

    def grid_shape(self, frames: int, height: int, width: int) -> tuple[int, int, int]:
        self.check_divisible(frames, height, width)
        return (frames // self.tubelet_t, height // self.tubelet_h, width // self.tubelet_w)

    def n_tokens(self, frames: int, height: int, width: int) -> int:
        gt, gh, gw = self.grid_shape(frames, height, width)
        return gt * gh * gw

    def check_divisible(self, frames: int, height: int, width: int) -> None:
        for axis, extent, k in (
            ("frame count", frames, self.tubelet_t),
            ("height", height, self.tubelet_h),
            ("width", width, self.tubelet_w),
        ):
            if extent % k != 0:
                raise ValueError(f"{axis} {extent} is not divisible by tubelet extent {k}")


@dataclass
class TokenGrid:
    """N embedded tokens plus their (t, h, w) grid coordinates."""

    tokens: DiffTensor  # (N, d)
    coords: np.ndarray  # (N, 3) int indices, row-major t outer then h then w
    grid: tuple[int, int, int]

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def grid_coords(grid: tuple[int, int, int]) -> np.ndarray:
    """All (t, h, w) indices of a token grid, row-major with t outermost."""
    gt, gh, gw = grid
    ts, hs, ws = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([ts.ravel(), hs.ravel(), ws.ravel()], axis=1)


def unfold_tubelets(clip: ClipTensor, cfg: TokenizerConfig) -> np.ndarray:
    """Flatten each tubelet to a row vector in (C, t, h, w) pixel order."""
    if clip.channels != cfg.channels:
        raise ValueError(f"clip has {clip.channels} channels, config expects {cfg.channels}")
    cfg.check_divisible(clip.frames, clip.height, clip.width)
    t, h, w = cfg.tubelet_t, cfg.tubelet_h, cfg.tubelet_w
    gt, gh, gw = cfg.grid_shape(clip.frames, clip.height, clip.width)
    c = cfg.channels
    x = clip.pixels.reshape(gt, t, c, gh, h, gw, w)
    x = x.transpose(0, 3, 5, 2, 1, 4, 6)  # (gt, gh, gw, C, t, h, w)
    return np.ascontiguousarray(x.reshape(gt * gh * gw, cfg.patch_dim))


def init_tokenizer_params(
    store: ParamStore,
    cfg: TokenizerConfig,
    rng: np.random.Generator,
    prefix: str = "tokenizer",
    std: float = 0.02,
) -> None:
    store.add(f"{prefix}.w", trunc_normal(rng, (cfg.patch_dim, cfg.embed_dim), std))
    store.add(f"{prefix}.b", np.zeros(cfg.embed_dim))


def tokenize(
    clip: ClipTensor, cfg: TokenizerConfig, params: ParamStore, prefix: str = "tokenizer"
) -> TokenGrid:
    """Embed every tubelet with the shared affine projection.

    Positions are not added here; callers combine the result with
    `positional_encoding` so the same scheme can be reused at decoder width.
    """
    patches = unfold_tubelets(clip, cfg)
    grid = cfg.grid_shape(clip.frames, clip.height, clip.width)
    tokens = tt.add(tt.matmul(tt.constant(patches), params[f"{prefix}.w"]), params[f"{prefix}.b"])
    return TokenGrid(tokens=tokens, coords=grid_coords(grid), grid=grid)


def positional_encoding(n_tokens: int, dim: int, coords: np.ndarray) -> np.ndarray:
    """Fixed periodic 3D encoding: equal sinusoidal sub-bands per grid axis.

    `dim` splits into three equal bands for the t, h, w coordinates; each
    band holds interleaved sin/cos at geometrically spaced frequencies.
    Deterministic and input-independent; every value lies in [-1, 1].
    """
    coords = np.asarray(coords)
    if coords.shape != (n_tokens, 3):
        raise ValueError(f"coords must have shape ({n_tokens}, 3), got {coords.shape}")
    if dim % 3 != 0:
        raise ValueError(f"encoding dim {dim} is not divisible into 3 axis sub-bands")
    band = dim // 3
    freq_idx = np.arange(band) // 2
    omega = 1.0 / (10000.0 ** (2.0 * freq_idx / band))
    out = np.empty((n_tokens, dim))
    for axis in range(3):
        angles = coords[:, axis : axis + 1].astype(np.float64) * omega
        block = np.where(np.arange(band) % 2 == 0, np.sin(angles), np.cos(angles))
        out[:, axis * band : (axis + 1) * band] = block
    return out


def patch_normalize_targets(clip: ClipTensor, cfg: TokenizerConfig) -> np.ndarray:
    """Per-tubelet standardized pixel targets (population statistics).

    Each row of the N x (C*t*h*w) result has its tubelet mean subtracted
    and is divided by the tubelet standard deviation plus a stabilizer, so
    constant tubelets map to zeros rather than dividing by zero.
    """
    patches = unfold_tubelets(clip, cfg)
    mu = patches.mean(axis=1, keepdims=True)
    sd = patches.std(axis=1, keepdims=True)  # population std
    centered = patches - mu
    # Exactly constant tubelets carry only mean round-off; make them exact zeros.
    centered[patches.max(axis=1) == patches.min(axis=1)] = 0.0
    return centered / (sd + 1e-6)


# ---------------------------------------------------------------------------
# Clip file format
# ---------------------------------------------------------------------------

def write_clip(path: str | Path, clip: ClipTensor) -> None:
    """Serialize a clip: magic, version, dims (u32 LE), float32 LE pixels."""
    header = CLIP_MAGIC + struct.pack(
        "<5I", CLIP_VERSION, clip.frames, clip.channels, clip.height, clip.width
    )
    body = clip.pixels.astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_clip(path: str | Path) -> ClipTensor:
    raw = Path(path).read_bytes()
    if len(raw) < 28 or raw[:8] != CLIP_MAGIC:
        raise ValueError(f"{path}: not a clip file (bad magic)")
    version, t, c, h, w = struct.unpack("<5I", raw[8:28])
    if version != CLIP_VERSION:
        raise ValueError(f"{path}: unsupported clip version {version}")
    expected = t * c * h * w * 4
    if len(raw) - 28 != expected:
        raise ValueError(f"{path}: expected {expected} pixel bytes, found {len(raw) - 28}")
    pixels = np.frombuffer(raw[28:], dtype="<f4").reshape(t, c, h, w)
    return ClipTensor(pixels.astype(np.float64))
