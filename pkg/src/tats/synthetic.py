"""Synthetic moving-sprite clips with per-token motion ground truth.

Sprites are filled squares with constant velocity, reflecting off frame
edges, drawn over a static background (smooth gradient or frozen noise).
A token counts as motion-centric iff a sprite with nonzero speed overlaps
its tubelet in any of the tubelet's frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sampler import MaskSpec
from .tokenizer import ClipTensor, TokenizerConfig

# Per-token boolean array of length N (token order matches the tokenizer grid).
MotionMask = np.ndarray


@dataclass(frozen=True)
class SpriteSceneParams:
    """Scene recipe: sprite count, size/velocity ranges, background, seed."""

    n_sprites: int = 2
    sprite_min: int = 6
    sprite_max: int = 10
    speed_min: float = 1.0
    speed_max: float = 3.0
    background: str = "gradient"  # gradient | noise
    seed: int = 0

    def __post_init__(self):
        if self.sprite_min < 1 or self.sprite_max < self.sprite_min:
            raise ValueError("sprite size range is empty")
        if self.speed_min < 0 or self.speed_max < self.speed_min:
            raise ValueError("speed range is empty")
        if self.background not in ("gradient", "noise"):
            raise ValueError(f"unknown background mode {self.background!r}")


@dataclass(frozen=True)
class _Sprite:
    size: int
    y: float
    x: float
    vy: float
    vx: float
    color: np.ndarray

    @property
    def moving(self) -> bool:
        return math.hypot(self.vy, self.vx) > 0.0


def _reflect(pos: float, vel: float, limit: float) -> tuple[float, float]:
    """Advance one axis with reflection inside [0, limit]."""
    pos += vel
    while pos < 0.0 or pos > limit:
        if pos < 0.0:
            pos, vel = -pos, -vel
        else:
            pos, vel = 2.0 * limit - pos, -vel
    return pos, vel


def _background(rng: np.random.Generator, mode: str, channels: int, h: int, w: int) -> np.ndarray:
    if mode == "noise":
        return rng.random((channels, h, w))
    # Linear ramp with a random per-channel orientation. Patch-normalized
    # windows of a plane are position-independent, so the reconstruction
    # task reduces to reading the orientation off any visible token.
    ys, xs = np.mgrid[0:h, 0:w]
    bg = np.empty((channels, h, w))
    for c in range(channels):
        a, b = rng.uniform(-1.0, 1.0, size=2)
        bg[c] = 0.5 + 0.25 * (a * (ys / h - 0.5) + b * (xs / w - 0.5))
    return bg


def _spawn_sprites(
    rng: np.random.Generator,
    params: SpriteSceneParams,
    channels: int,
    h: int,
    w: int,
    direction: float | None,
) -> list[_Sprite]:
    sprites = []
    for _ in range(params.n_sprites):
        size = int(rng.integers(params.sprite_min, params.sprite_max + 1))
        if size > min(h, w):
            raise ValueError(f"sprite size {size} exceeds frame extent {min(h, w)}")
        y = rng.uniform(0.0, h - size)
        x = rng.uniform(0.0, w - size)
        speed = rng.uniform(params.speed_min, params.speed_max)
        angle = rng.uniform(0.0, 2.0 * math.pi) if direction is None else direction
        color = rng.uniform(0.05, 1.0, size=channels)
        sprites.append(
            _Sprite(size=size, y=y, x=x, vy=speed * math.sin(angle), vx=speed * math.cos(angle), color=color)
        )
    return sprites


def _box(sprite: _Sprite, h: int, w: int) -> tuple[int, int, int, int]:
    r0 = min(max(int(round(sprite.y)), 0), h - sprite.size)
    c0 = min(max(int(round(sprite.x)), 0), w - sprite.size)
    return r0, r0 + sprite.size, c0, c0 + sprite.size


def generate_clip(
    params: SpriteSceneParams,
    cfg: TokenizerConfig,
    frames: int,
    height: int,
    width: int,
    direction: float | None = None,
    return_trace: bool = False,
):
    """Render a clip and mark every token whose tubelet meets a moving sprite.

    Pure function of its arguments: the same seed yields bit-identical
    pixels and mask. `direction` pins every sprite's heading (for labeled
    classification data); the default draws headings uniformly. With
    `return_trace` the per-frame sprite boxes and moving flags are also
    returned, so tests can rasterize the scene independently.
    """
    cfg.check_divisible(frames, height, width)
    rng = np.random.default_rng(params.seed)
    bg = _background(rng, params.background, cfg.channels, height, width)
    sprites = _spawn_sprites(rng, params, cfg.channels, height, width, direction)

    gt, gh, gw = cfg.grid_shape(frames, height, width)
    pixels = np.empty((frames, cfg.channels, height, width))
    motion = np.zeros((gt, gh, gw), dtype=bool)
    trace: list[list[tuple[tuple[int, int, int, int], bool]]] = []

    for f in range(frames):
        frame = bg.copy()
        frame_boxes = []
        for i, sp in enumerate(sprites):
            r0, r1, c0, c1 = _box(sp, height, width)
            frame[:, r0:r1, c0:c1] = sp.color[:, None, None]
            frame_boxes.append(((r0, r1, c0, c1), sp.moving))
            if sp.moving:
                # Interval arithmetic on the token grid; the pixel-level
                # rasterization oracle in the tests recomputes this.
                motion[
                    f // cfg.tubelet_t,
                    r0 // cfg.tubelet_h : (r1 - 1) // cfg.tubelet_h + 1,
                    c0 // cfg.tubelet_w : (c1 - 1) // cfg.tubelet_w + 1,
                ] = True
            y, vy = _reflect(sp.y, sp.vy, height - sp.size)
            x, vx = _reflect(sp.x, sp.vx, width - sp.size)
            sprites[i] = _Sprite(sp.size, y, x, vy, vx, sp.color)
        pixels[f] = frame
        trace.append(frame_boxes)

    clip = ClipTensor(pixels)
    flat = motion.reshape(-1)
    if return_trace:
        return clip, flat, trace
    return clip, flat


def motion_hit_rate(mask: MaskSpec, motion: MotionMask) -> float:
    """Fraction of visible tokens that are motion-centric."""
    if motion.shape[0] != mask.n:
        raise ValueError(f"motion mask length {motion.shape[0]} != token count {mask.n}")
    return float(np.count_nonzero(motion[mask.visible])) / mask.visible.size


def scene_params_from(cfg, seed: int) -> SpriteSceneParams:
    """Scene recipe drawn from a TrainConfig-like object."""
    return SpriteSceneParams(
        n_sprites=cfg.n_sprites,
        sprite_min=cfg.sprite_min,
        sprite_max=cfg.sprite_max,
        speed_min=cfg.speed_min,
        speed_max=cfg.speed_max,
        background=cfg.background,
        seed=seed,
    )


def generate_dataset(
    cfg, n_clips: int | None = None, seed: int | None = None
) -> tuple[list[ClipTensor], list[MotionMask]]:
    """Seeded clip corpus with motion masks, per a TrainConfig-like object."""
    count = cfg.n_clips if n_clips is None else n_clips
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tok_cfg = cfg.tokenizer_config()
    clips, masks = [], []
    for _ in range(count):
        scene = scene_params_from(cfg, seed=int(rng.integers(0, 2**31 - 1)))
        clip, motion = generate_clip(scene, tok_cfg, cfg.frames, cfg.height, cfg.width)
        clips.append(clip)
        masks.append(motion)
    return clips, masks


DIRECTION_ANGLES = {0: 0.0, 1: math.pi / 2, 2: math.pi, 3: 3 * math.pi / 2}
DIRECTION_NAMES = ("right", "down", "left", "up")


def generate_labeled_clips(
    n_clips: int,
    cfg: TokenizerConfig,
    frames: int,
    height: int,
    width: int,
    seed: int,
    params: SpriteSceneParams | None = None,
) -> tuple[list[ClipTensor], np.ndarray]:
    """Single-sprite clips labeled by one of four motion directions."""
    base = params or SpriteSceneParams(n_sprites=1)
    rng = np.random.default_rng(seed)
    clips, labels = [], np.empty(n_clips, dtype=np.intp)
    for i in range(n_clips):
        label = int(rng.integers(0, 4))
        scene = SpriteSceneParams(
            n_sprites=1,
            sprite_min=base.sprite_min,
            sprite_max=base.sprite_max,
            speed_min=max(base.speed_min, 0.5),
            speed_max=base.speed_max,
            background=base.background,
            seed=int(rng.integers(0, 2**31 - 1)),
        )
        clip, _ = generate_clip(
            scene, cfg, frames, height, width, direction=DIRECTION_ANGLES[label]
        )
        clips.append(clip)
        labels[i] = label
    return clips, labels
