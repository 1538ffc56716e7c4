"""Binary PGM/PPM writers and readers, plus the mask/probability/heatmap
visualization export (frames, per-token sampling probabilities, learned
binary masks, and attention saliency)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .sampler import MaskSpec, PolicyOutput
from .tokenizer import ClipTensor, TokenizerConfig


def quantize(values: np.ndarray) -> np.ndarray:
    """Map floats in [0, 1] to uint8 0..255 (round-half-up via +0.5 floor)."""
    clipped = np.clip(values, 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Binary (P5) grayscale image from floats in [0, 1], shape (H, W)."""
    if gray.ndim != 2:
        raise ValueError(f"PGM image must be 2-d, got shape {gray.shape}")
    data = quantize(gray)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + data.tobytes())


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary (P6) color image from floats in [0, 1], shape (H, W, 3)."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM image must be (H, W, 3), got shape {rgb.shape}")
    data = quantize(rgb)
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + data.tobytes())


def _read_netpbm(path: str | Path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    # Header: magic, whitespace-separated width/height/maxval (comments allowed),
    # one whitespace byte, then binary samples.
    if not raw.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} image")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    count = width * height * channels
    body = raw[pos : pos + count]
    if len(body) != count:
        raise ValueError(f"{path}: expected {count} sample bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((height, width) if channels == 1 else (height, width, channels))


def read_pgm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def _cell_montage(cells: np.ndarray, cell_h: int, cell_w: int) -> np.ndarray:
    """Upscale a (gt, gh, gw) grid per-token and tile time slices side by side."""
    panels = [np.kron(cells[t], np.ones((cell_h, cell_w))) for t in range(cells.shape[0])]
    return np.concatenate(panels, axis=1)


def _frame_montage(clip: ClipTensor, cfg: TokenizerConfig) -> np.ndarray:
    """First frame of every tubelet span, tiled horizontally, as (H, W', 3)."""
    frames = [clip.pixels[t] for t in range(0, clip.frames, cfg.tubelet_t)]
    rgb = np.concatenate(frames, axis=2)  # (C, H, W*panels)
    if rgb.shape[0] == 1:
        rgb = np.repeat(rgb, 3, axis=0)
    return rgb.transpose(1, 2, 0)


def export_visualization(
    clip: ClipTensor,
    cfg: TokenizerConfig,
    policy: PolicyOutput,
    mask: MaskSpec,
    heatmap: np.ndarray | None,
    out_dir: str | Path,
    prefix: str = "clip",
) -> list[Path]:
    """Emit the visualization panels as PGM/PPM files, one time slice per
    panel: raw frames, sampling probabilities, masked frames, and (when
    given) the attention heatmap. Bit-exact for fixed inputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = cfg.grid_shape(clip.frames, clip.height, clip.width)
    n = grid[0] * grid[1] * grid[2]
    if policy.n != n or mask.n != n:
        raise ValueError(f"policy/mask token count does not match grid {grid}")

    written = []

    frames_img = _frame_montage(clip, cfg)
    path = out_dir / f"{prefix}_frames.ppm"
    write_ppm(path, frames_img)
    written.append(path)

    probs = policy.probs.values.reshape(grid)
    peak = probs.max()
    scaled = probs / peak if peak > 0 else probs
    path = out_dir / f"{prefix}_probs.pgm"
    write_pgm(path, _cell_montage(scaled, cfg.tubelet_h, cfg.tubelet_w))
    written.append(path)

    visible_cells = np.zeros(n)
    visible_cells[mask.visible] = 1.0
    keep = _cell_montage(visible_cells.reshape(grid), cfg.tubelet_h, cfg.tubelet_w)
    masked_img = frames_img * keep[:, :, None]
    path = out_dir / f"{prefix}_masked.ppm"
    write_ppm(path, masked_img)
    written.append(path)

    if heatmap is not None:
        cells = heatmap.reshape(grid)
        peak = cells.max()
        cells = cells / peak if peak > 0 else cells
        path = out_dir / f"{prefix}_heatmap.pgm"
        write_pgm(path, _cell_montage(cells, cfg.tubelet_h, cfg.tubelet_w))
        written.append(path)

    return written
