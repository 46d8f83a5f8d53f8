"""Clips, grid-node extraction and sliding-neighborhood tables."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

ABSENT = -1

_IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".ppm")


@dataclass(frozen=True)
class Clip:
    """T frames of shape (H, W, C) with values in [0, 1]."""

    frames: np.ndarray
    frame_rate: float | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 4:
            raise ValueError(f"clip frames must be (T, H, W, C), got {frames.shape}")
        if frames.size and (frames.min() < 0 or frames.max() > 1):
            raise ValueError("frame values must lie in [0, 1]")
        object.__setattr__(self, "frames", frames)

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])


@dataclass(frozen=True)
class NodeGrid:
    grid_shape: tuple[int, int]
    patch_size: int
    origins: np.ndarray  # (N, 2) top-left pixel (row, col) of each patch
    patches: np.ndarray  # (N, P, P, C), copied pixels

    @property
    def num_nodes(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    @property
    def coords(self) -> np.ndarray:
        rows, cols = self.grid_shape
        return np.stack(np.divmod(np.arange(rows * cols), cols), axis=1)

    @property
    def centers(self) -> np.ndarray:
        return self.origins + self.patch_size / 2.0


@dataclass(frozen=True)
class NeighborTable:
    """Slot ``j`` of node ``i`` holds a node index or ``ABSENT``.

    Slots are ordered row-major over the window; ``offsets[j]`` is the
    (drow, dcol) displacement of slot ``j``.
    """

    grid_shape: tuple[int, int]
    window_shape: tuple[int, int]
    index: np.ndarray  # (N, n) int
    offsets: np.ndarray  # (n, 2) int

    @property
    def present(self) -> np.ndarray:
        return self.index != ABSENT

    @property
    def center_slot(self) -> int:
        return self.index.shape[1] // 2


def patch_origins(dim: int, grid_dim: int, patch_size: int) -> np.ndarray:
    """Top-left offsets along one axis: even centers, clamped to fit."""
    k = np.arange(grid_dim)
    centers = np.floor((k + 0.5) * dim / grid_dim + 0.5).astype(np.int64)
    half = patch_size // 2
    centers = np.clip(centers, half, dim - (patch_size - half))
    return centers - half


def sample_node_grid(frame: np.ndarray, grid_shape: tuple[int, int], patch_size: int) -> NodeGrid:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    height, width = frame.shape[:2]
    rows, cols = grid_shape
    if rows < 1 or cols < 1:
        raise ValueError(f"grid_shape must be at least (1, 1), got {grid_shape}")
    if patch_size > min(height, width):
        raise ValueError(f"patch size {patch_size} larger than frame {height}x{width}")
    oy = patch_origins(height, rows, patch_size)
    ox = patch_origins(width, cols, patch_size)
    origins = np.stack(np.meshgrid(oy, ox, indexing="ij"), axis=-1).reshape(-1, 2)
    patches = np.stack([frame[y : y + patch_size, x : x + patch_size] for y, x in origins])
    return NodeGrid(tuple(grid_shape), patch_size, origins, patches.copy())


def clip_patches(clip: Clip, grid_shape: tuple[int, int], patch_size: int) -> np.ndarray:
    """All node patches of a clip stacked as (T, N, P, P, C)."""
    return np.stack([sample_node_grid(f, grid_shape, patch_size).patches for f in clip.frames])


def neighborhood_indices(grid_shape: tuple[int, int], window_shape: tuple[int, int]) -> NeighborTable:
    wr, wc = window_shape
    if wr < 1 or wc < 1 or wr % 2 == 0 or wc % 2 == 0:
        raise ValueError(f"window dims must be odd and >= 1, got {window_shape}")
    rows, cols = grid_shape
    dr, dc = np.meshgrid(np.arange(wr) - wr // 2, np.arange(wc) - wc // 2, indexing="ij")
    offsets = np.stack([dr.ravel(), dc.ravel()], axis=1)
    r, c = np.divmod(np.arange(rows * cols), cols)
    nr = r[:, None] + offsets[None, :, 0]
    nc = c[:, None] + offsets[None, :, 1]
    inside = (nr >= 0) & (nr < rows) & (nc >= 0) & (nc < cols)
    index = np.where(inside, nr * cols + nc, ABSENT)
    return NeighborTable(tuple(grid_shape), tuple(window_shape), index, offsets)


def load_clip_dir(path: str | Path) -> Clip:
    """Read a directory of 8-bit RGB frames ordered by filename."""
    from PIL import Image

    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no frames found in {path}")
    frames = [np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 255.0 for f in files]
    return Clip(np.stack(frames))


def save_clip_dir(clip: Clip, path: str | Path) -> list[Path]:
    from PIL import Image

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(clip.length - 1)))
    out = []
    for t, frame in enumerate(clip.frames):
        rgb = frame if frame.shape[-1] == 3 else np.repeat(frame[..., :1], 3, axis=-1)
        img = Image.fromarray(np.round(rgb * 255).astype(np.uint8), mode="RGB")
        name = path / f"frame_{t:0{width}d}.png"
        img.save(name)
        out.append(name)
    return out
