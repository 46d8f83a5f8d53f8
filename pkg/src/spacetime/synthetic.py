"""Sprite videos with exact node-level ground truth, and their on-disk format.

Sprites are noise-textured blocks whose size and motion are whole grid
cells, drawn over a dim, nearly flat background. Frames are quantized to
8-bit levels at generation time so a saved dataset reloads bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .video_graph import Clip, load_clip_dir, save_clip_dir

NONE = -1
SIDECAR = "meta.json"
FORMAT_VERSION = 1


@dataclass
class SceneConfig:
    grid_shape: tuple[int, int] = (7, 7)
    cell_size: int = 8
    channels: int = 3
    num_frames: int = 7
    num_sprites: int = 2
    sprite_min_cells: int = 2
    sprite_max_cells: int = 3
    max_speed: int = 1
    background_level: float = 0.25
    background_noise: float = 0.02
    confusable: bool = False
    frame_noise: float = 0.0
    brightness_jitter: float = 0.0

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.grid_shape[0] * self.cell_size, self.grid_shape[1] * self.cell_size, self.channels)


@dataclass
class Sprite:
    """A textured block; ``start`` and ``velocity`` are in grid cells (row, col)."""

    texture: np.ndarray
    start: tuple[int, int]
    velocity: tuple[int, int]
    depth: int = 0

    def cells(self, cell_size: int) -> tuple[int, int]:
        return self.texture.shape[0] // cell_size, self.texture.shape[1] // cell_size

    def position(self, t: int) -> tuple[int, int]:
        return self.start[0] + t * self.velocity[0], self.start[1] + t * self.velocity[1]


@dataclass
class SpriteScene:
    config: SceneConfig
    background: np.ndarray
    sprites: list[Sprite]
    seed: int = 0


@dataclass
class SceneTruth:
    """Ground truth for one rendered scene.

    ``correspondence[t, i]`` is the frame-(t+1) node holding node i's content,
    or ``NONE``; ``owners[t, i]`` is the visible sprite index or ``NONE`` for
    background; ``keypoints[t, s]`` is sprite s's center in pixels.
    """

    correspondence: np.ndarray
    owners: np.ndarray
    keypoints: np.ndarray
    trajectories: np.ndarray  # (S, F, 2) pixel offsets of each sprite's top-left

    def label_field(self, t: int = 0) -> np.ndarray:
        """One-hot labels for frame t: channel 0 background, channel s+1 sprite s."""
        n_sprites = self.keypoints.shape[1]
        out = np.zeros((self.owners.shape[1], n_sprites + 1))
        out[np.arange(self.owners.shape[1]), self.owners[t] + 1] = 1.0
        return out


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def random_scene(config: SceneConfig, seed: int) -> SpriteScene:
    """Sample sprite sizes, velocities and start cells that stay on canvas."""
    rng = np.random.default_rng(seed)
    rows, cols = config.grid_shape
    cs, span = config.cell_size, config.num_frames - 1
    h, w, c = config.frame_shape
    noise = rng.uniform(-1.0, 1.0, size=(h, w, c)) * config.background_noise
    background = _quantize(config.background_level + noise)
    shared = None
    sprites = []
    for depth in range(config.num_sprites):
        sh, sw = rng.integers(config.sprite_min_cells, config.sprite_max_cells + 1, size=2)
        sh, sw = min(sh, rows), min(sw, cols)
        if config.confusable and shared is not None:
            sh, sw = shared.shape[0] // cs, shared.shape[1] // cs
        while True:
            vy, vx = rng.integers(-config.max_speed, config.max_speed + 1, size=2)
            ys = [y for y in range(rows - sh + 1) if 0 <= y + vy * span <= rows - sh]
            xs = [x for x in range(cols - sw + 1) if 0 <= x + vx * span <= cols - sw]
            if ys and xs:
                starts = (int(rng.choice(ys)), int(rng.choice(xs)))
                break
        if config.confusable:
            if shared is None:
                shared = _quantize(rng.uniform(0.0, 1.0, size=(sh * cs, sw * cs, c)))
            texture = shared
        else:
            texture = _quantize(rng.uniform(0.0, 1.0, size=(sh * cs, sw * cs, c)))
        sprites.append(Sprite(texture, starts, (int(vy), int(vx)), depth))
    return SpriteScene(config, background, sprites, seed)


def render_scene(scene: SpriteScene) -> tuple[Clip, SceneTruth]:
    cfg = scene.config
    rows, cols = cfg.grid_shape
    cs = cfg.cell_size
    n_frames, n_nodes = cfg.num_frames, rows * cols
    order = sorted(range(len(scene.sprites)), key=lambda s: scene.sprites[s].depth)
    # per-frame photometric perturbation; its own stream so geometry is unaffected
    photo = np.random.default_rng([scene.seed, 1])
    frames = np.empty((n_frames,) + cfg.frame_shape)
    owners = np.full((n_frames, rows, cols), NONE, dtype=np.int64)
    keypoints = np.zeros((n_frames, len(scene.sprites), 2))
    trajectories = np.zeros((len(scene.sprites), n_frames, 2), dtype=np.int64)
    for t in range(n_frames):
        frame = scene.background.copy()
        for s in order:
            sp = scene.sprites[s]
            sh, sw = sp.cells(cs)
            y, x = sp.position(t)
            if y < 0 or x < 0 or y + sh > rows or x + sw > cols:
                raise ValueError(f"sprite {s} trajectory exits canvas at frame {t}")
            shift = photo.uniform(-1.0, 1.0) * cfg.brightness_jitter if cfg.brightness_jitter else 0.0
            frame[y * cs : (y + sh) * cs, x * cs : (x + sw) * cs] = sp.texture + shift
            owners[t, y : y + sh, x : x + sw] = s
            keypoints[t, s] = ((y + sh / 2) * cs, (x + sw / 2) * cs)
            trajectories[s, t] = (y * cs, x * cs)
        if cfg.frame_noise:
            frame = frame + photo.uniform(-1.0, 1.0, size=frame.shape) * cfg.frame_noise
        frames[t] = _quantize(frame)
    owners = owners.reshape(n_frames, n_nodes)
    corr = np.full((n_frames - 1, n_nodes), NONE, dtype=np.int64)
    for t in range(n_frames - 1):
        for i in np.flatnonzero(owners[t] != NONE):
            s = owners[t, i]
            vy, vx = scene.sprites[s].velocity
            r, c = divmod(int(i), cols)
            j = (r + vy) * cols + (c + vx)
            if owners[t + 1, j] == s:
                corr[t, i] = j
    return Clip(frames), SceneTruth(corr, owners, keypoints, trajectories)


def gen_translating_sprites(config: SceneConfig, seed: int) -> tuple[Clip, SceneTruth, np.ndarray]:
    """Generate one clip; returns (clip, truth, frame-0 label field)."""
    clip, truth = render_scene(random_scene(config, seed))
    return clip, truth, truth.label_field(0)


def correspondence_accuracy(predicted: np.ndarray, truth: np.ndarray) -> tuple[float | None, int]:
    """Fraction of truth-defined nodes whose predicted target matches.

    Returns ``(accuracy, count)``; accuracy is None when nothing is defined.
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    defined = truth != NONE
    count = int(defined.sum())
    if count == 0:
        return None, 0
    return float((predicted[defined] == truth[defined]).mean()), count


# ----------------------------------------------------------------------------
# persistence


def _r9(x) -> float:
    return float(f"{float(x):.9g}")


def save_dataset(root: str | Path, samples: list[tuple[Clip, SceneTruth, SpriteScene]]) -> Path:
    """Write clips as ``clip_NNNN/frame_MMM.png`` plus a ``meta.json`` sidecar each."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for k, (clip, truth, scene) in enumerate(samples):
        d = root / f"clip_{k:04d}"
        save_clip_dir(clip, d)
        cfg = asdict(scene.config)
        cfg["grid_shape"] = list(scene.config.grid_shape)
        cfg["background_level"] = _r9(cfg["background_level"])
        cfg["background_noise"] = _r9(cfg["background_noise"])
        meta = {
            "format_version": FORMAT_VERSION,
            "seed": int(scene.seed),
            "scene": cfg,
            "sprites": [
                {
                    "cells": list(sp.cells(scene.config.cell_size)),
                    "start": list(sp.start),
                    "velocity": list(sp.velocity),
                    "depth": int(sp.depth),
                }
                for sp in scene.sprites
            ],
            "trajectories": truth.trajectories.tolist(),
            "correspondence": [[None if j == NONE else int(j) for j in row] for row in truth.correspondence],
            "owners": [[None if j == NONE else int(j) for j in row] for row in truth.owners],
            "keypoints": [[[_r9(v) for v in kp] for kp in frame] for frame in truth.keypoints],
        }
        (d / SIDECAR).write_text(json.dumps(meta, indent=1) + "\n")
    return root


def _from_nullable(rows) -> np.ndarray:
    return np.array([[NONE if v is None else v for v in row] for row in rows], dtype=np.int64)


@dataclass
class DatasetClip:
    name: str
    clip: Clip
    truth: SceneTruth
    grid_shape: tuple[int, int]
    cell_size: int
    meta: dict = field(default_factory=dict)


def load_dataset(root: str | Path) -> list[DatasetClip]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise FileNotFoundError("no clips found")
    out = []
    for d in dirs:
        sidecar = d / SIDECAR
        if not sidecar.exists():
            raise FileNotFoundError(f"missing sidecar {sidecar}")
        meta = json.loads(sidecar.read_text())
        n_sprites = len(meta["sprites"])
        keypoints = np.array(meta["keypoints"], dtype=np.float64).reshape(-1, n_sprites, 2)
        truth = SceneTruth(
            _from_nullable(meta["correspondence"]),
            _from_nullable(meta["owners"]),
            keypoints,
            np.array(meta["trajectories"], dtype=np.int64).reshape(n_sprites, -1, 2),
        )
        scene = meta["scene"]
        out.append(DatasetClip(d.name, load_clip_dir(d), truth, tuple(scene["grid_shape"]), int(scene["cell_size"]), meta))
    return out
