"""Desk-scale patch encoder.

Local filters -> tanh -> pointwise filters -> tanh -> linear projection gives
a d-dimensional feature per pixel cell. Node embeddings mean-pool those
projected features and l2-normalize; pixel embeddings normalize each cell
without pooling. Because the projection is linear, pooling before or after
it is the same thing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import diffmath as dm

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "proj_w")
INPUT_CENTER = 0.5


@dataclass
class EncoderParams:
    patch_size: int
    channels: int
    embed_dim: int
    hidden: int = 16
    kernel: int = 3
    stride: int = 1
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.patch_size % self.stride:
            raise ValueError("patch_size must be a multiple of stride")
        expected = self.shapes()
        for name, arr in self.weights.items():
            if name in expected and np.shape(arr) != expected[name]:
                raise ValueError(f"encoder parameter {name} has shape {np.shape(arr)}, expected {expected[name]}")
            if not np.isfinite(arr).all():
                raise ValueError(f"encoder parameter {name} is not finite")

    @property
    def pixel_grid(self) -> tuple[int, int]:
        side = self.patch_size // self.stride
        return side, side

    @property
    def cells(self) -> int:
        h, w = self.pixel_grid
        return h * w

    def shapes(self) -> dict[str, tuple[int, ...]]:
        fan = self.kernel * self.kernel * self.channels
        return {
            "conv1_w": (fan, self.hidden),
            "conv1_b": (self.hidden,),
            "conv2_w": (self.hidden, self.hidden),
            "conv2_b": (self.hidden,),
            "proj_w": (self.hidden, self.embed_dim),
        }

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.patch_size, self.channels, self.embed_dim, self.hidden, self.kernel, self.stride,
            {k: v.copy() for k, v in self.weights.items()},
        )


def init_encoder(
    patch_size: int,
    channels: int = 3,
    embed_dim: int = 16,
    hidden: int = 16,
    kernel: int = 3,
    stride: int = 1,
    seed: int = 0,
) -> EncoderParams:
    """Weights ~ U(-b, b) with b = sqrt(6 / fan_in); biases zero."""
    params = EncoderParams(patch_size, channels, embed_dim, hidden, kernel, stride)
    rng = np.random.default_rng(seed)
    for name in PARAM_NAMES:
        shape = params.shapes()[name]
        if name.endswith("_b"):
            params.weights[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / shape[0])
            params.weights[name] = rng.uniform(-bound, bound, size=shape)
    return params


def im2col(patches: np.ndarray, kernel: int, stride: int = 1) -> np.ndarray:
    """(M, P, P, C) patches -> (M * h * w, kernel * kernel * C) local windows.

    Borders replicate edge pixels so a constant patch yields identical
    windows at every cell.
    """
    patches = np.asarray(patches, dtype=np.float64)
    pad = kernel // 2
    padded = np.pad(patches, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")
    win = sliding_window_view(padded, (kernel, kernel), axis=(1, 2))  # (M, P, P, C, k, k)
    win = win[:, ::stride, ::stride]
    m, h, w = win.shape[:3]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(m * h * w, -1) - INPUT_CENTER


def _check_patches(patches: np.ndarray, params: EncoderParams) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    expected = (params.patch_size, params.patch_size, params.channels)
    if patches.shape[-3:] != expected:
        raise ValueError(f"patch shape {patches.shape[-3:]} does not match encoder {expected}")
    return patches


def pixel_projection(cols: np.ndarray, weights: dict) -> dm.Var:
    """Projected (unnormalized) per-cell features from im2col windows."""
    h1 = dm.tanh(dm.add(dm.matmul(cols, weights["conv1_w"]), weights["conv1_b"]))
    h2 = dm.tanh(dm.add(dm.matmul(h1, weights["conv2_w"]), weights["conv2_b"]))
    return dm.matmul(h2, weights["proj_w"])


def embed_patches(patches: np.ndarray, params: EncoderParams, weights: dict | None = None, cols: np.ndarray | None = None):
    """Encode a stack of patches.

    Returns ``(nodes, pixels)``: unit-norm node embeddings as an (M, d) Var
    and the unnormalized per-cell projection as an (M * hw, d) Var. Pass
    ``weights`` as Vars to record gradients.
    """
    patches = _check_patches(patches, params)
    flat = patches.reshape((-1,) + patches.shape[-3:])
    if cols is None:
        cols = im2col(flat, params.kernel, params.stride)
    weights = params.weights if weights is None else weights
    pixels = pixel_projection(cols, weights)
    nodes = dm.l2_normalize_rows(dm.group_mean(pixels, params.cells))
    return nodes, pixels


def encode(patch: np.ndarray, params: EncoderParams) -> np.ndarray:
    patch = _check_patches(patch, params)
    if patch.ndim != 3:
        raise ValueError("encode takes a single (P, P, C) patch")
    nodes, _ = embed_patches(patch[None], params)
    return nodes.value[0]


def normalize_pixels(pixels: np.ndarray, cells: int) -> np.ndarray:
    """(M * hw, d) projections -> (M, d, hw) with unit-norm columns."""
    unit = dm.l2_normalize_rows(pixels).value
    m = unit.shape[0] // cells
    return unit.reshape(m, cells, -1).transpose(0, 2, 1)


def encode_pixels(patch: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Per-cell embeddings of one patch as a d x hw matrix with unit columns."""
    patch = _check_patches(patch, params)
    if patch.ndim != 3:
        raise ValueError("encode_pixels takes a single (P, P, C) patch")
    _, pixels = embed_patches(patch[None], params)
    return normalize_pixels(pixels.value, params.cells)[0]
