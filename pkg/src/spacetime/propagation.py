"""Label propagation through restricted top-k transitions, plus metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

TOPK_MODES = ("softmax-first", "logits-first")


@dataclass
class TransitionMatrix:
    """K_t^s: rows are target nodes, columns the stacked context nodes."""

    weights: np.ndarray
    context_frames: int

    @property
    def shape(self):
        return self.weights.shape


def grid_coords(grid_shape: tuple[int, int]) -> np.ndarray:
    rows, cols = grid_shape
    return np.stack(np.divmod(np.arange(rows * cols), cols), axis=1)


def build_transition(
    target_embeds: np.ndarray,
    context_embeds: Sequence[np.ndarray],
    tau: float,
    radius: float,
    k: int,
    grid_shape: tuple[int, int] | None = None,
    topk_mode: str = "softmax-first",
) -> TransitionMatrix:
    """Softmax over in-radius context nodes, keep the top k, renormalize.

    ``radius`` is a Chebyshev distance in grid cells (``np.inf`` disables the
    mask). Without ``grid_shape`` the nodes are assumed to form one row.
    ``topk_mode="logits-first"`` truncates on raw similarities and softmaxes
    the survivors; both orders keep the same set and give the same weights.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    if topk_mode not in TOPK_MODES:
        raise ValueError(f"unknown topk_mode {topk_mode!r}")
    target = np.asarray(target_embeds, dtype=np.float64)
    ctx = [np.asarray(c, dtype=np.float64) for c in context_embeds]
    n_target = target.shape[0]
    coords = grid_coords(grid_shape if grid_shape is not None else (1, n_target))
    if any(c.shape[0] != coords.shape[0] for c in ctx) or coords.shape[0] != n_target:
        raise ValueError("context frames must share the target's node grid")
    stacked = np.concatenate(ctx, axis=0)
    logits = target @ stacked.T / tau
    dist = np.abs(coords[:, None, :] - coords[None, :, :]).max(axis=-1)
    allowed = np.tile(dist <= radius, (1, len(ctx)))
    if not allowed.any(axis=1).all():
        raise ValueError("target node with no context node inside the radius")
    logits = np.where(allowed, logits, -np.inf)
    # stable sort keeps the lower column on ties
    order = np.argsort(-logits, axis=1, kind="stable")
    keep = np.zeros_like(allowed)
    rows = np.arange(n_target)[:, None]
    keep[rows, order[:, :k]] = True
    keep &= allowed
    if topk_mode == "softmax-first":
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.where(allowed, np.exp(z), 0.0)
        p /= p.sum(axis=1, keepdims=True)
        p = np.where(keep, p, 0.0)
        p /= p.sum(axis=1, keepdims=True)
    else:
        z = np.where(keep, logits, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
    return TransitionMatrix(p, len(ctx))


def propagate_labels(transition: TransitionMatrix | np.ndarray, context_labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L_t = K L_context, clipped to [0, 1]; also the per-node argmax channel."""
    K = transition.weights if isinstance(transition, TransitionMatrix) else np.asarray(transition)
    labels = np.asarray(context_labels, dtype=np.float64)
    if K.shape[1] != labels.shape[0]:
        raise ValueError(f"transition {K.shape} does not match labels {labels.shape}")
    soft = np.clip(K @ labels, 0.0, 1.0)
    return soft, soft.argmax(axis=1)


def propagate_video(
    embeds: np.ndarray,
    source_labels: np.ndarray,
    tau: float = 0.05,
    k: int = 10,
    context: int = 4,
    radius: float = 2,
    grid_shape: tuple[int, int] | None = None,
    topk_mode: str = "softmax-first",
) -> np.ndarray:
    """Propagate frame-0 labels through a clip of embeddings (F, N, d).

    Each target frame attends to the source frame plus its last ``context``
    predicted frames. Returns soft labels (F, N, C); frame 0 is the source.
    """
    embeds = np.asarray(embeds, dtype=np.float64)
    out = [np.asarray(source_labels, dtype=np.float64)]
    for t in range(1, embeds.shape[0]):
        prev = list(range(max(1, t - context), t))
        frames = [0] + prev
        K = build_transition(embeds[t], [embeds[f] for f in frames], tau, radius, k, grid_shape, topk_mode)
        soft, _ = propagate_labels(K, np.concatenate([out[f] for f in frames], axis=0))
        out.append(soft)
    return np.stack(out)


def jaccard(pred: np.ndarray, truth: np.ndarray, channel: int) -> float | None:
    """IoU of one channel between hard label vectors; None if the union is empty."""
    pred = np.asarray(pred) == channel
    truth = np.asarray(truth) == channel
    if pred.shape != truth.shape:
        raise ValueError("label fields differ in node count")
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return None
    return float(np.logical_and(pred, truth).sum() / union)


def pck(pred: np.ndarray, truth: np.ndarray, alpha: float, frame_hw: tuple[int, int]) -> float:
    """Share of keypoints within ``alpha * max(H, W)`` pixels (inclusive)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if pred.shape != truth.shape:
        raise ValueError("keypoint counts differ")
    if pred.shape[0] == 0:
        return float("nan")
    dist = np.linalg.norm(pred - truth, axis=1)
    return float((dist <= alpha * max(frame_hw)).mean())
