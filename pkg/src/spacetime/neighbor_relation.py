"""Learnable neighbor-relation edges and attention aggregation of node embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .video_graph import ABSENT, NeighborTable

EDGE_VARIANTS = ("fixed", "random-init", "topology-init")


@dataclass
class EdgeLogits:
    """One logit per window slot, shared by every node of every frame."""

    logits: np.ndarray
    window_shape: tuple[int, int]
    learnable: bool = True

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape != (self.window_shape[0] * self.window_shape[1],):
            raise ValueError(f"expected {self.window_shape[0] * self.window_shape[1]} logits, got {self.logits.shape}")
        if not np.isfinite(self.logits).all():
            raise ValueError("edge logits must be finite")

    @property
    def weights(self) -> np.ndarray:
        """Unmasked softmax of the logits (weights for an interior node)."""
        return dm.row_softmax(self.logits[None, :]).value[0]


def topology_counts(window_shape: tuple[int, int]) -> np.ndarray:
    """Occurrences of each slot across the horizontal, vertical and square structures.

    A structure counts only when it spans more than one slot; the square needs
    both window dims above 1 (otherwise it coincides with a line).
    """
    wr, wc = window_shape
    if wr % 2 == 0 or wc % 2 == 0:
        raise ValueError(f"window dims must be odd, got {window_shape}")
    counts = np.zeros((wr, wc))
    if wc > 1:
        counts[wr // 2, :] += 1
    if wr > 1:
        counts[:, wc // 2] += 1
    if wr > 1 and wc > 1:
        counts += 1
    if not counts.any():
        counts[:] = 1
    return counts.ravel()


def init_topology_logits(window_shape: tuple[int, int], learnable: bool = True) -> EdgeLogits:
    return EdgeLogits(np.log(topology_counts(window_shape)), tuple(window_shape), learnable)


def init_edge_logits(window_shape: tuple[int, int], variant: str, rng: np.random.Generator | None = None) -> EdgeLogits:
    """Build edge logits for one of the three ablation variants."""
    if variant == "topology-init":
        return init_topology_logits(window_shape, learnable=True)
    if variant == "fixed":
        return init_topology_logits(window_shape, learnable=False)
    if variant == "random-init":
        rng = np.random.default_rng(0) if rng is None else rng
        n = window_shape[0] * window_shape[1]
        return EdgeLogits(rng.normal(0.0, 1.0, size=n), tuple(window_shape), True)
    raise ValueError(f"unknown edge variant {variant!r}; expected one of {EDGE_VARIANTS}")


def _tiled_index(table: NeighborTable, rows: int) -> np.ndarray:
    n_nodes = table.index.shape[0]
    if rows % n_nodes:
        raise ValueError(f"{rows} embedding rows do not match a grid of {n_nodes} nodes")
    frames = rows // n_nodes
    base = np.arange(frames)[:, None, None] * n_nodes
    idx = np.where(table.index[None] == ABSENT, ABSENT, table.index[None] + base)
    return idx.reshape(-1, table.index.shape[1])


def aggregation_weights(logits, table: NeighborTable, rows: int | None = None) -> dm.Var:
    """Per-node softmax of the shared logits over that node's present slots."""
    index = table.index if rows is None else _tiled_index(table, rows)
    present = index != ABSENT
    if not present.any(axis=1).all():
        raise ValueError("node with zero present neighbor slots")
    tiled = dm.add(np.zeros(index.shape), logits)
    return dm.row_softmax(tiled, 1.0, mask=present)


def aggregate_neighbors(embeddings, edge: EdgeLogits | dm.Var, table: NeighborTable, renormalize: bool = True) -> dm.Var:
    """Attention-weighted sum of each node's neighbor embeddings.

    ``embeddings`` may stack several frames of the same grid as (F*N, d).
    ``edge`` is either an ``EdgeLogits`` (treated as a constant) or a ``Var``
    holding the logits, so callers control whether gradients reach them.
    """
    emb = dm.as_var(embeddings)
    logits = edge.logits if isinstance(edge, EdgeLogits) else edge
    if dm.as_var(logits).shape != (table.index.shape[1],):
        raise ValueError("edge logits do not match the neighbor table window")
    rows = emb.shape[0]
    index = _tiled_index(table, rows)
    weights = aggregation_weights(logits, table, rows)
    out = dm.weighted_sum(weights, emb, index)
    return dm.l2_normalize_rows(out) if renormalize else out
