"""Similarity graph, palindrome cycle loss and node dropout."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .encoder import EncoderParams, embed_patches, im2col, normalize_pixels
from .neighbor_relation import EdgeLogits, aggregate_neighbors
from .video_graph import NeighborTable


@dataclass
class AffinityMatrix:
    """Row-stochastic transition matrix from frame ``src`` to frame ``dst``."""

    matrix: dm.Var
    src: int
    dst: int

    @property
    def value(self) -> np.ndarray:
        return self.matrix.value


def pairwise_affinity(f_src, f_dst, tau: float, src: int = 0, dst: int = 1) -> AffinityMatrix:
    """Softmax over destination nodes of ``f_src . f_dst / tau``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    sim = dm.matmul(f_src, f_dst, transpose_b=True)
    return AffinityMatrix(dm.row_softmax(sim, tau), src, dst)


def backward_affinity(f_src, f_dst, tau: float, src: int = 1, dst: int = 0) -> AffinityMatrix:
    """Transition from the later frame back to the earlier one.

    A fresh softmax over the earlier frame's nodes, not the transpose of the
    forward matrix.
    """
    return pairwise_affinity(f_src, f_dst, tau, src, dst)


def chain_affinity(steps: Sequence[AffinityMatrix]) -> AffinityMatrix:
    """Product of consecutive transitions, src of the first to dst of the last."""
    if not steps:
        raise ValueError("empty affinity chain")
    out = steps[0].matrix
    for prev, nxt in zip(steps, steps[1:]):
        if prev.dst != nxt.src:
            raise ValueError(f"non-consecutive chain: step ends at frame {prev.dst}, next starts at {nxt.src}")
        out = dm.matmul(out, nxt.matrix)
    return AffinityMatrix(out, steps[0].src, steps[-1].dst)


def pixel_discrepancy(p: np.ndarray) -> np.ndarray:
    """One minus the mean self-similarity of unit pixel columns.

    ``p`` is (d, hw) or a stack (M, d, hw). The mean of all hw^2 entries of
    p^T p equals the squared norm of the mean column.
    """
    p = np.asarray(p, dtype=np.float64)
    mean_col = p.mean(axis=-1)
    return 1.0 - (mean_col**2).sum(axis=-1)


def apply_node_dropout(deltas: np.ndarray, threshold: float, min_keep: int = 4) -> np.ndarray:
    """Sorted indices of nodes with discrepancy >= threshold.

    Falls back to the ``min_keep`` highest-discrepancy nodes (ties to the
    lower index) when too few survive.
    """
    if min_keep < 2:
        raise ValueError("min_keep must be at least 2")
    deltas = np.asarray(deltas, dtype=np.float64)
    kept = np.flatnonzero(deltas >= threshold)
    if kept.size >= min(min_keep, deltas.size):
        return kept
    order = np.lexsort((np.arange(deltas.size), -deltas))
    return np.sort(order[:min_keep])


@dataclass
class PalindromeBatch:
    """A clip walked forward t..t+T and back, with per-frame kept nodes."""

    embeddings: list  # per frame, (N, d) Var of aggregated embeddings
    kept: list  # per frame, sorted node indices
    frames: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.embeddings) != len(self.kept):
            raise ValueError("one kept-node set per frame required")
        if len(self.embeddings) < 2:
            raise ValueError("a palindrome needs at least 2 frames")
        if not self.frames:
            self.frames = list(range(len(self.embeddings)))

    @property
    def length(self) -> int:
        """T: number of forward transitions."""
        return len(self.embeddings) - 1

    @property
    def targets(self) -> np.ndarray:
        return np.arange(len(self.kept[0]))


def cycle_loss(batch: PalindromeBatch, tau: float, mean: bool = False):
    """Sum over k = 1..T of CE(A_t^{t+k} A_{t+k}^t, identity).

    Returns ``(loss, per_k)`` where ``loss`` is a scalar Var and ``per_k`` the
    float value of each sub-cycle term.
    """
    for t, kept in enumerate(batch.kept):
        if len(kept) < 2:
            raise ValueError(f"frame {t} has {len(kept)} kept nodes; need at least 2")
    feats = [dm.gather_rows(e, k) for e, k in zip(batch.embeddings, batch.kept)]
    fr = batch.frames
    forward = None
    backward_chain = None
    terms = []
    for k in range(1, batch.length + 1):
        step = pairwise_affinity(feats[k - 1], feats[k], tau, fr[k - 1], fr[k])
        back = backward_affinity(feats[k], feats[0], tau, fr[k], fr[0]) if k == 1 else None
        forward = step if forward is None else chain_affinity([forward, step])
        # A_{t+k}^t = A_{t+k}^{t+k-1} A_{t+k-1}^t
        if k == 1:
            backward_chain = back
        else:
            last = backward_affinity(feats[k], feats[k - 1], tau, fr[k], fr[k - 1])
            backward_chain = chain_affinity([last, backward_chain])
        round_trip = dm.matmul(forward.matrix, backward_chain.matrix)
        terms.append(dm.cross_entropy_rows(round_trip, batch.targets))
    coef = 1.0 / len(terms) if mean else 1.0
    loss = dm.scalar_sum(terms, [coef] * len(terms))
    return loss, [float(t.value) for t in terms]


# ----------------------------------------------------------------------------
# training


class Adam:
    """First-order adaptive optimizer with bias correction."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.step_count)
            v_hat = v / (1 - b2**self.step_count)
            params[name] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass
class WalkSettings:
    """The subset of run configuration the walk needs."""

    tau: float = 0.05
    renormalize: bool = True
    min_keep: int = 4
    loss_mean: bool = False


@dataclass
class StepRecord:
    step: int
    loss: float
    sub_losses: list
    kept_fraction: float
    wall_time: float


def clip_forward(
    patches: np.ndarray,
    params: EncoderParams,
    edge: EdgeLogits,
    table: NeighborTable,
    settings: WalkSettings,
    threshold: float | None = None,
    weights: dict | None = None,
    edge_var=None,
    cols: np.ndarray | None = None,
):
    """Encode, aggregate and drop nodes for one clip of shape (F, N, P, P, C).

    Returns ``(batch, deltas)``; ``deltas`` is (F, N).
    """
    frames, n_nodes = patches.shape[:2]
    nodes, pixels = embed_patches(patches, params, weights, cols=cols)
    deltas = pixel_discrepancy(normalize_pixels(pixels.value, params.cells)).reshape(frames, n_nodes)
    logits = edge_var if edge_var is not None else edge.logits
    f = aggregate_neighbors(nodes, logits, table, settings.renormalize)
    per_frame = [dm.gather_rows(f, np.arange(t * n_nodes, (t + 1) * n_nodes)) for t in range(frames)]
    if threshold is None:
        kept = [np.arange(n_nodes)] * frames
    else:
        kept = [apply_node_dropout(d, threshold, settings.min_keep) for d in deltas]
    return PalindromeBatch(per_frame, kept), deltas


def clip_cols(patches: np.ndarray, params: EncoderParams) -> np.ndarray:
    flat = patches.reshape((-1,) + patches.shape[-3:])
    return im2col(flat, params.kernel, params.stride)


def train_step(
    clips: Sequence[np.ndarray],
    params: EncoderParams,
    edge: EdgeLogits,
    table: NeighborTable,
    settings: WalkSettings,
    optimizer: Adam,
    lr: float,
    threshold: float | None = None,
    step: int = 0,
    cols: Sequence[np.ndarray] | None = None,
) -> StepRecord:
    """One optimizer step on the batch-mean cycle loss; updates in place.

    ``clips`` holds per-clip patch stacks (F, N, P, P, C). ``threshold=None``
    disables node dropout.
    """
    start = time.perf_counter()
    weights = {k: dm.Var(v, requires_grad=True) for k, v in params.weights.items()}
    edge_var = dm.Var(edge.logits, requires_grad=True) if edge.learnable else None
    total, subs, kept_frac = 0.0, None, 0.0
    scale = 1.0 / len(clips)
    for i, patches in enumerate(clips):
        batch, _ = clip_forward(
            patches, params, edge, table, settings, threshold, weights, edge_var,
            cols=None if cols is None else cols[i],
        )
        loss, per_k = cycle_loss(batch, settings.tau, settings.loss_mean)
        if not np.isfinite(float(loss.value)):
            raise TrainingDiverged(
                f"non-finite loss at step {step}",
                {"step": step, "clip": i, "loss": float(loss.value), "sub_losses": per_k},
            )
        dm.backward(loss, np.asarray(scale))
        total += scale * float(loss.value)
        subs = np.asarray(per_k) * scale if subs is None else subs + np.asarray(per_k) * scale
        n_total = sum(e.shape[0] for e in batch.embeddings)
        kept_frac += scale * sum(len(k) for k in batch.kept) / n_total
    grads = {k: (w.grad if w.grad is not None else np.zeros_like(w.value)) for k, w in weights.items()}
    values = dict(params.weights)
    if edge_var is not None:
        grads["edge"] = edge_var.grad if edge_var.grad is not None else np.zeros_like(edge.logits)
        values["edge"] = edge.logits
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name} at step {step}", {"step": step, "param": name})
    optimizer.update(values, grads, lr)
    return StepRecord(step, total, [float(s) for s in subs], kept_frac, time.perf_counter() - start)


def node_embeddings(patches: np.ndarray, params: EncoderParams, edge: EdgeLogits | None = None,
                    table: NeighborTable | None = None, renormalize: bool = True) -> np.ndarray:
    """Inference embeddings (F, N, d): raw encoder output, or aggregated when ``edge`` is given."""
    frames, n_nodes = patches.shape[:2]
    nodes, _ = embed_patches(patches, params)
    if edge is not None:
        nodes = aggregate_neighbors(nodes, edge, table, renormalize)
    return nodes.value.reshape(frames, n_nodes, -1)


def argmax_chain(embeds: np.ndarray, tau: float) -> np.ndarray:
    """Most likely next-frame node for every (frame, node): shape (F-1, N)."""
    out = []
    for t in range(embeds.shape[0] - 1):
        a = pairwise_affinity(embeds[t], embeds[t + 1], tau).value
        out.append(a.argmax(axis=1))
    return np.stack(out)
