"""Model construction, two-phase training, checkpoints and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import propagation as prop
from .config import RunConfig, parse_config
from .encoder import EncoderParams, init_encoder
from .neighbor_relation import EdgeLogits, init_edge_logits
from .synthetic import DatasetClip, correspondence_accuracy, gen_translating_sprites, load_dataset, NONE
from .video_graph import NeighborTable, clip_patches, neighborhood_indices
from .walk import Adam, StepRecord, TrainingDiverged, WalkSettings, argmax_chain, clip_cols, node_embeddings, train_step

log = logging.getLogger(__name__)

TRACE_HEADER = "step\tphase\tloss\tsub_losses\tkept_fraction"
CHECKPOINT_VERSION = 1


@dataclass
class Model:
    params: EncoderParams
    edge: EdgeLogits
    table: NeighborTable
    optimizer: Adam
    step: int = 0

    def embeddings(self, patches: np.ndarray, cfg: RunConfig) -> np.ndarray:
        if cfg.eval_features == "encoder":
            return node_embeddings(patches, self.params)
        return node_embeddings(patches, self.params, self.edge, self.table, cfg.renormalize)


def build_model(cfg: RunConfig) -> Model:
    params = init_encoder(cfg.patch_size, 3, cfg.embed_dim, cfg.hidden, cfg.kernel, cfg.stride, seed=cfg.seed)
    edge = init_edge_logits(tuple(cfg.window_shape), cfg.edge_variant, np.random.default_rng([cfg.seed, 7]))
    table = neighborhood_indices(tuple(cfg.grid_shape), tuple(cfg.window_shape))
    return Model(params, edge, table, Adam())


def walk_settings(cfg: RunConfig) -> WalkSettings:
    return WalkSettings(cfg.tau, cfg.renormalize, cfg.min_keep, cfg.loss_mode == "mean")


# ----------------------------------------------------------------------------
# data


def synthetic_split(cfg: RunConfig, split: str = "train", seed: int | None = None, num_frames: int | None = None):
    """Generate the train or eval split described by ``cfg`` as (clip, truth, scene) triples."""
    from .synthetic import random_scene, render_scene

    count = cfg.train_clips if split == "train" else cfg.eval_clips
    base = (cfg.data_seed if split == "train" else cfg.eval_seed) if seed is None else seed
    scene_cfg = cfg.scene(num_frames)
    out = []
    for i in range(count):
        scene = random_scene(scene_cfg, base + i)
        clip, truth = render_scene(scene)
        out.append((clip, truth, scene))
    return out


def training_patches(cfg: RunConfig, dataset: list | None = None) -> list[np.ndarray]:
    """Patch stacks (T+1, N, P, P, C) for every training clip."""
    if dataset is None:
        if cfg.data_dir:
            clips = [d.clip for d in load_dataset(cfg.data_dir)]
        else:
            clips = [c for c, _, _ in synthetic_split(cfg, "train")]
    else:
        clips = [d.clip if isinstance(d, DatasetClip) else d[0] for d in dataset]
    span = cfg.clip_length + 1
    out = []
    for clip in clips:
        if clip.length < span:
            raise ValueError(f"clip has {clip.length} frames; clip_length {cfg.clip_length} needs {span}")
        out.append(clip_patches(clip, tuple(cfg.grid_shape), cfg.patch_size)[:span])
    return out


# ----------------------------------------------------------------------------
# checkpoints


class CheckpointMismatch(ValueError):
    pass


def _arrays(d: dict) -> dict:
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in d.items()}


def _unarrays(d: dict) -> dict:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


def save_checkpoint(path: str | Path, model: Model, cfg: RunConfig) -> Path:
    """JSON checkpoint; floats use repr so a reload is bit-exact."""
    p = model.params
    state = model.optimizer.state()
    doc = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": cfg.fingerprint(),
        "config": cfg.dumps(),
        "step": model.step,
        "encoder": {
            "patch_size": p.patch_size, "channels": p.channels, "embed_dim": p.embed_dim,
            "hidden": p.hidden, "kernel": p.kernel, "stride": p.stride,
            "weights": _arrays(p.weights),
        },
        "edge": {
            "window_shape": list(model.edge.window_shape),
            "learnable": model.edge.learnable,
            "logits": model.edge.logits.tolist(),
        },
        "optimizer": {"step": state["step"], "m": _arrays(state["m"]), "v": _arrays(state["v"])},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None, override: bool = False) -> tuple[Model, RunConfig]:
    """Load a checkpoint; a config with a different fingerprint is rejected unless ``override``."""
    doc = json.loads(Path(path).read_text())
    saved_cfg = parse_config(doc["config"])
    if cfg is not None and cfg.fingerprint() != doc["fingerprint"] and not override:
        raise CheckpointMismatch(
            f"checkpoint fingerprint {doc['fingerprint']} does not match config {cfg.fingerprint()}"
        )
    enc = doc["encoder"]
    params = EncoderParams(
        enc["patch_size"], enc["channels"], enc["embed_dim"], enc["hidden"], enc["kernel"], enc["stride"],
        _unarrays(enc["weights"]),
    )
    window = tuple(doc["edge"]["window_shape"])
    edge = EdgeLogits(np.array(doc["edge"]["logits"], dtype=np.float64), window, doc["edge"]["learnable"])
    use_cfg = saved_cfg if cfg is None else cfg
    opt = Adam()
    o = doc["optimizer"]
    opt.load_state({"step": o["step"], "m": _unarrays(o["m"]), "v": _unarrays(o["v"])})
    table = neighborhood_indices(tuple(use_cfg.grid_shape), window)
    return Model(params, edge, table, opt, int(doc["step"])), use_cfg


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: Model
    records: list[StepRecord] = field(default_factory=list)
    phases: list[int] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]


def format_trace_line(rec: StepRecord, phase: int) -> str:
    subs = ",".join(repr(s) for s in rec.sub_losses)
    return f"{rec.step}\t{phase}\t{rec.loss!r}\t{subs}\t{rec.kept_fraction!r}"


def train(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    patches: list[np.ndarray] | None = None,
    model: Model | None = None,
    on_step: Callable[[StepRecord, int], None] | None = None,
) -> TrainResult:
    """Run the two-phase schedule.

    Phase 1 trains without node dropout at ``lr_phase1``; phase 2 enables
    dropout at ``dropout_threshold`` with ``lr_phase2``. With ``out_dir``,
    writes ``trace.tsv`` (deterministic), ``timing.tsv`` and
    ``checkpoint.json`` (written before the first step and refreshed after
    every epoch, so a diverged run leaves the last good state behind).
    """
    cfg.validate()
    patches = training_patches(cfg) if patches is None else patches
    model = build_model(cfg) if model is None else model
    settings = walk_settings(cfg)
    cols = [clip_cols(p, model.params) for p in patches]
    out = Path(out_dir) if out_dir is not None else None
    trace = timing = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        trace = open(out / "trace.tsv", "w")
        timing = open(out / "timing.tsv", "w")
        trace.write(TRACE_HEADER + "\n")
        timing.write("step\twall_time\n")
        save_checkpoint(out / "checkpoint.json", model, cfg)
    result = TrainResult(model)
    rng = np.random.default_rng([cfg.seed, 1])
    schedule = [(1, cfg.epochs_phase1, cfg.lr_phase1, None), (2, cfg.epochs_phase2, cfg.lr_phase2, cfg.dropout_threshold)]
    try:
        for phase, epochs, lr, threshold in schedule:
            for epoch in range(epochs):
                order = rng.permutation(len(patches))
                for start in range(0, len(order), cfg.batch_size):
                    if cfg.max_steps and model.step >= cfg.max_steps:
                        break
                    idx = order[start : start + cfg.batch_size]
                    rec = train_step(
                        [patches[i] for i in idx], model.params, model.edge, model.table, settings,
                        model.optimizer, lr, threshold, model.step, [cols[i] for i in idx],
                    )
                    model.step += 1
                    result.records.append(rec)
                    result.phases.append(phase)
                    if trace is not None:
                        trace.write(format_trace_line(rec, phase) + "\n")
                        timing.write(f"{rec.step}\t{rec.wall_time:.6f}\n")
                    if on_step is not None:
                        on_step(rec, phase)
                log.info("phase %d epoch %d step %d loss %.4f", phase, epoch, model.step,
                         result.records[-1].loss if result.records else float("nan"))
                if out is not None:
                    save_checkpoint(out / "checkpoint.json", model, cfg)
    finally:
        if trace is not None:
            trace.close()
            timing.close()
    if out is not None:
        save_checkpoint(out / "checkpoint.json", model, cfg)
    return result


# ----------------------------------------------------------------------------
# evaluation


@dataclass
class ClipMetrics:
    name: str
    accuracy: float | None
    accuracy_count: int
    jaccard: list  # per target frame: mean IoU over sprite channels (None if undefined)
    pck: dict  # alpha -> per target frame fraction


def evaluate_clip(model: Model, cfg: RunConfig, clip, truth, name: str = "clip",
                  alphas: tuple[float, ...] = (0.1, 0.2)) -> ClipMetrics:
    patches = clip_patches(clip, tuple(cfg.grid_shape), cfg.patch_size)
    emb = model.embeddings(patches, cfg)
    pred = argmax_chain(emb, cfg.tau)
    acc, count = correspondence_accuracy(pred, truth.correspondence)

    n_sprites = truth.keypoints.shape[1]
    labels0 = truth.label_field(0)
    soft = prop.propagate_video(emb, labels0, cfg.tau, cfg.infer_k, cfg.infer_context, cfg.infer_radius,
                                tuple(cfg.grid_shape), cfg.topk_mode)
    hard = soft.argmax(axis=2)
    truth_hard = truth.owners + 1
    jac = []
    for t in range(1, hard.shape[0]):
        scores = [prop.jaccard(hard[t], truth_hard[t], ch) for ch in range(1, n_sprites + 1)]
        scores = [s for s in scores if s is not None]
        jac.append(float(np.mean(scores)) if scores else None)

    # keypoints: one channel per sprite center, propagated with the same transitions
    rows, cols = cfg.grid_shape
    cs = cfg.patch_size
    kp0 = truth.keypoints[0]
    node_of = lambda yx: int(min(yx[0] // cs, rows - 1) * cols + min(yx[1] // cs, cols - 1))
    kp_labels = np.zeros((rows * cols, n_sprites))
    for s in range(n_sprites):
        kp_labels[node_of(kp0[s]), s] = 1.0
    kp_soft = prop.propagate_video(emb, kp_labels, cfg.tau, cfg.infer_k, cfg.infer_context, cfg.infer_radius,
                                   tuple(cfg.grid_shape), cfg.topk_mode)
    centers = np.stack(np.divmod(np.arange(rows * cols), cols), axis=1) * cs + cs / 2.0
    frame_hw = (rows * cs, cols * cs)
    pck = {a: [] for a in alphas}
    for t in range(1, kp_soft.shape[0]):
        pred_kp = centers[kp_soft[t].argmax(axis=0)]
        for a in alphas:
            pck[a].append(prop.pck(pred_kp, truth.keypoints[t], a, frame_hw))
    return ClipMetrics(name, acc, count, jac, pck)


def evaluate(model: Model, cfg: RunConfig, samples) -> list[ClipMetrics]:
    """``samples`` are DatasetClips or (clip, truth, ...) tuples."""
    out = []
    for i, s in enumerate(samples):
        if isinstance(s, DatasetClip):
            out.append(evaluate_clip(model, cfg, s.clip, s.truth, s.name))
        else:
            out.append(evaluate_clip(model, cfg, s[0], s[1], f"clip_{i:04d}"))
    return out


def mean_accuracy(metrics: list[ClipMetrics]) -> float | None:
    """Node-weighted correspondence accuracy over all clips."""
    hits = sum(m.accuracy * m.accuracy_count for m in metrics if m.accuracy is not None)
    total = sum(m.accuracy_count for m in metrics)
    return None if total == 0 else hits / total


def _fmt(v) -> str:
    return "NONE" if v is None else f"{v:.6f}"


def metric_lines(metrics: list[ClipMetrics]) -> list[str]:
    """Structured records: header, one line per (clip, frame, metric), then summary lines."""
    lines = ["clip\tframe\tmetric\tvalue"]
    jac_all, pck_all = [], {}
    for m in metrics:
        lines.append(f"{m.name}\tall\tcorrespondence_accuracy\t{_fmt(m.accuracy)}")
        for t, j in enumerate(m.jaccard, start=1):
            lines.append(f"{m.name}\t{t}\tjaccard\t{_fmt(j)}")
            if j is not None:
                jac_all.append(j)
        for a, vals in m.pck.items():
            for t, v in enumerate(vals, start=1):
                lines.append(f"{m.name}\t{t}\tpck@{a:g}\t{_fmt(v)}")
            pck_all.setdefault(a, []).extend(v for v in vals if not np.isnan(v))
    lines.append(f"summary\tall\tcorrespondence_accuracy\t{_fmt(mean_accuracy(metrics))}")
    lines.append(f"summary\tall\tjaccard\t{_fmt(float(np.mean(jac_all)) if jac_all else None)}")
    for a, vals in pck_all.items():
        lines.append(f"summary\tall\tpck@{a:g}\t{_fmt(float(np.mean(vals)) if vals else None)}")
    return lines


__all__ = [
    "Model", "build_model", "train", "TrainResult", "TrainingDiverged", "save_checkpoint", "load_checkpoint",
    "CheckpointMismatch", "evaluate", "evaluate_clip", "metric_lines", "mean_accuracy", "synthetic_split",
    "training_patches", "NONE",
]
