"""Ablation sweeps: each setting retrains from scratch and scores held-out clips."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .training import evaluate, mean_accuracy, synthetic_split, train, training_patches

log = logging.getLogger(__name__)

AXES = {
    "window": [
        ("3(h)", {"window_shape": (1, 3)}),
        ("3(v)", {"window_shape": (3, 1)}),
        ("9", {"window_shape": (3, 3)}),
        ("25", {"window_shape": (5, 5)}),
    ],
    "edge-variant": [
        ("fixed", {"edge_variant": "fixed"}),
        ("random", {"edge_variant": "random-init"}),
        ("topology", {"edge_variant": "topology-init"}),
    ],
    "delta": [(f"{d:.1f}", {"dropout_threshold": d}) for d in (0.0, 0.1, 0.2, 0.3, 0.4)],
    # palindrome path length is twice the clip length
    "path-length": [(str(2 * t), {"clip_length": t}) for t in (2, 4, 6, 10)],
}

ROW_HEADER = "axis\tsetting\tpath_length\tseeds\taccuracy\taccuracy_per_seed\tfinal_loss"


@dataclass
class AblationRow:
    axis: str
    label: str
    path_length: int
    seeds: list
    accuracies: list
    final_losses: list

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    def line(self) -> str:
        per_seed = ",".join(f"{a:.6f}" for a in self.accuracies)
        seeds = ",".join(str(s) for s in self.seeds)
        loss = float(np.mean(self.final_losses))
        return f"{self.axis}\t{self.label}\t{self.path_length}\t{seeds}\t{self.accuracy:.6f}\t{per_seed}\t{loss:.6f}"


def axis_settings(axis: str) -> list[tuple[str, dict]]:
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; choose from {', '.join(AXES)}")
    return AXES[axis]


def run_setting(cfg: RunConfig, eval_samples, seeds) -> tuple[list[float], list[float]]:
    """Train one configuration per seed; returns (held-out accuracies, final losses)."""
    patches = training_patches(cfg)
    accs, losses = [], []
    for seed in seeds:
        run = cfg.replace(seed=seed)
        result = train(run, patches=patches)
        acc = mean_accuracy(evaluate(result.model, run, eval_samples))
        accs.append(float("nan") if acc is None else acc)
        losses.append(result.losses[-1] if result.losses else float("nan"))
        log.info("%s seed %d accuracy %.4f", cfg.fingerprint(), seed, accs[-1])
    return accs, losses


def run_ablation(cfg: RunConfig, axis: str, num_seeds: int = 1, eval_samples=None, emit=None) -> list[AblationRow]:
    """Sweep one axis. Every setting is scored on the same held-out clips,
    generated from ``cfg`` unless given."""
    settings = axis_settings(axis)
    if eval_samples is None:
        eval_samples = synthetic_split(cfg, "eval")
    seeds = [cfg.seed + i for i in range(num_seeds)]
    rows = []
    for label, overrides in settings:
        run = cfg.replace(**overrides)
        accs, losses = run_setting(run, eval_samples, seeds)
        row = AblationRow(axis, label, 2 * run.clip_length, seeds, accs, losses)
        rows.append(row)
        if emit is not None:
            emit(row)
    return rows
