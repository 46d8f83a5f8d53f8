"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .neighbor_relation import EDGE_VARIANTS
from .propagation import TOPK_MODES
from .synthetic import SceneConfig

EVAL_FEATURES = ("encoder", "aggregated")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class RunConfig:
    # graph
    grid_shape: tuple = (7, 7)
    patch_size: int = 8
    window_shape: tuple = (3, 3)
    edge_variant: str = "topology-init"
    renormalize: bool = True
    # encoder
    embed_dim: int = 16
    hidden: int = 32
    kernel: int = 3
    stride: int = 1
    # walk
    tau: float = 0.05
    clip_length: int = 6
    dropout_threshold: float = 0.2
    min_keep: int = 4
    loss_mode: str = "sum"
    # schedule
    lr_phase1: float = 3e-3
    lr_phase2: float = 3e-4
    epochs_phase1: int = 10
    epochs_phase2: int = 3
    batch_size: int = 8
    max_steps: int = 0
    seed: int = 0
    # data
    data_dir: str = ""
    train_clips: int = 200
    eval_clips: int = 30
    data_seed: int = 0
    eval_seed: int = 10000
    num_sprites: int = 3
    sprite_min_cells: int = 2
    sprite_max_cells: int = 3
    max_speed: int = 1
    background_level: float = 0.25
    background_noise: float = 0.02
    frame_noise: float = 0.02
    brightness_jitter: float = 0.1
    confusable: bool = False
    # inference
    infer_k: int = 10
    infer_context: int = 4
    infer_radius: float = 2.0
    topk_mode: str = "softmax-first"
    eval_features: str = "encoder"

    def validate(self) -> "RunConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(len(self.grid_shape) == 2 and min(self.grid_shape) >= 1, "grid_shape", "must be two positive ints")
        need(len(self.window_shape) == 2 and all(w >= 1 and w % 2 == 1 for w in self.window_shape),
             "window_shape", "dims must be odd and >= 1")
        need(self.tau > 0, "tau", "must be > 0")
        need(self.clip_length >= 1, "clip_length", "must be >= 1")
        need(0.0 <= self.dropout_threshold <= 2.0, "dropout_threshold", "must lie in [0, 2]")
        need(self.min_keep >= 2, "min_keep", "must be >= 2")
        need(self.edge_variant in EDGE_VARIANTS, "edge_variant", f"must be one of {EDGE_VARIANTS}")
        need(self.loss_mode in ("sum", "mean"), "loss_mode", "must be 'sum' or 'mean'")
        need(self.embed_dim >= 2, "embed_dim", "must be >= 2")
        need(self.kernel % 2 == 1, "kernel", "must be odd")
        need(self.stride >= 1 and self.patch_size % self.stride == 0, "stride", "must divide patch_size")
        need(self.patch_size >= 1, "patch_size", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.lr_phase1 >= 0 and self.lr_phase2 >= 0, "lr_phase1", "learning rates must be >= 0")
        need(self.epochs_phase1 >= 0 and self.epochs_phase2 >= 0, "epochs_phase1", "epochs must be >= 0")
        need(self.infer_k >= 1, "infer_k", "must be >= 1")
        need(self.infer_radius >= 1, "infer_radius", "must be >= 1")
        need(self.topk_mode in TOPK_MODES, "topk_mode", f"must be one of {TOPK_MODES}")
        need(self.eval_features in EVAL_FEATURES, "eval_features", f"must be one of {EVAL_FEATURES}")
        need(self.sprite_min_cells <= self.sprite_max_cells, "sprite_min_cells", "must not exceed sprite_max_cells")
        return self

    def scene(self, num_frames: int | None = None) -> SceneConfig:
        return SceneConfig(
            grid_shape=tuple(self.grid_shape),
            cell_size=self.patch_size,
            num_frames=self.clip_length + 1 if num_frames is None else num_frames,
            num_sprites=self.num_sprites,
            sprite_min_cells=self.sprite_min_cells,
            sprite_max_cells=self.sprite_max_cells,
            max_speed=self.max_speed,
            background_level=self.background_level,
            background_noise=self.background_noise,
            confusable=self.confusable,
            frame_noise=self.frame_noise,
            brightness_jitter=self.brightness_jitter,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def dumps(self) -> str:
        """Canonical text form: one ``key = value`` line per field, declaration order."""
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            parts = raw.lower().replace(",", "x").split("x")
            return tuple(int(p) for p in parts)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    base = RunConfig() if base is None else base
    defaults = {f.name: getattr(base, f.name) for f in fields(base)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(key, "unknown config key")
        values[key] = _parse(key, raw, defaults[key])
    return dataclasses.replace(base, **values).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    return parse_config(Path(path).read_text())
