"""Gradient-check report over every differentiable kernel plus the full loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import diffmath as dm
from .encoder import init_encoder
from .neighbor_relation import init_edge_logits
from .video_graph import neighborhood_indices
from .walk import WalkSettings, clip_forward, cycle_loss

THRESHOLD = 1e-4


def _kernel_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict]]:
    """name -> (scalar fn of leaf dict, parameter values). Each fn projects its
    kernel output onto a fixed random direction so every entry gets gradient."""

    x = rng.normal(size=(4, 5))
    y = rng.normal(size=(3, 5))
    mask = np.ones((4, 5), dtype=bool)
    mask[0, :2] = False
    cases = {}
    w_soft = rng.normal(size=(4, 5))
    cases["row_softmax"] = (lambda p: _inner(dm.row_softmax(p["x"], 0.5, mask), w_soft), {"x": x})
    w_mm = rng.normal(size=(4, 3))
    cases["matmul"] = (lambda p: _inner(dm.matmul(p["a"], p["b"], transpose_b=True), w_mm), {"a": x, "b": y})
    w_norm = rng.normal(size=(4, 5))
    cases["l2_normalize_rows"] = (lambda p: _inner(dm.l2_normalize_rows(p["x"]), w_norm), {"x": x})
    probs = rng.uniform(0.1, 1.0, size=(4, 4))
    cases["cross_entropy_rows"] = (lambda p: dm.cross_entropy_rows(p["p"], np.arange(4)), {"p": probs})
    index = np.array([[0, 1, -1], [2, -1, 3], [1, 2, 3], [-1, -1, 0]])
    w_ws = rng.normal(size=(4, 5))
    cases["weighted_sum"] = (
        lambda p: _inner(dm.weighted_sum(p["w"], p["v"], index), w_ws),
        {"w": rng.uniform(0.1, 1.0, size=(4, 3)), "v": x},
    )
    cases["scalar_sum"] = (
        lambda p: dm.scalar_sum([_inner(p["a"], w_soft), _inner(p["b"], w_norm)], [0.3, -1.7]),
        {"a": x, "b": rng.normal(size=(4, 5))},
    )
    bias = rng.normal(size=(5,))
    cases["add"] = (lambda p: _inner(dm.add(p["x"], p["b"]), w_soft), {"x": x, "b": bias})
    cases["tanh"] = (lambda p: _inner(dm.tanh(p["x"]), w_soft), {"x": x})
    w_gm = rng.normal(size=(2, 5))
    cases["group_mean"] = (lambda p: _inner(dm.group_mean(p["x"], 2), w_gm), {"x": x})
    w_gr = rng.normal(size=(3, 5))
    cases["gather_rows"] = (lambda p: _inner(dm.gather_rows(p["x"], np.array([3, 0, 3])), w_gr), {"x": x})
    return cases


def _inner(out: dm.Var, w: np.ndarray) -> dm.Var:
    """sum(out * w) built from tape kernels."""
    flat_w = dm.Var(w.reshape(1, -1))
    return _reshape(dm.matmul(flat_w, _reshape(out, (-1, 1))), ())


def _reshape(x, shape) -> dm.Var:
    x = dm.as_var(x)
    orig = x.value.shape

    def back(g):
        x._accumulate(np.reshape(g, orig))

    return dm._result(x.value.reshape(shape), [x], back)


def _end_to_end_case(rng: np.random.Generator, tau: float = 0.5):
    """2 frames, 4 nodes (2x2 grid), d=8, learnable 3x3 edges."""
    params = init_encoder(4, 3, 8, hidden=6, kernel=3, seed=int(rng.integers(1 << 30)))
    patches = rng.uniform(0, 1, size=(2, 4, 4, 4, 3))
    table = neighborhood_indices((2, 2), (3, 3))
    edge = init_edge_logits((3, 3), "topology-init")
    settings = WalkSettings(tau=tau)

    def fn(p):
        weights = {k: p[k] for k in params.weights}
        batch, _ = clip_forward(patches, params, edge, table, settings, None, weights, p["edge"])
        loss, _ = cycle_loss(batch, settings.tau)
        return loss

    values = dict(params.weights)
    values["edge"] = edge.logits + rng.normal(scale=0.3, size=edge.logits.shape)
    return fn, values


def run_gradcheck(seed: int = 0, step: float = 1e-5, corrupt: str | None = None) -> list[tuple[str, float]]:
    """Max relative error per component; ``corrupt`` names one component whose
    analytic gradient is deliberately perturbed (negative control)."""
    rng = np.random.default_rng(seed)
    cases = _kernel_cases(rng)
    cases["end_to_end"] = _end_to_end_case(rng)
    if corrupt is not None and corrupt not in cases:
        raise ValueError(f"unknown component {corrupt!r}")
    report = []
    for name, (fn, values) in cases.items():
        if name == corrupt:
            value, analytic = dm.analytic_grads(fn, values)
            numeric = dm.numeric_grads(fn, values, step)
            err = max(dm.relative_error(analytic[k] * 1.01 + 1e-3, numeric[k]) for k in values)
        else:
            err = dm.grad_check(fn, values, step)
        report.append((name, err))
    return report


def component_names() -> list[str]:
    return list(_kernel_cases(np.random.default_rng(0))) + ["end_to_end"]
