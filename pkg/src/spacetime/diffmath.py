"""Differentiable numeric kernels with a tiny reverse-mode tape.

Every kernel takes ``Var`` or array inputs and returns a ``Var``. Calling
``backward`` on a scalar ``Var`` accumulates ``.grad`` on every reachable
``Var`` created with ``requires_grad=True``. The kernel set is fixed; there is
no operator overloading and no graph compiler.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

PROB_FLOOR = 1e-12


class Var:
    """A float64 array node on the tape."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Var, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _result(value: np.ndarray, parents: Sequence[Var], backward) -> Var:
    out = Var(value)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def backward(root: Var, seed: np.ndarray | None = None) -> None:
    """Reverse sweep from ``root``; gradients accumulate into ``.grad``."""
    if not root.requires_grad:
        return
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    # intermediate grads are per-sweep
    for node in order:
        if node._backward is not None:
            node.grad = None
    root._accumulate(np.ones_like(root.value) if seed is None else seed)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ----------------------------------------------------------------------------
# kernels


def row_softmax(logits, temperature: float = 1.0, mask=None) -> Var:
    """Row-wise softmax of ``logits / temperature``.

    ``mask`` is a boolean table of the same shape; False entries are excluded
    from their row's normalization and come out as exactly 0.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = as_var(logits)
    z = x.value / temperature
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("empty softmax row")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        x._accumulate(p * (g - dot) / temperature)

    return _result(p, (x,), back)


def matmul(a, b, transpose_b: bool = False) -> Var:
    """``a @ b`` (or ``a @ b.T``)."""
    a, b = as_var(a), as_var(b)
    bv = b.value.T if transpose_b else b.value
    if a.value.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} x {bv.shape}")
    out = a.value @ bv

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ bv.T)
        if b.requires_grad:
            gb = a.value.T @ g
            b._accumulate(gb.T if transpose_b else gb)

    return _result(out, (a, b), back)


def l2_normalize_rows(x, eps: float = 1e-12) -> Var:
    """Scale each row to unit Euclidean norm.

    Rows with norm below ``eps`` are divided by ``eps`` instead, so an all-zero
    row stays zero.
    """
    x = as_var(x)
    norm = np.sqrt((x.value**2).sum(axis=-1, keepdims=True))
    small = norm < eps
    denom = np.where(small, eps, norm)
    y = x.value / denom

    def back(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        gx = np.where(small, g / eps, (g - y * proj) / denom)
        x._accumulate(gx)

    return _result(y, (x,), back)


def cross_entropy_rows(probs, targets) -> Var:
    """Mean over rows of ``-log probs[i, targets[i]]`` with a 1e-12 floor."""
    p = as_var(probs)
    targets = np.asarray(targets, dtype=np.int64)
    rows, cols = p.value.shape
    if targets.shape != (rows,):
        raise ValueError(f"expected {rows} targets, got shape {targets.shape}")
    if rows and (targets.min() < 0 or targets.max() >= cols):
        raise IndexError("target index out of range")
    picked = p.value[np.arange(rows), targets]
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = -np.log(clamped).mean()

    def back(g):
        gp = np.zeros_like(p.value)
        live = picked >= PROB_FLOOR
        gp[np.arange(rows), targets] = np.where(live, -1.0 / (rows * clamped), 0.0)
        p._accumulate(gp * g)

    return _result(np.asarray(loss), (p,), back)


def weighted_sum(weights, values, index) -> Var:
    """Gather-and-combine rows: ``out[i] = sum_j weights[i, j] * values[index[i, j]]``.

    Negative entries of ``index`` mark absent slots and contribute nothing.
    """
    w, v = as_var(weights), as_var(values)
    index = np.asarray(index, dtype=np.int64)
    present = index >= 0
    safe = np.where(present, index, 0)
    wv = np.where(present, w.value, 0.0)
    out = np.einsum("ij,ijd->id", wv, v.value[safe])

    def back(g):
        if w.requires_grad:
            gw = np.einsum("id,ijd->ij", g, v.value[safe])
            w._accumulate(np.where(present, gw, 0.0))
        if v.requires_grad:
            gv = np.zeros_like(v.value)
            np.add.at(gv, safe.ravel(), (wv[:, :, None] * g[:, None, :]).reshape(-1, g.shape[-1]))
            v._accumulate(gv)

    return _result(out, (w, v), back)


def scalar_sum(terms: Sequence[Var], coefs: Sequence[float] | None = None) -> Var:
    """Linear combination of scalar ``Var`` terms."""
    terms = [as_var(t) for t in terms]
    coefs = [1.0] * len(terms) if coefs is None else list(coefs)
    total = sum(c * float(t.value) for c, t in zip(coefs, terms))

    def back(g):
        for c, t in zip(coefs, terms):
            if t.requires_grad:
                t._accumulate(np.asarray(c * g))

    return _result(np.asarray(total), terms, back)


def add(a, b) -> Var:
    """Elementwise sum; ``b`` may broadcast along leading axes (bias add)."""
    a, b = as_var(a), as_var(b)
    out = a.value + b.value

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.value.shape))

    return _result(out, (a, b), back)


def tanh(x) -> Var:
    x = as_var(x)
    y = np.tanh(x.value)

    def back(g):
        x._accumulate(g * (1.0 - y * y))

    return _result(y, (x,), back)


def group_mean(x, group: int) -> Var:
    """Mean over consecutive blocks of ``group`` rows."""
    x = as_var(x)
    rows, cols = x.value.shape
    if rows % group:
        raise ValueError(f"{rows} rows not divisible into groups of {group}")
    out = x.value.reshape(rows // group, group, cols).mean(axis=1)

    def back(g):
        x._accumulate(np.repeat(g / group, group, axis=0))

    return _result(out, (x,), back)


def gather_rows(x, rows) -> Var:
    x = as_var(x)
    rows = np.asarray(rows, dtype=np.int64)
    out = x.value[rows]

    def back(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, rows, g)
        x._accumulate(gx)

    return _result(out, (x,), back)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# gradient checking


def analytic_grads(fn: Callable[[dict], Var], params: Mapping[str, np.ndarray]) -> tuple[float, dict]:
    """Evaluate ``fn`` on fresh leaf vars and return (value, partials)."""
    leaves = {k: Var(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
    out = fn(leaves)
    backward(out)
    partials = {k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)) for k, leaf in leaves.items()}
    return float(out.value), partials


def numeric_grads(fn: Callable[[dict], Var], params: Mapping[str, np.ndarray], step: float = 1e-5) -> dict:
    """Central-difference gradient of a scalar ``fn``."""
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = _scalar(fn(work))
            flat[i] = orig - step
            lo = _scalar(fn(work))
            flat[i] = orig
            g.reshape(-1)[i] = (hi - lo) / (2 * step)
        grads[name] = g
    return grads


def _scalar(v) -> float:
    val = float(as_var(v).value)
    if not np.isfinite(val):
        raise FloatingPointError("non-finite loss during gradient check")
    return val


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """|a - n| / max(|a|, |n|, 1e-8) with Euclidean norms over the tensor."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(diff / scale)


def grad_check(
    fn: Callable[[dict], Var],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    details: bool = False,
):
    """Compare reverse-mode gradients to central differences.

    Returns the max relative error over parameter tensors, or with
    ``details=True`` a dict of per-parameter errors as well.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ValueError(f"step {step} outside [1e-6, 1e-4]")
    value, analytic = analytic_grads(fn, params)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite loss during gradient check")
    numeric = numeric_grads(fn, params, step)
    errors = {k: relative_error(analytic[k], numeric[k]) for k in params}
    worst = max(errors.values()) if errors else 0.0
    return (worst, errors) if details else worst
