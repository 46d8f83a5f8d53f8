import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spacetime import diffmath as dm
from spacetime.neighbor_relation import (
    EdgeLogits,
    aggregate_neighbors,
    aggregation_weights,
    init_edge_logits,
    init_topology_logits,
    topology_counts,
)
from spacetime.video_graph import neighborhood_indices


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_topology_3x3():
    counts = topology_counts((3, 3)).reshape(3, 3)
    np.testing.assert_array_equal(counts, [[1, 2, 1], [2, 3, 2], [1, 2, 1]])
    w = init_topology_logits((3, 3)).weights.reshape(3, 3)
    np.testing.assert_allclose(w, counts / 15, atol=1e-12)
    assert abs(w[1, 1] - 0.2) < 1e-12


def test_topology_line_window_is_uniform():
    np.testing.assert_allclose(init_topology_logits((1, 3)).weights, [1 / 3] * 3, atol=1e-12)
    np.testing.assert_allclose(init_topology_logits((3, 1)).weights, [1 / 3] * 3, atol=1e-12)


def test_topology_5x5():
    counts = topology_counts((5, 5))
    assert counts.sum() == 35
    assert counts[12] == 3
    assert (counts == 2).sum() == 8 and (counts == 1).sum() == 16


def test_edge_variants():
    rng = np.random.default_rng(0)
    assert not init_edge_logits((3, 3), "fixed").learnable
    assert init_edge_logits((3, 3), "topology-init").learnable
    r = init_edge_logits((3, 3), "random-init", rng)
    assert r.learnable and r.logits.shape == (9,)
    with pytest.raises(ValueError):
        init_edge_logits((3, 3), "learned")
    with pytest.raises(ValueError):
        EdgeLogits(np.array([np.inf] * 9), (3, 3))


def test_uniform_logits_average_interior_neighbors():
    rng = np.random.default_rng(1)
    emb = _unit(rng, 49, 8)
    table = neighborhood_indices((7, 7), (3, 3))
    out = aggregate_neighbors(emb, EdgeLogits(np.zeros(9), (3, 3)), table, renormalize=False).value
    node = 24
    np.testing.assert_allclose(out[node], emb[table.index[node]].mean(axis=0), atol=1e-12)


def test_saturated_center_is_identity():
    rng = np.random.default_rng(2)
    emb = _unit(rng, 49, 8)
    logits = np.zeros(9)
    logits[4] = 40.0
    out = aggregate_neighbors(emb, EdgeLogits(logits, (3, 3)), neighborhood_indices((7, 7), (3, 3))).value
    np.testing.assert_allclose(out, emb, atol=1e-9)


def test_corner_masked_topology_weights():
    table = neighborhood_indices((7, 7), (3, 3))
    w = aggregation_weights(init_topology_logits((3, 3)).logits, table).value[0]
    np.testing.assert_allclose(w[[4, 5, 7, 8]], [0.375, 0.25, 0.25, 0.125], atol=1e-12)
    assert w[[0, 1, 2, 3, 6]].sum() == 0.0


def test_unit_window_is_identity():
    emb = _unit(np.random.default_rng(3), 12, 5)
    out = aggregate_neighbors(emb, init_topology_logits((1, 1)), neighborhood_indices((3, 4), (1, 1))).value
    np.testing.assert_allclose(out, emb, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.sampled_from([(1, 3), (3, 1), (3, 3), (5, 5)]), st.integers(0, 1000))
def test_weights_are_distributions_and_rows_unit(rows, cols, window, seed):
    rng = np.random.default_rng(seed)
    table = neighborhood_indices((rows, cols), window)
    logits = rng.normal(size=window[0] * window[1])
    w = aggregation_weights(logits, table).value
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
    out = aggregate_neighbors(_unit(rng, rows * cols, 6), EdgeLogits(logits, window), table).value
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_transposing_grid_commutes_with_aggregation():
    # relabel nodes by transposing the grid; the 3x1 window becomes 1x3
    rng = np.random.default_rng(4)
    rows, cols = 4, 5
    emb = _unit(rng, rows * cols, 6)
    logits = rng.normal(size=3)
    out = aggregate_neighbors(emb, EdgeLogits(logits, (3, 1)), neighborhood_indices((rows, cols), (3, 1))).value
    perm = np.arange(rows * cols).reshape(rows, cols).T.ravel()
    out_t = aggregate_neighbors(emb[perm], EdgeLogits(logits, (1, 3)), neighborhood_indices((cols, rows), (1, 3))).value
    np.testing.assert_allclose(out_t, out[perm], atol=1e-12)


def test_stacked_frames_match_per_frame():
    rng = np.random.default_rng(5)
    table = neighborhood_indices((3, 3), (3, 3))
    edge = EdgeLogits(rng.normal(size=9), (3, 3))
    a, b = _unit(rng, 9, 4), _unit(rng, 9, 4)
    both = aggregate_neighbors(np.vstack([a, b]), edge, table).value
    np.testing.assert_allclose(both[:9], aggregate_neighbors(a, edge, table).value, atol=1e-15)
    np.testing.assert_allclose(both[9:], aggregate_neighbors(b, edge, table).value, atol=1e-15)


def test_gradients_reach_logits_only_when_learnable():
    rng = np.random.default_rng(6)
    table = neighborhood_indices((3, 3), (3, 3))
    emb = _unit(rng, 9, 4)
    target = rng.normal(size=(1, 9 * 4))

    def loss(logits):
        out = aggregate_neighbors(emb, logits, table)
        return dm.matmul(target, _column(out))

    fixed = init_edge_logits((3, 3), "fixed")
    out = loss(fixed)
    assert not out.requires_grad  # constant logits: nothing to differentiate

    lv = dm.Var(fixed.logits, requires_grad=True)
    dm.backward(_scalar(loss(lv)))
    assert lv.grad is not None and np.abs(lv.grad).sum() > 0


def _column(x):
    shape = x.value.shape

    def back(g):
        x._accumulate(g.reshape(shape))

    return dm._result(x.value.reshape(-1, 1), [x], back)


def _scalar(x):
    def back(g):
        x._accumulate(np.full(x.value.shape, float(g)))

    return dm._result(np.asarray(x.value.sum()), [x], back)
