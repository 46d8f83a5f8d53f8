import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spacetime.video_graph import (
    ABSENT,
    Clip,
    load_clip_dir,
    neighborhood_indices,
    patch_origins,
    sample_node_grid,
    save_clip_dir,
)


def test_reference_grid_gives_49_nodes():
    frame = np.random.default_rng(0).uniform(size=(256, 256, 3))
    grid = sample_node_grid(frame, (7, 7), 64)
    assert grid.num_nodes == 49
    assert grid.patches.shape == (49, 64, 64, 3)
    y, x = grid.origins[10]
    np.testing.assert_array_equal(grid.patches[10], frame[y : y + 64, x : x + 64])


def test_single_node_covers_frame():
    frame = np.random.default_rng(1).uniform(size=(64, 64, 3))
    grid = sample_node_grid(frame, (1, 1), 64)
    np.testing.assert_array_equal(grid.patches[0], frame)


def test_overlapping_grid_in_bounds_with_even_interior_spacing():
    grid = sample_node_grid(np.zeros((128, 128, 3)), (4, 4), 48)
    assert grid.num_nodes == 16
    assert (grid.origins >= 0).all() and (grid.origins + 48 <= 128).all()
    cx = grid.centers[:4, 1]
    # unclamped centers sit at 16, 48, 80, 112; the outer two are pulled in to fit
    np.testing.assert_array_equal(cx, [24, 48, 80, 104])
    assert cx[2] - cx[1] == 32


def test_patches_are_copies():
    frame = np.zeros((16, 16, 1))
    grid = sample_node_grid(frame, (2, 2), 8)
    frame[:] = 1.0
    assert grid.patches.max() == 0.0


def test_patch_larger_than_frame_rejected():
    with pytest.raises(ValueError):
        sample_node_grid(np.zeros((32, 32, 3)), (2, 2), 40)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.integers(1, 12), st.integers(1, 64))
def test_origins_always_fit(dim, grid_dim, patch):
    if patch > dim:
        return
    o = patch_origins(dim, grid_dim, patch)
    assert (o >= 0).all() and (o + patch <= dim).all()
    assert (np.diff(o) >= 0).all()


def test_interior_node_has_nine_slots():
    table = neighborhood_indices((7, 7), (3, 3))
    node = 3 * 7 + 3
    assert table.present[node].sum() == 9
    assert table.index[node, table.center_slot] == node


def test_unit_window_is_self():
    table = neighborhood_indices((4, 5), (1, 1))
    np.testing.assert_array_equal(table.index[:, 0], np.arange(20))


def test_corner_node_slots():
    table = neighborhood_indices((7, 7), (3, 3))
    row = table.index[0]
    assert (row == ABSENT).sum() == 5
    # row-major window: slots 4 (self), 5 (right), 7 (down), 8 (down-right)
    assert [row[4], row[5], row[7], row[8]] == [0, 1, 7, 8]


def test_even_window_rejected():
    with pytest.raises(ValueError):
        neighborhood_indices((7, 7), (2, 3))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.sampled_from([1, 3, 5]), st.sampled_from([1, 3, 5]))
def test_neighbor_relation_reflects(rows, cols, wr, wc):
    table = neighborhood_indices((rows, cols), (wr, wc))
    slot_of = {tuple(o): j for j, o in enumerate(table.offsets)}
    for i in range(rows * cols):
        for j, nb in enumerate(table.index[i]):
            if nb == ABSENT:
                continue
            back = slot_of[tuple(-table.offsets[j])]
            assert table.index[nb, back] == i
    expected = sum(max(0, rows - abs(dr)) * max(0, cols - abs(dc)) for dr, dc in table.offsets)
    assert table.present.sum() == expected


def test_clip_dir_round_trip(tmp_path):
    frames = np.round(np.random.default_rng(2).uniform(size=(3, 8, 8, 3)) * 255) / 255
    save_clip_dir(Clip(frames), tmp_path / "c")
    names = sorted(p.name for p in (tmp_path / "c").iterdir())
    assert names == ["frame_000.png", "frame_001.png", "frame_002.png"]
    np.testing.assert_array_equal(load_clip_dir(tmp_path / "c").frames, frames)


def test_clip_validation():
    with pytest.raises(ValueError):
        Clip(np.full((2, 4, 4, 3), 1.5))
    with pytest.raises(ValueError):
        Clip(np.zeros((4, 4, 3)))
