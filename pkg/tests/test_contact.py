import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contact_flow.contact import (
    ContactSet,
    farthest_point_sample,
    hidden_surface_indices,
    nearest_occupied,
    sample_contacts,
)
from contact_flow.voxelcore import (
    BinaryGrid,
    Box,
    PointCloud,
    index_to_point,
    point_to_index,
    surface_mask,
    voxelize_primitive,
)


def half_mask(N, visible_below=0.5):
    ax = (np.arange(N) + 0.5) / N
    return BinaryGrid(np.broadcast_to((ax < visible_below)[:, None, None], (N, N, N)).copy())


def fps_oracle(points: np.ndarray, k: int, start: int) -> list[int]:
    """Independent quadratic-scan farthest point sampling."""
    chosen = [start]
    while len(chosen) < k:
        best_idx, best_d = -1, -1.0
        for i in range(len(points)):
            d = min(np.sum((points[i] - points[j]) ** 2) for j in chosen)
            if d > best_d:
                best_d, best_idx = d, i
        chosen.append(best_idx)
    return chosen


# ---------------------------------------------------------------------------
# sample_contacts
# ---------------------------------------------------------------------------


def test_no_visibility_samples_from_full_surface():
    grid = voxelize_primitive(Box((0.25, 0.25, 0.25), (0.75, 0.75, 0.75)), 8)
    none_visible = BinaryGrid(np.zeros((8, 8, 8), dtype=bool))
    surface_points = {
        tuple(p) for p in index_to_point(np.argwhere(surface_mask(grid)), 8)
    }
    contacts = sample_contacts(grid, none_visible, 5, seed=0)
    assert all(tuple(p) in surface_points for p in contacts.points)


def test_exhaustive_draw_returns_every_hidden_surface_voxel():
    grid = voxelize_primitive(Box((0.25, 0.25, 0.25), (0.75, 0.75, 0.75)), 8)
    vis = half_mask(8)
    hidden = hidden_surface_indices(grid, vis)
    contacts = sample_contacts(grid, vis, hidden.shape[0], seed=3)
    got = {tuple(p) for p in contacts.points}
    want = {tuple(p) for p in index_to_point(hidden, 8)}
    assert got == want


def test_contacts_confined_to_hidden_half():
    grid = voxelize_primitive(Box((0.125, 0.25, 0.25), (0.875, 0.75, 0.75)), 16)
    vis = half_mask(16)
    contacts = sample_contacts(grid, vis, 10, seed=7)
    assert (contacts.points[:, 0] > 0.5).all()
    # and they are surface voxel centers of the ground truth
    surf = surface_mask(grid)
    for p in contacts.points:
        assert surf[tuple(point_to_index(p, 16))]


def test_empty_hidden_surface_raises():
    grid = voxelize_primitive(Box((0.1, 0.1, 0.1), (0.4, 0.4, 0.4)), 8)
    all_visible = BinaryGrid(np.ones((8, 8, 8), dtype=bool))
    with pytest.raises(ValueError, match="contacts cannot complement vision"):
        sample_contacts(grid, all_visible, 3, seed=0)


def test_oversampling_hidden_surface_raises():
    grid = voxelize_primitive(Box((0.25, 0.25, 0.25), (0.75, 0.75, 0.75)), 8)
    vis = half_mask(8)
    available = hidden_surface_indices(grid, vis).shape[0]
    with pytest.raises(ValueError):
        sample_contacts(grid, vis, available + 1, seed=0)


def test_sample_contacts_deterministic():
    grid = voxelize_primitive(Box((0.25, 0.25, 0.25), (0.75, 0.75, 0.75)), 16)
    vis = half_mask(16)
    a = sample_contacts(grid, vis, 6, seed=11)
    b = sample_contacts(grid, vis, 6, seed=11)
    assert np.array_equal(a.points, b.points)


# ---------------------------------------------------------------------------
# farthest_point_sample
# ---------------------------------------------------------------------------


def _seed_with_start(m, want_start):
    for seed in range(1000):
        if int(np.random.Generator(np.random.PCG64(seed)).integers(m)) == want_start:
            return seed
    raise AssertionError("no seed found")


def test_fps_collinear_extremes():
    pts = PointCloud(np.array([[0.0, 0, 0], [0.25, 0, 0], [0.5, 0, 0], [0.75, 0, 0]]))
    seed = _seed_with_start(4, 0)
    out = farthest_point_sample(pts, 2, seed=seed)
    got = {tuple(p) for p in out.points}
    assert got == {(0.0, 0.0, 0.0), (0.75, 0.0, 0.0)}


def test_fps_all_points_when_k_equals_size():
    rng = np.random.Generator(np.random.PCG64(1))
    pts = PointCloud(rng.random((9, 3)))
    out = farthest_point_sample(pts, 9, seed=5)
    got = {tuple(p) for p in out.points}
    assert got == {tuple(p) for p in pts.points}


def test_fps_rejects_oversized_k():
    pts = PointCloud(np.zeros((3, 3)) + 0.5)
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 4, seed=0)


@given(st.integers(0, 2**31 - 1))
def test_fps_matches_quadratic_oracle(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    pts = rng.random((64, 3))
    out = farthest_point_sample(PointCloud(pts), 8, seed=seed)
    start = int(np.where((pts == out.points[0]).all(axis=1))[0][0])
    want = fps_oracle(pts, 8, start)
    np.testing.assert_array_equal(out.points, pts[want])


def test_fps_each_pick_maximizes_min_distance_stepwise():
    rng = np.random.Generator(np.random.PCG64(17))
    pts = rng.random((40, 3))
    out = farthest_point_sample(PointCloud(pts), 6, seed=3)
    idx = [int(np.where((pts == p).all(axis=1))[0][0]) for p in out.points]
    for step in range(1, 6):
        chosen = idx[:step]
        picked = idx[step]
        d_picked = min(np.sum((pts[picked] - pts[j]) ** 2) for j in chosen)
        for other in range(len(pts)):
            d_other = min(np.sum((pts[other] - pts[j]) ** 2) for j in chosen)
            assert d_picked >= d_other - 1e-15


# ---------------------------------------------------------------------------
# nearest_occupied
# ---------------------------------------------------------------------------


def test_nearest_occupied_exact_center_hit():
    data = np.zeros((8, 8, 8), dtype=bool)
    data[2, 3, 4] = True
    data[6, 6, 6] = True
    grid = BinaryGrid(data)
    p = index_to_point(np.array([2, 3, 4]), 8)
    assert nearest_occupied(grid, p) == (2, 3, 4)


def test_nearest_occupied_single_voxel_always_wins():
    data = np.zeros((8, 8, 8), dtype=bool)
    data[5, 1, 7] = True
    grid = BinaryGrid(data)
    for p in [(0, 0, 0), (1, 1, 1), (0.9, 0.2, 0.4)]:
        assert nearest_occupied(grid, p) == (5, 1, 7)


def test_nearest_occupied_empty_grid_raises():
    with pytest.raises(ValueError):
        nearest_occupied(BinaryGrid(np.zeros((4, 4, 4), dtype=bool)), (0.5, 0.5, 0.5))


def test_nearest_occupied_tie_breaks_lexicographically():
    data = np.zeros((4, 4, 4), dtype=bool)
    data[0, 1, 1] = True
    data[2, 1, 1] = True  # both at distance 1 voxel from the midpoint
    grid = BinaryGrid(data)
    p = index_to_point(np.array([1, 1, 1]), 4)
    assert nearest_occupied(grid, p) == (0, 1, 1)


@given(st.integers(0, 2**31 - 1))
def test_nearest_occupied_matches_exhaustive_scan(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    data = rng.random((6, 6, 6)) < 0.3
    if not data.any():
        data[3, 3, 3] = True
    grid = BinaryGrid(data)
    p = rng.random(3)
    got = nearest_occupied(grid, p)
    best, best_d = None, np.inf
    for idx in np.argwhere(data):
        d = float(np.sum((index_to_point(idx, 6) - p) ** 2))
        if d < best_d - 1e-15:
            best, best_d = tuple(idx), d
    assert np.sum((index_to_point(np.array(got), 6) - p) ** 2) == pytest.approx(best_d, abs=1e-12)


# ---------------------------------------------------------------------------
# ContactSet plumbing
# ---------------------------------------------------------------------------


def test_contact_set_json_roundtrip(tmp_path):
    cs = ContactSet(np.array([[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]]), provenance="external file")
    cs.save(tmp_path / "c.json")
    raw = json.loads((tmp_path / "c.json").read_text())
    assert raw["provenance"] == "external file"
    loaded = ContactSet.load(tmp_path / "c.json")
    np.testing.assert_array_equal(loaded.points, cs.points)


def test_contact_set_rejects_out_of_cube_points():
    with pytest.raises(ValueError):
        ContactSet(np.array([[1.2, 0.5, 0.5]]))


def test_contact_set_rejects_empty():
    with pytest.raises(ValueError):
        ContactSet(np.zeros((0, 3)))
