"""Feature grid: voxel-center layout and trilinear sampling properties."""

import numpy as np
import pytest

from holovox.engine import Tensor, grad_check, tsum
from holovox.voxel_grid import (
    FeatureGrid,
    GridError,
    grid_point_coords,
    sample_trilinear,
)


def _grid(rng, channels=3, s=4, dtype=np.float64):
    data = rng.normal(size=(channels, s, s, s)).astype(dtype)
    return FeatureGrid(Tensor(data))


def test_grid_point_coords_s2():
    g = FeatureGrid.zeros(1, 2)
    coords = grid_point_coords(g)
    per_axis = np.unique(coords[:, 0])
    np.testing.assert_allclose(per_axis, [-0.5, 0.5])
    assert coords.shape == (8, 3)


def test_grid_point_coords_s1():
    g = FeatureGrid.zeros(1, 1)
    np.testing.assert_allclose(grid_point_coords(g), [[0.0, 0.0, 0.0]])


def test_grid_point_coords_s16_spacing_exact():
    g = FeatureGrid.zeros(1, 16)
    coords = grid_point_coords(g)
    xs = np.unique(coords[:, 0])
    assert xs.size == 16
    np.testing.assert_array_equal(np.diff(xs), np.full(15, 2.0 / 16.0))


def test_sample_at_voxel_center_is_exact():
    rng = np.random.default_rng(0)
    g = _grid(rng, channels=2, s=4)
    coords = grid_point_coords(g)
    for flat_idx in (0, 13, 63):
        got = sample_trilinear(g, coords[flat_idx]).data
        m, n, o = np.unravel_index(flat_idx, (4, 4, 4))
        np.testing.assert_allclose(got, g.data.data[:, m, n, o], atol=1e-12)


def test_sample_midpoint_is_mean_of_neighbours():
    rng = np.random.default_rng(1)
    g = _grid(rng, channels=2, s=4)
    coords = grid_point_coords(g).reshape(4, 4, 4, 3)
    p = 0.5 * (coords[1, 2, 0] + coords[2, 2, 0])
    got = sample_trilinear(g, p).data
    expected = 0.5 * (g.data.data[:, 1, 2, 0] + g.data.data[:, 2, 2, 0])
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_sample_matches_corner_weight_oracle():
    rng = np.random.default_rng(2)
    g = _grid(rng, channels=3, s=5)
    pts = rng.uniform(-1.3, 1.3, size=(1000, 3))
    got = sample_trilinear(g, pts).data

    lo, _ = g.extent
    cell = g.cell_size
    vox = (pts - lo) / cell - 0.5
    data = g.data.data
    ref = np.zeros_like(got)
    for i, q in enumerate(vox):
        qc = np.clip(q, 0.0, 4.0)
        i0 = np.minimum(np.floor(qc).astype(int), 3)
        t = qc - i0
        acc = np.zeros(3)
        for bd in range(2):
            for bh in range(2):
                for bw in range(2):
                    w = ((t[0] if bd else 1 - t[0]) * (t[1] if bh else 1 - t[1])
                         * (t[2] if bw else 1 - t[2]))
                    acc += w * data[:, i0[0] + bd, i0[1] + bh, i0[2] + bw]
        ref[i] = acc
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_sample_in_convex_hull_of_corners():
    rng = np.random.default_rng(3)
    g = _grid(rng, channels=1, s=4)
    data = g.data.data[0]
    pts = rng.uniform(-1.0, 1.0, size=(500, 3))
    got = sample_trilinear(g, pts).data[:, 0]
    assert np.all(got <= data.max() + 1e-12)
    assert np.all(got >= data.min() - 1e-12)


def test_piecewise_multilinear_within_cell():
    # Fit the unique multilinear function through one cell's 8 corners and
    # compare at interior points.
    rng = np.random.default_rng(4)
    g = _grid(rng, channels=1, s=4)
    coords = grid_point_coords(g).reshape(4, 4, 4, 3)
    c000 = coords[1, 1, 1]
    cell = g.cell_size

    corners = np.array([g.data.data[0, 1 + a, 1 + b, 1 + c]
                        for a in range(2) for b in range(2) for c in range(2)])

    def multilinear(p):
        t = (p - c000) / cell
        val = 0.0
        k = 0
        for a in range(2):
            for b in range(2):
                for c in range(2):
                    w = ((t[0] if a else 1 - t[0]) * (t[1] if b else 1 - t[1])
                         * (t[2] if c else 1 - t[2]))
                    val += w * corners[k]
                    k += 1
        return val

    for _ in range(50):
        p = c000 + rng.uniform(0.05, 0.95, size=3) * cell
        got = sample_trilinear(g, p).data[0]
        assert abs(got - multilinear(p)) < 1e-6


def test_clamp_to_edge_outside_extent():
    rng = np.random.default_rng(5)
    g = _grid(rng, channels=2, s=4)
    far = sample_trilinear(g, np.array([[9.0, 9.0, 9.0]])).data[0]
    np.testing.assert_allclose(far, g.data.data[:, 3, 3, 3], atol=1e-12)
    near = sample_trilinear(g, np.array([[-9.0, -9.0, -9.0]])).data[0]
    np.testing.assert_allclose(near, g.data.data[:, 0, 0, 0], atol=1e-12)


def test_gradient_wrt_grid_data_away_from_boundaries():
    rng = np.random.default_rng(6)
    g = _grid(rng, channels=2, s=4)
    pts = rng.uniform(-0.8, 0.8, size=(12, 3))
    # nudge off cell boundaries in voxel space
    vox = (pts + 1.0) / g.cell_size - 0.5
    pts += np.where(np.abs(vox - np.round(vox)) < 0.05, 0.03, 0.0)

    def f(data: Tensor) -> Tensor:
        grid = FeatureGrid(data, extent=g.extent)
        return tsum(sample_trilinear(grid, pts) ** 2.0)

    rep = grad_check(f, Tensor(g.data.data.copy()), step=1e-5, tolerance=1e-5)
    assert rep.passed, rep.summary()


def test_invalid_grid_shapes_rejected():
    with pytest.raises(GridError):
        FeatureGrid(Tensor(np.zeros((3, 4, 4))))
    with pytest.raises(GridError):
        FeatureGrid(Tensor(np.zeros((3, 4, 4, 5))))
    with pytest.raises(GridError):
        FeatureGrid(Tensor(np.zeros((3, 4, 4, 4))), extent=(1.0, -1.0))
