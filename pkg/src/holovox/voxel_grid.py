"""Feature voxel grids and continuous trilinear lookup.

A grid stores a (channels, S, S, S) tensor of latent features occupying
an axis-aligned world cube (default [-1, 1]^3, the extent every scene is
normalized into).  Sampling outside the voxel-center lattice clamps to
the edge so rays entering the cube see no density jump at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, sample_trilinear as _sample_trilinear_raw

__all__ = ["FeatureGrid", "GridError", "grid_point_coords", "sample_trilinear",
           "world_to_voxel"]


class GridError(Exception):
    pass


DEFAULT_EXTENT = (-1.0, 1.0)


@dataclass
class FeatureGrid:
    """d_V-channel S^3 lattice of latent feature vectors."""

    data: Tensor                      # (channels, S, S, S)
    extent: tuple[float, float] = DEFAULT_EXTENT

    def __post_init__(self):
        if not isinstance(self.data, Tensor):
            self.data = Tensor(self.data)
        if self.data.ndim != 4:
            raise GridError(f"grid data must be (channels, S, S, S), got {self.data.shape}")
        c, s1, s2, s3 = self.data.shape
        if not (s1 == s2 == s3):
            raise GridError(f"grid must be cubic, got spatial dims {(s1, s2, s3)}")
        lo, hi = self.extent
        if not hi > lo:
            raise GridError(f"invalid extent {self.extent}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def resolution(self) -> int:
        return self.data.shape[1]

    @property
    def cell_size(self) -> float:
        lo, hi = self.extent
        return (hi - lo) / self.resolution

    @classmethod
    def zeros(cls, channels: int, resolution: int, dtype=np.float32,
              extent: tuple[float, float] = DEFAULT_EXTENT) -> "FeatureGrid":
        return cls(Tensor(np.zeros((channels,) + (resolution,) * 3, dtype=dtype)),
                   extent=extent)


def grid_point_coords(grid: FeatureGrid) -> np.ndarray:
    """World coordinates of all voxel centers, shape (S^3, 3).

    Element (m, n, o) sits at extent_min + (index + 0.5) * cell_size per
    axis; flat ordering is row-major over (m, n, o).
    """
    lo, _ = grid.extent
    s = grid.resolution
    cell = grid.cell_size
    centers_1d = lo + (np.arange(s) + 0.5) * cell
    mm, nn, oo = np.meshgrid(centers_1d, centers_1d, centers_1d, indexing="ij")
    return np.stack([mm, nn, oo], axis=-1).reshape(-1, 3)


def world_to_voxel(grid: FeatureGrid, points: np.ndarray) -> np.ndarray:
    """Map world positions to continuous voxel-center coordinates."""
    lo, _ = grid.extent
    return (np.asarray(points, dtype=np.float64) - lo) / grid.cell_size - 0.5


def sample_trilinear(grid: FeatureGrid, points) -> Tensor:
    """Trilinearly interpolate grid features at world points (N, 3) -> (N, d_V).

    Accepts a single point (3,) as well.  Clamp-to-edge outside the
    voxel-center lattice.  Differentiable w.r.t. the grid data and, when
    ``points`` is a Tensor, w.r.t. the points.
    """
    single = False
    if isinstance(points, Tensor):
        if points.ndim == 1:
            points = points.reshape((1, 3))
            single = True
        coords = (points - grid.extent[0]) / grid.cell_size - 0.5
    else:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[None]
            single = True
        coords = world_to_voxel(grid, pts)
    out = _sample_trilinear_raw(grid.data, coords)
    if single:
        out = out.reshape((grid.channels,))
    return out
