"""Pinhole cameras, world/camera transforms and per-pixel rays.

Conventions (fixed here and mirrored by the dataset format so data and
code cannot drift): the extrinsic is a 4x4 world-to-camera matrix, the
camera looks down +z, pixel (0, 0) is the top-left corner of the image
with +u right and +v down, and pixel centers sit at half-integers.
Cameras are plain constants; nothing here participates in autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Camera",
    "Ray",
    "GeometryError",
    "project",
    "pixel_ray",
    "pixel_rays",
    "camera_center",
    "view_direction",
    "look_at",
    "ring_cameras",
]


class GeometryError(Exception):
    pass


@dataclass(frozen=True)
class Camera:
    """World-to-camera extrinsic plus pinhole intrinsics in pixels."""

    extrinsic: np.ndarray  # (4, 4) row-major, world -> camera
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        ext = np.asarray(self.extrinsic, dtype=np.float64)
        if ext.shape != (4, 4):
            raise GeometryError(f"extrinsic must be 4x4, got {ext.shape}")
        object.__setattr__(self, "extrinsic", ext)
        r = ext[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
            raise GeometryError("extrinsic rotation block is not orthonormal")
        if np.linalg.det(r) < 0.0:
            raise GeometryError("extrinsic rotation block has negative determinant")
        if not np.allclose(ext[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise GeometryError("extrinsic bottom row must be (0, 0, 0, 1)")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise GeometryError("focal lengths must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:3, 3]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray     # (3,) world units
    direction: np.ndarray  # (3,) unit norm

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise GeometryError(f"ray direction has norm {np.linalg.norm(d)}, expected 1")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, s) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(s), self.direction)


def project(camera: Camera, x_world: np.ndarray):
    """Project world points to continuous pixel coordinates.

    Returns (u, v, depth); depth is camera-space z, positive iff the
    point is in front of the camera.  Broadcasts over leading axes of
    ``x_world`` (..., 3).
    """
    x = np.asarray(x_world, dtype=np.float64)
    xc = x @ camera.rotation.T + camera.translation
    z = xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * xc[..., 0] / z + camera.cx
        v = camera.fy * xc[..., 1] / z + camera.cy
    return u, v, z


def pixel_ray(camera: Camera, u: float, v: float) -> Ray:
    """World-space ray through continuous pixel coordinate (u, v)."""
    if not (0.0 <= u < camera.width and 0.0 <= v < camera.height):
        raise GeometryError(
            f"pixel ({u}, {v}) outside image {camera.width}x{camera.height}")
    d_cam = np.array([(u - camera.cx) / camera.fx,
                      (v - camera.cy) / camera.fy,
                      1.0])
    d_world = camera.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=camera_center(camera), direction=d_world)


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rays through all pixel centers; returns origins (N, 3), dirs (N, 3).

    Row-major pixel order: index n = row * width + col, ray through
    (col + 0.5, row + 0.5).
    """
    cols, rows = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    u = cols.ravel() + 0.5
    v = rows.ravel() + 0.5
    d_cam = np.stack([(u - camera.cx) / camera.fx,
                      (v - camera.cy) / camera.fy,
                      np.ones_like(u)], axis=1)
    d_world = d_cam @ camera.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera_center(camera), d_world.shape).copy()
    return origins, d_world


def camera_center(camera: Camera) -> np.ndarray:
    """World position of the optical center: -R^T t."""
    return -(camera.rotation.T @ camera.translation)


def view_direction(camera: Camera, x_world: np.ndarray) -> np.ndarray:
    """Unit vector(s) from world point(s) toward the camera center."""
    x = np.asarray(x_world, dtype=np.float64)
    d = camera_center(camera) - x
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def look_at(eye, target, up=(0.0, 1.0, 0.0), *, fx: float, fy: float,
            cx: float, cy: float, width: int, height: int) -> Camera:
    """Camera at ``eye`` looking toward ``target`` with the given intrinsics."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise GeometryError("look_at: eye and target coincide")
    z = fwd / n
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # forward parallel to up; pick another up
        up = np.array([1.0, 0.0, 0.0])
        x = np.cross(z, up)
        nx = np.linalg.norm(x)
    x /= nx
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    ext = np.eye(4)
    ext[:3, :3] = r
    ext[:3, 3] = -r @ eye
    return Camera(extrinsic=ext, fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)


def ring_cameras(n_views: int, *, radius: float, elevation: float, image_size: int,
                 focal: float, target=(0.0, 0.0, 0.0), phase: float = 0.0) -> list[Camera]:
    """Cameras on a horizontal ring around ``target`` (fly-around)."""
    cams = []
    c = image_size / 2.0
    for k in range(n_views):
        az = phase + 2.0 * np.pi * k / n_views
        eye = np.array([radius * np.cos(elevation) * np.cos(az),
                        radius * np.sin(elevation),
                        radius * np.cos(elevation) * np.sin(az)])
        cams.append(look_at(eye + np.asarray(target), target, fx=focal, fy=focal,
                            cx=c, cy=c, width=image_size, height=image_size))
    return cams
