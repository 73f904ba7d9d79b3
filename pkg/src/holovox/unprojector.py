"""Lifting posed frames into an auxiliary feature grid.

Every voxel center is projected into each source frame, picks up a
bilinearly sampled image feature there (or zeros when it falls behind
the camera or outside the image), and a small MLP turns each per-frame
observation into a non-negative weight and a mapped feature.  The voxel
descriptor is the weighted sum over frames, squashed with tanh so the
grid lands in [-1, 1] — the value range the diffusion model expects.
"""

from __future__ import annotations

import numpy as np

from .engine import (
    Conv2dLayer,
    Linear,
    Module,
    Tensor,
    as_tensor,
    concat,
    leaky_relu,
    reshape,
    softplus,
    tanh,
    transpose,
    tsum,
)
from .geometry import Camera, camera_center, project
from .voxel_grid import DEFAULT_EXTENT, FeatureGrid, grid_point_coords
from .engine.sampling import sample_bilinear

__all__ = [
    "ImageEncoder",
    "Accumulator",
    "UnprojectorError",
    "encode_frame",
    "encode_frames",
    "sample_frame_feature",
    "build_auxiliary_grid",
]

LEAKY_SLOPE = 0.01


class UnprojectorError(Exception):
    pass


class ImageEncoder(Module):
    """4-layer strided conv encoder: (3, H, W) -> (feat_dim, H/4, W/4)."""

    def __init__(self, rng: np.random.Generator, feat_dim: int = 32, dtype=np.float32):
        mid = max(feat_dim // 2, 8)
        self.conv1 = Conv2dLayer(3, mid, 3, rng, stride=1, padding=1, dtype=dtype)
        self.conv2 = Conv2dLayer(mid, feat_dim, 4, rng, stride=2, padding=1, dtype=dtype)
        self.conv3 = Conv2dLayer(feat_dim, feat_dim, 3, rng, stride=1, padding=1, dtype=dtype)
        self.conv4 = Conv2dLayer(feat_dim, feat_dim, 4, rng, stride=2, padding=1, dtype=dtype)
        self.feat_dim = feat_dim
        self.dtype = np.dtype(dtype)

    def __call__(self, images: Tensor) -> Tensor:
        """images: (B, 3, H, W) with H, W divisible by 4 -> (B, feat_dim, H/4, W/4)."""
        h = leaky_relu(self.conv1(images), LEAKY_SLOPE)
        h = leaky_relu(self.conv2(h), LEAKY_SLOPE)
        h = leaky_relu(self.conv3(h), LEAKY_SLOPE)
        return self.conv4(h)


class Accumulator(Module):
    """Per-(voxel, frame) MLP: [image feature; view direction] ->
    (softplus weight, mapped feature of width out_dim)."""

    def __init__(self, rng: np.random.Generator, feat_dim: int = 32, out_dim: int = 64,
                 hidden: int = 64, dtype=np.float32):
        self.trunk1 = Linear(feat_dim + 3, hidden, rng, dtype)
        self.trunk2 = Linear(hidden, hidden, rng, dtype)
        self.weight_head = Linear(hidden, 1, rng, dtype)
        self.feature_head = Linear(hidden, out_dim, rng, dtype)
        self.feat_dim = feat_dim
        self.out_dim = out_dim
        self.dtype = np.dtype(dtype)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x: (N, feat_dim + 3) -> weight (N, 1) >= 0, feature (N, out_dim)."""
        h = leaky_relu(self.trunk1(x), LEAKY_SLOPE)
        h = leaky_relu(self.trunk2(h), LEAKY_SLOPE)
        return softplus(self.weight_head(h)), self.feature_head(h)


def _as_image_tensor(image, dtype) -> Tensor:
    img = as_tensor(image) if not isinstance(image, Tensor) else image
    if img.ndim != 3 or img.shape[0] != 3:
        raise UnprojectorError(f"expected a (3, H, W) image, got shape {img.shape}")
    if img.data.dtype != dtype:
        img = Tensor(img.data.astype(dtype))
    return img


def encode_frames(encoder: ImageEncoder, images: Tensor) -> Tensor:
    if images.ndim != 4 or images.shape[1] != 3:
        raise UnprojectorError(f"expected (B, 3, H, W) images, got shape {images.shape}")
    if images.shape[2] % 4 or images.shape[3] % 4:
        raise UnprojectorError(f"image size {images.shape[2:]} not divisible by stride 4")
    return encoder(images)


def encode_frame(encoder: ImageEncoder, image) -> Tensor:
    """Encode one (3, H, W) image in [0, 1] to a (feat_dim, H/4, W/4) map."""
    img = _as_image_tensor(image, encoder.dtype)
    batched = encode_frames(encoder, reshape(img, (1,) + img.shape))
    return reshape(batched, batched.shape[1:])


def sample_frame_feature(feature_map: Tensor, camera: Camera, x_world) -> Tensor:
    """Project world points into the frame and bilinearly sample features.

    Points behind the camera or projecting outside the image bounds get
    the zero feature.  ``feature_map`` is (C, h, w) at 1/k the camera
    resolution for integer k; projections are scaled accordingly.
    """
    pts = np.asarray(x_world, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None]
    u, v, z = project(camera, pts)
    inside = (z > 0.0) & (u >= 0.0) & (u < camera.width) & (v >= 0.0) & (v < camera.height)

    _, fh, fw = feature_map.shape
    su = fw / camera.width
    sv = fh / camera.height
    # rows/cols in texel-center coordinates of the feature map
    safe_u = np.where(inside, u, 0.0)
    safe_v = np.where(inside, v, 0.0)
    coords = np.stack([safe_v * sv - 0.5, safe_u * su - 0.5], axis=1)
    feats = sample_bilinear(feature_map, coords)
    mask = as_tensor(inside[:, None].astype(feature_map.data.dtype), like=feats)
    out = feats * mask
    if single:
        out = reshape(out, (out.shape[1],))
    return out


def build_auxiliary_grid(frames, encoder: ImageEncoder, accumulator: Accumulator,
                         resolution: int,
                         extent: tuple[float, float] = DEFAULT_EXTENT) -> FeatureGrid:
    """Build the tanh-bounded auxiliary grid from (image, Camera) pairs.

    For each voxel center: gather the per-frame feature (zero outside
    the frustum), run the accumulator on [feature; view direction], and
    sum weight * mapped_feature over frames in the order given (fixed
    summation order keeps runs reproducible).  Returns a FeatureGrid
    with values in [-1, 1].
    """
    if len(frames) == 0:
        raise UnprojectorError("need at least one source frame")
    sizes = {(cam.width, cam.height) for _, cam in frames}
    shapes = {tuple(np.shape(img)) for img, _ in frames}
    if len(sizes) != 1 or len(shapes) != 1:
        raise UnprojectorError(f"mixed frame resolutions: images {shapes}, cameras {sizes}")

    dtype = encoder.dtype
    images = concat([reshape(_as_image_tensor(img, dtype), (1, 3) + np.shape(img)[1:])
                     for img, _ in frames], axis=0)
    fmaps = encode_frames(encoder, images)  # (J, C, h, w)

    template = FeatureGrid.zeros(1, resolution, dtype=dtype, extent=extent)
    coords = grid_point_coords(template)  # (S^3, 3)

    # Frame j's map is picked out of the batched encode with a one-hot row
    # selector: a (1, J) @ (J, C*h*w) matmul the tape differentiates.
    jj, c, fh, fw = fmaps.shape
    flat_maps = reshape(fmaps, (jj, c * fh * fw))
    total = None
    for j, (_, cam) in enumerate(frames):
        selector = np.zeros((1, jj), dtype=dtype)
        selector[0, j] = 1.0
        fmap_j = reshape(as_tensor(selector) @ flat_maps, (c, fh, fw))
        feats_j = sample_frame_feature(fmap_j, cam, coords)  # (S^3, C)
        views_j = (camera_center(cam) - coords)
        views_j /= np.linalg.norm(views_j, axis=1, keepdims=True)
        acc_in = concat([feats_j, as_tensor(views_j.astype(dtype))], axis=1)
        weight_j, mapped_j = accumulator(acc_in)  # (S^3, 1), (S^3, d_V)
        contrib = weight_j * mapped_j
        total = contrib if total is None else total + contrib

    bounded = tanh(total)  # (S^3, d_V)
    s = resolution
    vol = transpose(reshape(bounded, (s, s, s, accumulator.out_dim)), (3, 0, 1, 2))
    return FeatureGrid(vol, extent=extent)
