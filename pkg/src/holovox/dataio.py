"""Synthetic posed-video datasets, their on-disk format, and checkpoints.

Scenes are unions of 1-4 constant-density, constant-color ellipsoids
inside the [-1, 1]^3 cube.  Ground-truth images integrate the
emission-absorption transport exactly (piecewise-constant density along
a ray has a closed form), so they are an oracle fully independent of the
trainable renderer.  A second, adaptive integrator handles smooth
analytic fields for renderer-vs-reference comparisons.

Dataset layout:  scenes/<id>/frames/frame_%04d.png (8-bit RGB) plus
scenes/<id>/cameras.json (per frame: 16 extrinsic values row-major, 4
intrinsics, width, height) and scenes/<id>/scene.json (the generator's
ellipsoid parameters, kept for oracle-based tests).

Checkpoints are a single little-endian binary container: one version
byte, then length-prefixed records (kind, name, payload); tensor records
carry dtype/shape and raw bytes, JSON records carry UTF-8 text.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, pixel_rays, ring_cameras

__all__ = [
    "DataIOError",
    "DatasetError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "Ellipsoid",
    "SyntheticScene",
    "PosedVideo",
    "sample_scene",
    "gt_render",
    "reference_render_field",
    "generate_dataset",
    "load_dataset",
    "save_image",
    "load_image",
    "camera_to_dict",
    "camera_from_dict",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]


class DataIOError(Exception):
    pass


class DatasetError(DataIOError):
    pass


class CheckpointFormatError(DataIOError):
    pass


class CheckpointVersionError(DataIOError):
    pass


# -- synthetic scenes ---------------------------------------------------------


@dataclass(frozen=True)
class Ellipsoid:
    center: np.ndarray    # (3,)
    radii: np.ndarray     # (3,) semi-axes
    rotation: np.ndarray  # (3,3) world->body
    color: np.ndarray     # (3,) in [0,1]
    density: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        local = (pts - self.center) @ self.rotation.T / self.radii
        return np.einsum("...i,...i->...", local, local) <= 1.0

    def ray_span(self, origins: np.ndarray, dirs: np.ndarray):
        """Per-ray (t_in, t_out) against the ellipsoid; NaN when missed."""
        o = (origins - self.center) @ self.rotation.T / self.radii
        d = (dirs @ self.rotation.T) / self.radii
        a = np.einsum("ri,ri->r", d, d)
        b = 2.0 * np.einsum("ri,ri->r", o, d)
        c = np.einsum("ri,ri->r", o, o) - 1.0
        disc = b * b - 4.0 * a * c
        hit = disc > 0.0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t_in = np.where(hit, (-b - sq) / (2.0 * a), np.nan)
        t_out = np.where(hit, (-b + sq) / (2.0 * a), np.nan)
        return t_in, t_out


@dataclass(frozen=True)
class SyntheticScene:
    ellipsoids: tuple[Ellipsoid, ...]
    seed: int

    def density_color(self, pts: np.ndarray):
        """Analytic field: density sums over ellipsoids, color is the
        density-weighted mixture inside."""
        pts = np.asarray(pts, dtype=np.float64)
        sigma = np.zeros(pts.shape[:-1])
        weighted = np.zeros(pts.shape[:-1] + (3,))
        for e in self.ellipsoids:
            inside = e.contains(pts)
            sigma += np.where(inside, e.density, 0.0)
            weighted += np.where(inside[..., None], e.density * e.color, 0.0)
        color = np.where(sigma[..., None] > 0.0, weighted / np.maximum(sigma, 1e-300)[..., None], 0.0)
        return sigma, color


def sample_scene(rng: np.random.Generator, max_ellipsoids: int = 4,
                 density: float = 40.0) -> SyntheticScene:
    """1-4 randomly rotated ellipsoids, near-opaque, colors in [0.25, 1]."""
    n = int(rng.integers(1, max_ellipsoids + 1))
    parts = []
    for _ in range(n):
        center = rng.uniform(-0.45, 0.45, size=3)
        radii = rng.uniform(0.15, 0.45, size=3)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] *= -1.0
        color = rng.uniform(0.25, 1.0, size=3)
        parts.append(Ellipsoid(center=center, radii=radii, rotation=q.T,
                               color=color, density=density))
    return SyntheticScene(ellipsoids=tuple(parts), seed=-1)


def scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "seed": scene.seed,
        "ellipsoids": [
            {
                "center": e.center.tolist(),
                "radii": e.radii.tolist(),
                "rotation": e.rotation.reshape(-1).tolist(),
                "color": e.color.tolist(),
                "density": e.density,
            }
            for e in scene.ellipsoids
        ],
    }


def scene_from_dict(d: dict) -> SyntheticScene:
    parts = tuple(
        Ellipsoid(center=np.array(e["center"]), radii=np.array(e["radii"]),
                  rotation=np.array(e["rotation"]).reshape(3, 3),
                  color=np.array(e["color"]), density=float(e["density"]))
        for e in d["ellipsoids"]
    )
    return SyntheticScene(ellipsoids=parts, seed=int(d.get("seed", -1)))


def gt_render(scene: SyntheticScene, camera: Camera) -> np.ndarray:
    """Exact EA image of the scene: piecewise-constant density along each
    ray integrates in closed form segment by segment."""
    origins, dirs = pixel_rays(camera)
    n_rays = origins.shape[0]
    spans = [e.ray_span(origins, dirs) for e in scene.ellipsoids]

    # breakpoints per ray: every entry/exit, clipped at the camera
    bps = []
    for t_in, t_out in spans:
        bps.append(np.nan_to_num(t_in, nan=0.0))
        bps.append(np.nan_to_num(t_out, nan=0.0))
    bps = np.clip(np.stack(bps, axis=1), 0.0, None)
    bps.sort(axis=1)

    color = np.zeros((n_rays, 3))
    trans = np.ones(n_rays)
    segments = [(np.zeros(n_rays), bps[:, 0])]
    for i in range(bps.shape[1] - 1):
        segments.append((bps[:, i], bps[:, i + 1]))
    for t_a, t_b in segments:
        length = t_b - t_a
        active = length > 1e-12
        if not np.any(active):
            continue
        mid = origins + dirs * (0.5 * (t_a + t_b))[:, None]
        sigma, seg_color = scene.density_color(mid)
        absorb = 1.0 - np.exp(-sigma * length)
        color += (trans * absorb)[:, None] * seg_color
        trans *= np.exp(-sigma * length)
    img = color.T.reshape(3, camera.height, camera.width)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def reference_render_field(sigma_fn, color_fn, camera: Camera,
                           extent: tuple[float, float] = (-1.0, 1.0),
                           tol: float = 1e-5, n_start: int = 64,
                           max_doublings: int = 8) -> np.ndarray:
    """Adaptive sub-stepped EA integration of an arbitrary smooth field.

    Midpoint discretization of the transport integral, doubling the step
    count until the image stops changing by more than ``tol``; used as an
    independent reference for the trainable renderer.
    """
    from .renderer import ray_cube_clip

    origins, dirs = pixel_rays(camera)
    t0, t1 = ray_cube_clip(origins, dirs, extent[0], extent[1])

    def integrate(n: int) -> np.ndarray:
        delta = (t1 - t0) / n
        ts = t0[:, None] + (np.arange(n) + 0.5) * delta[:, None]
        pts = origins[:, None, :] + dirs[:, None, :] * ts[..., None]
        sigma = sigma_fn(pts.reshape(-1, 3)).reshape(ts.shape)
        col = color_fn(pts.reshape(-1, 3)).reshape(ts.shape + (3,))
        s = sigma * delta[:, None]
        cum = np.cumsum(s, axis=1)
        w = np.exp(-(cum - s)) - np.exp(-cum)
        return (w[..., None] * col).sum(axis=1)

    prev = integrate(n_start)
    n = n_start
    for _ in range(max_doublings):
        n *= 2
        cur = integrate(n)
        if np.max(np.abs(cur - prev)) < tol:
            prev = cur
            break
        prev = cur
    img = prev.T.reshape(3, camera.height, camera.width)
    return np.clip(img, 0.0, 1.0)


# -- posed-video dataset ------------------------------------------------------


@dataclass
class PosedVideo:
    scene_id: str
    frames: list[tuple[np.ndarray, Camera]]  # ((3,H,W) float32 in [0,1], camera)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise DatasetError(f"scene {self.scene_id!r}: needs >= 2 frames")
        sizes = {img.shape for img, _ in self.frames}
        if len(sizes) != 1:
            raise DatasetError(f"scene {self.scene_id!r}: mixed frame shapes {sizes}")

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def save_image(path, img: np.ndarray) -> None:
    """img: (3, H, W) float in [0, 1] -> 8-bit RGB PNG."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    byte = (arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(byte, mode="RGB").save(str(path), format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def camera_to_dict(camera: Camera) -> dict:
    return {
        "extrinsic": [float(v) for v in camera.extrinsic.reshape(-1)],
        "intrinsics": [camera.fx, camera.fy, camera.cx, camera.cy],
        "width": camera.width,
        "height": camera.height,
    }


def camera_from_dict(d: dict) -> Camera:
    ext = np.array(d["extrinsic"], dtype=np.float64).reshape(4, 4)
    fx, fy, cx, cy = d["intrinsics"]
    return Camera(extrinsic=ext, fx=fx, fy=fy, cx=cx, cy=cy,
                  width=int(d["width"]), height=int(d["height"]))


def generate_dataset(out_dir, n_scenes: int, n_frames: int, image_size: int,
                     seed: int) -> list[Path]:
    """Write a synthetic dataset; fully determined by the seed."""
    if n_frames < 2:
        raise DatasetError(f"need at least 2 frames per scene, got {n_frames}")
    root = Path(out_dir)
    scenes_dir = root / "scenes"
    try:
        scenes_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {root}: {exc}") from exc

    rng = np.random.default_rng(seed)
    written = []
    for i in range(n_scenes):
        scene_id = f"scene_{i:04d}"
        scene = SyntheticScene(sample_scene(rng).ellipsoids, seed=seed)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        elevation = rng.uniform(0.25, 0.45)
        cams = ring_cameras(n_frames, radius=2.7, elevation=elevation,
                            image_size=image_size, focal=image_size * 1.2,
                            phase=phase)
        sdir = scenes_dir / scene_id
        (sdir / "frames").mkdir(parents=True, exist_ok=True)
        frames_meta = []
        for j, cam in enumerate(cams):
            img = gt_render(scene, cam)
            fname = f"frames/frame_{j:04d}.png"
            save_image(sdir / fname, img)
            entry = {"file": fname}
            entry.update(camera_to_dict(cam))
            frames_meta.append(entry)
        (sdir / "cameras.json").write_text(
            json.dumps({"scene_id": scene_id, "frames": frames_meta},
                       indent=1, sort_keys=True))
        (sdir / "scene.json").write_text(
            json.dumps(scene_to_dict(scene), indent=1, sort_keys=True))
        written.append(sdir)
    return written


def load_dataset(path) -> list[PosedVideo]:
    root = Path(path)
    scenes_dir = root / "scenes"
    if not scenes_dir.is_dir():
        raise DatasetError(f"no scenes/ directory under {root}")
    videos = []
    for sdir in sorted(scenes_dir.iterdir()):
        if not sdir.is_dir():
            continue
        scene_id = sdir.name
        cam_file = sdir / "cameras.json"
        try:
            meta = json.loads(cam_file.read_text())
        except FileNotFoundError as exc:
            raise DatasetError(f"scene {scene_id!r}: missing cameras.json") from exc
        except json.JSONDecodeError as exc:
            raise DatasetError(f"scene {scene_id!r}: malformed cameras.json: {exc}") from exc
        frames = []
        for entry in meta.get("frames", []):
            try:
                cam = camera_from_dict(entry)
                img = load_image(sdir / entry["file"])
            except (KeyError, ValueError, OSError) as exc:
                raise DatasetError(f"scene {scene_id!r}: bad frame entry: {exc}") from exc
            frames.append((img, cam))
        if len(frames) < 2:
            raise DatasetError(f"scene {scene_id!r}: fewer than 2 frames")
        videos.append(PosedVideo(scene_id=scene_id, frames=frames))
    if not videos:
        raise DatasetError(f"no scenes found under {scenes_dir}")
    return videos


def load_scene_field(scene_dir) -> SyntheticScene:
    sdir = Path(scene_dir)
    try:
        return scene_from_dict(json.loads((sdir / "scene.json").read_text()))
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        raise DatasetError(f"scene {sdir.name!r}: bad scene.json: {exc}") from exc


# -- checkpoint container -----------------------------------------------------

CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_KIND_TENSOR = 0
_KIND_JSON = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write tensors + JSON metadata atomically (temp file then rename)."""
    path = Path(path)
    chunks = [struct.pack("<B", CHECKPOINT_VERSION)]

    def add_name(kind: int, name: str):
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<BI", kind, len(nb)))
        chunks.append(nb)

    if meta is not None:
        payload = json.dumps(meta, sort_keys=True).encode("utf-8")
        add_name(_KIND_JSON, "__meta__")
        chunks.append(struct.pack("<I", len(payload)))
        chunks.append(payload)
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointFormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        add_name(_KIND_TENSOR, name)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())

    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 1:
        raise CheckpointFormatError(f"{path}: empty checkpoint file")
    version = blob[0]
    if version > CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version} is newer than supported "
            f"version {CHECKPOINT_VERSION}")
    if version < 1:
        raise CheckpointFormatError(f"{path}: invalid version byte {version}")

    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    off = 1
    total = len(blob)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > total:
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        out = blob[off:off + n]
        off += n
        return out

    while off < total:
        kind, name_len = struct.unpack("<BI", take(5))
        name = take(name_len).decode("utf-8")
        if kind == _KIND_JSON:
            (plen,) = struct.unpack("<I", take(4))
            try:
                payload = json.loads(take(plen).decode("utf-8"))
            except json.JSONDecodeError as exc:
                raise CheckpointFormatError(f"{path}: malformed JSON record {name!r}") from exc
            if name == "__meta__":
                meta = payload
        elif kind == _KIND_TENSOR:
            code, ndim = struct.unpack("<BB", take(2))
            if code not in _CODE_DTYPES:
                raise CheckpointFormatError(f"{path}: tensor {name!r} has unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            arrays[name] = np.frombuffer(take(nbytes), dtype=dtype.newbyteorder("<")) \
                .astype(dtype).reshape(shape)
        else:
            raise CheckpointFormatError(f"{path}: unknown record kind {kind}")
    return arrays, meta
