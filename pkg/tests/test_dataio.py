"""Dataset generation, formats, checkpoint container, oracle renderers."""

import json

import numpy as np
import pytest

from holovox.dataio import (
    CheckpointFormatError,
    CheckpointVersionError,
    DatasetError,
    Ellipsoid,
    SyntheticScene,
    camera_from_dict,
    camera_to_dict,
    generate_dataset,
    gt_render,
    load_checkpoint,
    load_dataset,
    load_image,
    reference_render_field,
    sample_scene,
    save_checkpoint,
    save_image,
)
from holovox.geometry import Camera, camera_center, look_at, ring_cameras


def _dir_bytes(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


def test_generate_dataset_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_dataset(a, n_scenes=2, n_frames=4, image_size=16, seed=7)
    generate_dataset(b, n_scenes=2, n_frames=4, image_size=16, seed=7)
    assert _dir_bytes(a) == _dir_bytes(b)
    c = tmp_path / "c"
    generate_dataset(c, n_scenes=2, n_frames=4, image_size=16, seed=8)
    assert _dir_bytes(a) != _dir_bytes(c)


def test_generated_cameras_form_a_ring(tmp_path):
    generate_dataset(tmp_path, n_scenes=1, n_frames=6, image_size=16, seed=1)
    videos = load_dataset(tmp_path)
    centers = [camera_center(cam) for _, cam in videos[0].frames]
    radii = [np.linalg.norm(c) for c in centers]
    assert max(radii) - min(radii) < 1e-6


def test_opaque_ellipsoid_center_pixel_color():
    color = np.array([0.8, 0.3, 0.1])
    scene = SyntheticScene(
        ellipsoids=(Ellipsoid(center=np.zeros(3), radii=np.full(3, 0.4),
                              rotation=np.eye(3), color=color, density=40.0),),
        seed=0)
    size = 17  # odd so a pixel center sits exactly on the optical axis? no:
    # pixel centers are at half-integers; cx at size/2 = 8.5 = center of
    # pixel (8, 8) exactly
    cam = look_at((0, 0, -2.5), (0, 0, 0), fx=20, fy=20, cx=size / 2, cy=size / 2,
                  width=size, height=size)
    img = gt_render(scene, cam)
    center_pixel = img[:, 8, 8]
    # path length through the sphere is 0.8 -> absorption 1 - e^-32
    np.testing.assert_allclose(center_pixel, color, atol=1e-3)
    # corners see background
    np.testing.assert_allclose(img[:, 0, 0], 0.0, atol=1e-12)


def test_gt_render_overlapping_ellipsoids_blend():
    e1 = Ellipsoid(center=np.zeros(3), radii=np.full(3, 0.3), rotation=np.eye(3),
                   color=np.array([1.0, 0.0, 0.0]), density=10.0)
    e2 = Ellipsoid(center=np.zeros(3), radii=np.full(3, 0.3), rotation=np.eye(3),
                   color=np.array([0.0, 1.0, 0.0]), density=30.0)
    scene = SyntheticScene(ellipsoids=(e1, e2), seed=0)
    sigma, color = scene.density_color(np.zeros((1, 3)))
    assert sigma[0] == pytest.approx(40.0)
    np.testing.assert_allclose(color[0], [0.25, 0.75, 0.0])


def test_scene_json_roundtrip(tmp_path):
    generate_dataset(tmp_path, n_scenes=1, n_frames=2, image_size=8, seed=3)
    from holovox.dataio import load_scene_field

    scene = load_scene_field(tmp_path / "scenes" / "scene_0000")
    assert len(scene.ellipsoids) >= 1
    sigma, color = scene.density_color(np.zeros((4, 3)))
    assert sigma.shape == (4,)


def test_image_roundtrip_8bit(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, size=(3, 9, 7)).astype(np.float32)
    p = tmp_path / "x.png"
    save_image(p, img)
    back = load_image(p)
    assert back.shape == (3, 9, 7)
    assert np.max(np.abs(back - img)) <= 0.5 / 255.0 + 1e-6


def test_camera_dict_roundtrip_lossless():
    cam = look_at((1.234567891234, -2.0, 0.5), (0, 0, 0), fx=37.123456789,
                  fy=36.5, cx=8.25, cy=7.75, width=16, height=16)
    d = json.loads(json.dumps(camera_to_dict(cam)))
    back = camera_from_dict(d)
    np.testing.assert_array_equal(back.extrinsic, cam.extrinsic)
    assert (back.fx, back.fy, back.cx, back.cy) == (cam.fx, cam.fy, cam.cx, cam.cy)


def test_load_dataset_errors_name_the_scene(tmp_path):
    generate_dataset(tmp_path, n_scenes=2, n_frames=3, image_size=8, seed=5)
    bad = tmp_path / "scenes" / "scene_0001" / "cameras.json"
    bad.write_text("{ not json")
    with pytest.raises(DatasetError) as exc:
        load_dataset(tmp_path)
    assert "scene_0001" in str(exc.value)


def test_load_dataset_missing_dir(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope")


def test_generate_dataset_rejects_too_few_frames(tmp_path):
    with pytest.raises(DatasetError):
        generate_dataset(tmp_path, n_scenes=1, n_frames=1, image_size=8, seed=0)


def test_checkpoint_roundtrip_and_byte_stability(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {
        "w1": rng.normal(size=(3, 4)).astype(np.float32),
        "w2": rng.normal(size=(2, 2, 2)).astype(np.float64),
        "count": np.array([7], dtype=np.int64),
    }
    meta = {"kind": "test", "nested": {"a": 1}}
    p1 = tmp_path / "a.ckpt"
    save_checkpoint(p1, arrays, meta)
    back, meta2 = load_checkpoint(p1)
    assert meta2 == meta
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])
        assert back[k].dtype == arrays[k].dtype
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p2, back, meta2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_version_refusal(tmp_path):
    p = tmp_path / "future.ckpt"
    save_checkpoint(p, {"x": np.zeros(2, dtype=np.float32)}, {})
    blob = bytearray(p.read_bytes())
    blob[0] = 9
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError) as exc:
        load_checkpoint(p)
    assert "version 9" in str(exc.value)


def test_checkpoint_truncation_detected(tmp_path):
    p = tmp_path / "trunc.ckpt"
    save_checkpoint(p, {"x": np.arange(100, dtype=np.float32)}, {})
    blob = p.read_bytes()
    p.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


def test_checkpoint_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointFormatError):
        save_checkpoint(tmp_path / "x.ckpt", {"b": np.zeros(2, dtype=np.int8)}, {})


def test_renderer_agrees_with_adaptive_reference_on_smooth_field():
    """Trainable-renderer plumbing with an oracle decode vs the adaptive
    analytic integrator: mean abs error < 2/255 at 128 samples."""
    from holovox.engine import Tensor, as_tensor, tsum
    from holovox.renderer import RenderConfig, render
    from holovox.voxel_grid import FeatureGrid, grid_point_coords

    # smooth gaussian blob density with a position-dependent color
    def sigma_fn(pts):
        return 8.0 * np.exp(-np.sum(pts ** 2, axis=-1) / 0.18)

    def color_fn(pts):
        c = 0.5 + 0.5 * np.stack([np.sin(2 * pts[..., 0]),
                                  np.cos(2 * pts[..., 1]),
                                  np.sin(2 * pts[..., 2])], axis=-1)
        return c

    # a grid whose channels are the world coordinates themselves: linear
    # fields interpolate exactly, so the renderer sees the true positions
    s = 16
    template = FeatureGrid.zeros(3, s, dtype=np.float64)
    coords = grid_point_coords(template).reshape(s, s, s, 3).transpose(3, 0, 1, 2)
    grid = FeatureGrid(Tensor(coords.copy()))

    class FieldDecoder:
        def __call__(self, feats, dirs):
            pts = feats.data  # (N, 3) positions
            sig = as_tensor(sigma_fn(pts)[:, None], like=feats)
            col = as_tensor(color_fn(pts), like=feats)
            zero = tsum(feats * 0.0, axis=1, keepdims=True)
            return sig + zero, col + zero

    cam = look_at((2.2, 0.9, 0.5), (0, 0, 0), fx=20, fy=20, cx=8, cy=8,
                  width=16, height=16)
    got = render(grid, cam, FieldDecoder(), RenderConfig(n_samples=128)).rgb.data
    ref = reference_render_field(sigma_fn, color_fn, cam, tol=1e-6)
    mae = float(np.mean(np.abs(got - ref)))
    assert mae < 2.0 / 255.0, f"mean abs error {mae}"


def test_sample_scene_properties():
    rng = np.random.default_rng(2)
    for _ in range(20):
        scene = sample_scene(rng)
        assert 1 <= len(scene.ellipsoids) <= 4
        for e in scene.ellipsoids:
            assert np.all((e.color >= 0) & (e.color <= 1))
            r = e.rotation
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-10)
            assert np.linalg.det(r) == pytest.approx(1.0)
            # occupied volume stays inside the unit cube
            assert np.all(np.abs(e.center) + np.max(e.radii) < 1.0)
