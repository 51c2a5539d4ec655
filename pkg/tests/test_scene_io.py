import json

import numpy as np
import pytest

from sparselab import scene_io as sio
from sparselab.scene_io import (Camera, ImageSizeMismatch, MissingCameraFile, NonBinaryMask, PixelOutOfBounds,
                                Primitive, SyntheticSceneSpec, generate_rays, load_scene, save_scene,
                                synthesize_scene)


def small_spec(**kw):
    base = dict(primitives=[Primitive("sphere", (0, 0, 0), 0.5, (0.8, 0.5, 0.3))], ring_count=9, target_count=5,
                image_size=33, ring_radius=3.0)
    base.update(kw)
    return SyntheticSceneSpec(**base)


def test_srgb_round_trip_on_8bit_grid():
    v = np.arange(256) / 255.0
    back = sio.to_uint8(sio.linear_to_srgb(sio.srgb_to_linear(v)))
    assert np.array_equal(back, np.arange(256))


def test_principal_point_ray_is_forward():
    cam = sio.ring_cameras(1, 3.0, 20.0, 65, 65, 40.0)[0]
    ray = generate_rays(cam, np.array([[32, 32]]))[0]
    np.testing.assert_allclose(ray.direction, cam.forward, atol=1e-12)
    np.testing.assert_allclose(ray.origin, cam.position)
    assert (ray.t_near, ray.t_far) == (cam.near, cam.far)


def test_pixel_centre_convention():
    cam = Camera(np.eye(3), np.eye(4), 4, 4, 0.1, 10.0)
    d = generate_rays(cam, np.array([[0, 0]])).directions[0]
    np.testing.assert_allclose(d, np.array([0.5, 0.5, 1.0]) / np.linalg.norm([0.5, 0.5, 1.0]))
    d = generate_rays(cam, np.array([[1, 2]])).directions[0]
    np.testing.assert_allclose(d, np.array([2.5, 1.5, 1.0]) / np.linalg.norm([2.5, 1.5, 1.0]))


def test_all_pixels_unit_norm():
    cam = Camera(np.array([[3, 0, 2], [0, 3, 2], [0, 0, 1]]), np.eye(4), 4, 4, 0.1, 10.0)
    rays = generate_rays(cam)
    assert len(rays) == 16
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1, atol=1e-12)
    assert all(r.t_near < r.t_far for r in rays)


def test_pixel_out_of_bounds():
    cam = Camera(np.eye(3), np.eye(4), 4, 4, 0.1, 10.0)
    with pytest.raises(PixelOutOfBounds):
        generate_rays(cam, np.array([[4, 0]]))


def test_camera_validation():
    with pytest.raises(sio.InvalidCamera):
        Camera(np.eye(3), np.eye(4), 4, 4, 1.0, 0.5).validate()
    bad = np.eye(4)
    bad[0, 0] = 2
    with pytest.raises(sio.InvalidCamera):
        Camera(np.eye(3), bad, 4, 4, 0.1, 1.0).validate()


def test_single_sphere_disc_and_depth():
    scene = synthesize_scene(small_spec(image_size=65), seed=0)
    v = scene.input_views[0]
    assert v.mask[32, 32]
    assert v.depth[32, 32] == pytest.approx(3.0 - 0.5, abs=1e-6)
    # disc: symmetric about the centre, background at the corners
    assert np.array_equal(v.mask, v.mask[::-1, ::-1])
    assert not v.mask[0, 0]
    np.testing.assert_array_equal(v.image[0, 0], [1.0, 1.0, 1.0])
    assert np.all(v.depth[~v.mask] == 0)


def test_synthesis_is_deterministic():
    a = synthesize_scene(sio.default_spec(), seed=3)
    b = synthesize_scene(sio.default_spec(), seed=3)
    for va, vb in zip(a.input_views + a.targets, b.input_views + b.targets):
        assert va.image.tobytes() == vb.image.tobytes()
        assert va.mask.tobytes() == vb.mask.tobytes()
        assert va.depth.tobytes() == vb.depth.tobytes()


def test_empty_primitive_list():
    with pytest.raises(ValueError):
        synthesize_scene(small_spec(primitives=[]))


def test_marching_oracle_matches_analytic_depth(scene):
    v = scene.input_views[1]
    rays = generate_rays(v.camera)
    sel = np.flatnonzero(v.mask.ravel())[::7]
    d = sio.march_depth(rays[sel], sio.default_spec().primitives, step=1e-3)
    np.testing.assert_allclose(d, v.depth.ravel()[sel], atol=1e-4)


def test_save_load_round_trip(tmp_path, scene):
    root = save_scene(scene, tmp_path / "s")
    back = load_scene(root)
    assert len(back.input_views) == 9 and len(back.targets) == 6
    for a, b in zip(scene.input_views + scene.targets, back.input_views + back.targets):
        assert a.name == b.name
        assert a.image.tobytes() == b.image.tobytes()
        assert np.array_equal(a.mask, b.mask)
        assert a.depth.tobytes() == b.depth.tobytes()
        np.testing.assert_allclose(a.camera.world_from_camera, b.camera.world_from_camera)
    save_scene(back, tmp_path / "s2")
    for name in ("images/000.png", "masks/003.png", "targets/images/t002.png"):
        assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "s2" / name).read_bytes()


def test_track_selection(scene):
    assert len(sio.select_track(scene, 1).input_views) == 3
    assert len(sio.select_track(scene, 2).input_views) == 9
    assert [v.name for v in sio.select_track(scene, 1).input_views] == ["000", "003", "006"]


def test_nine_inputs_five_targets(tmp_path):
    scene = synthesize_scene(small_spec(), seed=0)
    back = load_scene(save_scene(scene, tmp_path / "s"))
    assert len(back.input_views) == 9 and len(back.target_cameras) == 5


def test_view_order_is_lexicographic(tmp_path):
    scene = synthesize_scene(small_spec(ring_count=3, target_count=1), seed=0)
    root = save_scene(scene, tmp_path / "s")
    man = json.loads((root / "cameras.json").read_text())
    man["inputs"].reverse()
    (root / "cameras.json").write_text(json.dumps(man))
    assert [v.name for v in load_scene(root).input_views] == ["000", "001", "002"]


def test_load_errors(tmp_path):
    scene = synthesize_scene(small_spec(ring_count=3, target_count=1), seed=0)
    with pytest.raises(MissingCameraFile):
        load_scene(tmp_path)
    root = save_scene(scene, tmp_path / "s")
    m = np.where(scene.input_views[0].mask, 255, 128).astype(np.uint8)
    sio.write_png(root / "masks" / "000.png", m)
    with pytest.raises(NonBinaryMask):
        load_scene(root)
    sio.write_mask(root / "masks" / "000.png", np.ones((5, 5), bool))
    with pytest.raises(ImageSizeMismatch):
        load_scene(root)


def test_near_far_fitted_when_absent(tmp_path):
    scene = synthesize_scene(small_spec(ring_count=3, target_count=1), seed=0)
    root = save_scene(scene, tmp_path / "s")
    man = json.loads((root / "cameras.json").read_text())
    for e in man["inputs"]:
        del e["camera"]["near"], e["camera"]["far"]
    (root / "cameras.json").write_text(json.dumps(man))
    cam = load_scene(root).input_views[0].camera
    assert cam.near == pytest.approx((3.0 - 0.5) * 0.9)
    assert cam.far == pytest.approx((3.0 + 0.5) * 1.1)


def test_depth_raster_format(tmp_path):
    d = np.random.default_rng(0).uniform(0.5, 3, (4, 6)).astype(np.float32)
    sio.write_depth(tmp_path / "d.depth", d)
    blob = (tmp_path / "d.depth").read_bytes()
    assert len(blob) == 12 + 4 * 24
    assert int.from_bytes(blob[:4], "little") == 6 and int.from_bytes(blob[4:8], "little") == 4
    assert sio.read_depth(tmp_path / "d.depth").tobytes() == d.tobytes()
