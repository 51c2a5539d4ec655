import struct

import numpy as np
import pytest

from sparselab.priors import (DESCRIPTOR_DIM, DepthPriorSource, FeaturePriorSource, depth_prior, feature_prior,
                              local_descriptor, read_features, scene_depth_priors, write_features)
from sparselab.scene_io import View, write_depth


def _view(scene):
    return scene.input_views[0]


def test_zero_noise_gives_ground_truth(scene):
    v = _view(scene)
    d = depth_prior(v, DepthPriorSource(noise=0.0))
    defined = v.depth > 0
    assert np.array_equal(d[defined], v.depth[defined])
    assert np.all(d[~defined] == 0)


def test_noisy_prior_is_seeded_and_positive(scene):
    v = _view(scene)
    a = depth_prior(v, DepthPriorSource(seed=3), 2 * scene.radius)
    b = depth_prior(v, DepthPriorSource(seed=3), 2 * scene.radius)
    c = depth_prior(v, DepthPriorSource(seed=4), 2 * scene.radius)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()
    m = v.mask & (v.depth > 0)
    assert (a[m] > 0).all()
    resid = (a - v.depth)[m]
    assert abs(resid.std() - 0.02 * 2 * scene.radius) < 0.2 * 0.02 * 2 * scene.radius


def test_views_get_independent_noise(scene):
    priors = scene_depth_priors(scene, DepthPriorSource())
    assert len(priors) == len(scene.input_views)
    r0 = (priors[0] - scene.input_views[0].depth)[scene.input_views[0].mask]
    r1 = (priors[1] - scene.input_views[1].depth)[scene.input_views[1].mask]
    n = min(len(r0), len(r1))
    assert not np.allclose(r0[:n], r1[:n])


def test_file_prior_round_trip(tmp_path, scene):
    v = _view(scene)
    raster = np.random.default_rng(0).random(v.depth.shape).astype(np.float32) + 0.5
    write_depth(tmp_path / f"{v.name}.depth", raster)
    got = depth_prior(v, DepthPriorSource(kind="file", directory=str(tmp_path)))
    assert got.tobytes() == raster.tobytes()


def test_file_prior_errors(tmp_path, scene):
    v = _view(scene)
    src = DepthPriorSource(kind="file", directory=str(tmp_path))
    with pytest.raises(FileNotFoundError):
        depth_prior(v, src)
    write_depth(tmp_path / f"{v.name}.depth", np.ones((3, 3)))
    with pytest.raises(ValueError):
        depth_prior(v, src)
    with pytest.raises(ValueError):
        DepthPriorSource(kind="dpt")
    assert DepthPriorSource(kind="synthetic_gt_plus_noise").kind == "synthetic"


def test_descriptor_of_constant_image():
    img = np.full((5, 6, 3), 0.3)
    f = local_descriptor(img)
    assert f.shape == (5, 6, DESCRIPTOR_DIM)
    assert np.all(f[..., 3:9] == 0)
    np.testing.assert_allclose(f[..., 9:], 0.3, rtol=1e-6)
    np.testing.assert_allclose(f[..., :3], 0.3, rtol=1e-6)


def test_descriptor_on_step_edge():
    img = np.zeros((4, 8, 3))
    img[:, 4:] = 1.0
    f = local_descriptor(img)
    gx, gy = f[..., 3:6], f[..., 6:9]
    assert np.all(gy == 0)
    nz = np.unique(np.nonzero(gx)[1])
    assert nz.tolist() == [3, 4]
    np.testing.assert_allclose(gx[:, 3:5], 0.5)


def test_descriptor_translation_equivariant():
    img = np.random.default_rng(0).random((10, 12, 3))
    shifted = np.roll(img, 1, axis=1)
    a, b = local_descriptor(img), local_descriptor(shifted)
    # interior columns unaffected by the border or the wrapped column
    np.testing.assert_array_equal(a[1:-1, 2:-2], b[1:-1, 3:-1])


def test_feature_prior_matches_image_size(scene):
    v = _view(scene)
    f = feature_prior(v)
    assert f.shape == v.image.shape[:2] + (DESCRIPTOR_DIM,)
    assert f.tobytes() == feature_prior(v).tobytes()


def test_feature_file_format(tmp_path, scene):
    v = _view(scene)
    feat = np.random.default_rng(1).random(v.image.shape[:2] + (4,)).astype(np.float32)
    path = tmp_path / f"{v.name}.feat"
    write_features(path, feat)
    blob = path.read_bytes()
    assert struct.unpack_from("<III", blob) == (feat.shape[1], feat.shape[0], 4)
    assert len(blob) == 12 + feat.size * 4
    assert read_features(path).tobytes() == feat.tobytes()
    got = feature_prior(v, FeaturePriorSource(kind="file", dim=4, directory=str(tmp_path)))
    assert got.tobytes() == feat.tobytes()
    with pytest.raises(ValueError):
        feature_prior(v, FeaturePriorSource(kind="file", dim=5, directory=str(tmp_path)))
    with pytest.raises(ValueError):
        FeaturePriorSource(dim=5)


def test_synthetic_prior_needs_depth(scene):
    v = _view(scene)
    bare = View(v.name, v.camera, v.image)
    with pytest.raises(ValueError):
        depth_prior(bare, DepthPriorSource())
