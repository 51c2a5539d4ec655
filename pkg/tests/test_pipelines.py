from dataclasses import replace

import numpy as np
import pytest

from sparselab.encoding import EncodingConfig
from sparselab.field import FieldConfig
from sparselab.pipelines import (DistillConfig, FusionConfig, MissingReferences, TrainConfig, TrainingDiverged,
                                 distill, downscale_view, evaluate_result, fuse, load_run, pseudo_ring,
                                 render_result, resize_bilinear, train, upsample)
from sparselab.metrics import psnr
from sparselab.renderer import SamplingConfig
from sparselab.scene_io import default_spec, synthesize_scene

TINY_FIELD = FieldConfig(width=16, depth=2, bottleneck=16, skip=1, color_width=8, feature_width=8,
                         encoding=EncodingConfig(L=4, L_dir=2))
TINY_SAMPLING = SamplingConfig(8, 8)


@pytest.fixture(scope="module")
def tiny():
    spec = replace(default_spec(), image_size=16, ring_count=3, target_count=2)
    return synthesize_scene(spec, seed=0)


def _cfg(**kw):
    base = dict(iterations=6, batch_size=32, field=TINY_FIELD, sampling=TINY_SAMPLING, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


def _arrays(p):
    return [t.data.copy() for t in p.list()]


def test_zero_lr_keeps_initial_params(tiny):
    r0 = train(tiny, _cfg(iterations=0))
    r = train(tiny, _cfg(lr=0.0, lr_final=0.0))
    for a, b in zip(_arrays(r0.coarse) + _arrays(r0.fine), _arrays(r.coarse) + _arrays(r.fine)):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("method", ["baseline", "freq_occ", "esnerf", "feature_cond"])
def test_training_is_deterministic_and_logs(tiny, method, tmp_path):
    a = train(tiny, _cfg(method=method), tmp_path / "a")
    b = train(tiny, _cfg(method=method), tmp_path / "b")
    for name in ("coarse.ckpt", "fine.ckpt"):
        assert (tmp_path / "a/checkpoints" / name).read_bytes() == (tmp_path / "b/checkpoints" / name).read_bytes()
    assert a.log_csv() == b.log_csv()
    terms = {row[1] for row in a.log}
    expect = {"baseline": {"nerf"}, "freq_occ": {"nerf", "occ"}, "esnerf": {"nerf", "occ", "tv", "rank", "cont"},
              "feature_cond": {"nerf", "occ", "feature"}}[method]
    assert terms == expect | {"total"}
    c = train(tiny, _cfg(method=method, seed=1))
    assert not np.array_equal(c.coarse.list()[0].data, a.coarse.list()[0].data)


def test_loss_decreases(tiny):
    r = train(tiny, _cfg(method="baseline", iterations=150, log_every=10, lr=5e-3, lr_final=5e-4))
    totals = [v for _, term, _, v in r.log if term == "total"]
    assert np.mean(totals[-3:]) < np.mean(totals[:3])


def test_checkpoint_reload_renders_identically(tiny, tmp_path):
    r = train(tiny, _cfg(), tmp_path)
    coarse, fine, ccfg, fcfg = load_run(tmp_path / "checkpoints")
    assert ccfg == r.coarse_cfg
    again = replace(r, coarse=coarse, fine=fine)
    cams = tiny.target_cameras[:1]
    assert render_result(r, cams)[0].tobytes() == render_result(again, cams)[0].tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_checkpoint(tiny, tmp_path):
    with pytest.raises(TrainingDiverged) as err:
        train(tiny, _cfg(lr=1e30, lr_final=1e30, iterations=50), tmp_path)
    assert (tmp_path / "checkpoints" / "coarse.ckpt").exists()
    assert err.value.checkpoint is not None
    for t in load_run(tmp_path / "checkpoints")[0].list():
        assert np.isfinite(t.data).all()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="mipnerf")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(resolution_scale=2.0)
    with pytest.raises(ValueError):
        DistillConfig(pseudo_views=0)
    with pytest.raises(ValueError):
        FusionConfig(weights=[0.7, 0.7])


# -- resampling -----------------------------------------------------------------------

def test_upsample_identity_and_constant():
    img = np.random.default_rng(0).random((5, 7, 3))
    assert np.array_equal(upsample(img, 1), img)
    const = np.full((4, 6, 3), 0.37)
    up = upsample(const, 4)
    assert up.shape == (16, 24, 3)
    np.testing.assert_allclose(up, 0.37, rtol=0, atol=1e-15)


def test_resize_preserves_linear_ramps():
    ramp = np.tile(np.arange(8.0), (4, 1))
    up = resize_bilinear(ramp, 4, 16)
    # interior samples fall on the ramp: x_src = (j + .5) / 2 - .5
    j = np.arange(2, 14)
    np.testing.assert_allclose(up[0, j], (j + 0.5) / 2 - 0.5)


def test_downscale_box_average(tiny):
    v = tiny.input_views[0]
    half = downscale_view(v, 0.5)
    assert half.image.shape == (8, 8, 3)
    np.testing.assert_allclose(half.image[0, 0], v.image[:2, :2].reshape(-1, 3).mean(0))
    assert half.camera.width == 8 and half.mask.dtype == bool


# -- fusion ---------------------------------------------------------------------------

def test_fuse_pixel_weighted_examples():
    rng = np.random.default_rng(0)
    a = [rng.random((6, 5, 3)) for _ in range(3)]
    b = [rng.random((6, 5, 3)) for _ in range(3)]
    out = fuse([a, b], FusionConfig(weights=[1.0, 0.0]))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(out, a))
    for w in ([0.3, 0.7], [0.5, 0.5], None):
        same = fuse([a, a], FusionConfig(weights=w))
        assert all(x.tobytes() == y.tobytes() for x, y in zip(same, a))
    mid = fuse([a, b], FusionConfig())
    np.testing.assert_allclose(mid[0], 0.5 * (a[0] + b[0]))


def test_fuse_weight_maps():
    rng = np.random.default_rng(1)
    a, b = [rng.random((4, 4, 3))], [rng.random((4, 4, 3))]
    left = np.zeros((4, 4))
    left[:, :2] = 1
    out = fuse([a, b], FusionConfig(), weight_maps=[[left], [1 - left]])[0]
    assert np.array_equal(out[:, :2], a[0][:, :2]) and np.allclose(out[:, 2:], b[0][:, 2:])
    with pytest.raises(ValueError):
        fuse([a, b], FusionConfig(), weight_maps=[[left], [left]])


def test_fuse_metric_select():
    rng = np.random.default_rng(2)
    ref = [rng.random((8, 8, 3))]
    clean = [ref[0].copy()]
    noisy = [np.clip(ref[0] + rng.normal(0, 0.1, (8, 8, 3)), 0, 1)]
    out = fuse([noisy, clean], FusionConfig(mode="metric_select"), references=ref)
    assert out[0].tobytes() == clean[0].tobytes()
    with pytest.raises(MissingReferences):
        fuse([noisy, clean], FusionConfig(mode="metric_select"))
    with pytest.raises(ValueError):
        fuse([noisy], FusionConfig())
    with pytest.raises(ValueError):
        fuse([noisy, [np.zeros((4, 4, 3))]], FusionConfig())


def test_metric_select_never_loses():
    rng = np.random.default_rng(3)
    for _ in range(100):
        ref = rng.random((8, 8, 3))
        c = [[np.clip(ref + rng.normal(0, rng.uniform(0.01, 0.3), ref.shape), 0, 1)] for _ in range(2)]
        out = fuse(c, FusionConfig(mode="metric_select"), references=[ref])[0]
        assert psnr(out, ref) >= max(psnr(x[0], ref) for x in c)


# -- distillation ---------------------------------------------------------------------

def _dcfg(**kw):
    base = dict(teacher=_cfg(method="freq_occ", resolution_scale=0.5), student=_cfg(method="baseline"),
                pseudo_views=5, finetune_iterations=3)
    base.update(kw)
    return DistillConfig(**base)


def test_pseudo_ring_count_and_framing(tiny):
    cams = pseudo_ring(tiny, _dcfg(pseudo_views=49))
    assert len(cams) == 49
    d = [np.linalg.norm(c.position - tiny.center) for c in cams]
    ref = np.mean([np.linalg.norm(v.camera.position - tiny.center) for v in tiny.input_views])
    np.testing.assert_allclose(d, ref, rtol=1e-9)


def test_distill_stages(tiny, tmp_path):
    res = distill(tiny, _dcfg(), tmp_path)
    assert len(res.pseudo) == 5
    assert len(list((tmp_path / "stage2" / "pseudo").glob("*.png"))) == 5
    for s in ("stage1", "stage2", "stage3"):
        assert (tmp_path / s / "checkpoints" / "coarse.ckpt").exists()
    assert res.pseudo[0].image.shape == (16, 16, 3)
    assert res.student.coarse_cfg.width == 2 * TINY_FIELD.width
    assert set(evaluate_result(res.final, tiny)) == {"psnr", "psnr_m", "ssim_m"}


def test_distill_zero_student_iterations_keeps_init(tiny):
    cfg = _dcfg(student=_cfg(method="baseline", iterations=0), finetune_iterations=0)
    res = distill(tiny, cfg)
    fresh = train(replace(tiny, input_views=res.pseudo), replace(cfg.student, field=res.student.coarse_cfg))
    for a, b in zip(_arrays(res.final.coarse), _arrays(fresh.coarse)):
        assert np.array_equal(a, b)


def test_distill_resume_is_bit_exact(tiny, tmp_path):
    distill(tiny, _dcfg(), tmp_path / "a")
    first = {p.relative_to(tmp_path / "a"): p.read_bytes() for p in (tmp_path / "a").rglob("*.ckpt")}
    again = distill(tiny, _dcfg(), tmp_path / "a", resume=True)
    assert {p.relative_to(tmp_path / "a"): p.read_bytes() for p in (tmp_path / "a").rglob("*.ckpt")} == first
    # a partial run resumed from stage 1 matches a straight run
    (tmp_path / "b").mkdir()
    import shutil
    shutil.copytree(tmp_path / "a" / "stage1", tmp_path / "b" / "stage1")
    distill(tiny, _dcfg(), tmp_path / "b", resume=True)
    second = {p.relative_to(tmp_path / "b"): p.read_bytes() for p in (tmp_path / "b").rglob("*.ckpt")}
    assert second == first
    assert again.final.coarse_cfg == load_run(tmp_path / "a" / "stage3" / "checkpoints")[2]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_teacher_divergence_stops_before_pseudo_views(tiny, tmp_path):
    cfg = _dcfg(teacher=_cfg(lr=1e30, lr_final=1e30, iterations=50))
    with pytest.raises(TrainingDiverged):
        distill(tiny, cfg, tmp_path)
    assert not (tmp_path / "stage2").exists()
