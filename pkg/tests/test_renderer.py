import math

import numpy as np
import pytest
from scipy import integrate, stats

from sparselab import autodiff as ad
from sparselab.encoding import EncodingConfig
from sparselab.field import FieldConfig, init_params
from sparselab.renderer import (SamplingConfig, UnsortedSamples, composite, expected_depth, inverse_cdf,
                                render_rays, sample_hierarchical, sample_stratified)
from sparselab.scene_io import Camera, Primitive, generate_rays, intersect, look_at, occupancy, pinhole


def test_stratified_midpoints_and_single():
    t = sample_stratified(np.array([0.0]), 4, far=np.array([1.0]), jitter=False)
    np.testing.assert_allclose(t[0], [0.125, 0.375, 0.625, 0.875])
    t = sample_stratified(np.array([2.0]), 1, far=np.array([4.0]))
    assert t[0, 0] == 3.0


def test_stratified_jitter_stays_in_strata():
    near, far = np.zeros(50), np.full(50, 2.0)
    a = sample_stratified(near, 8, np.random.default_rng(0), far=far)
    b = sample_stratified(near, 8, np.random.default_rng(0), far=far)
    assert a.tobytes() == b.tobytes()
    k = np.floor(a / 0.25)
    assert np.array_equal(k, np.broadcast_to(np.arange(8), k.shape))
    with pytest.raises(ValueError):
        sample_stratified(np.array([1.0]), 4, far=np.array([1.0]))


def test_hierarchical_concentrates_in_heavy_bin():
    t_c = sample_stratified(np.zeros(1), 16, far=np.ones(1), jitter=False)
    w = np.full((1, 16), 1e-4)
    w[0, 5] = 1.0
    fine = inverse_cdf(np.linspace(0, 1, 17)[None], w, 200, np.random.default_rng(0))
    inside = np.mean((fine >= 5 / 16) & (fine < 6 / 16))
    assert inside >= 0.9
    merged = sample_hierarchical(np.zeros(1), t_c, w, 32, np.random.default_rng(0), far=np.ones(1))
    assert merged.shape == (1, 48) and np.all(np.diff(merged) >= 0)


def test_hierarchical_uniform_and_zero_weights():
    edges = np.linspace(0, 1, 33)[None]
    fine = inverse_cdf(edges, np.ones((1, 32)), 256, np.random.default_rng(1))
    assert stats.kstest(fine[0], "uniform").statistic < 0.1
    zero = inverse_cdf(edges, np.zeros((1, 32)), 256, np.random.default_rng(1))
    assert zero.tobytes() == fine.tobytes()


def test_composite_empty_space():
    t = sample_stratified(np.array([1.0]), 8, far=np.array([3.0]), jitter=False)
    out = composite(np.zeros((1, 8)), np.full((1, 8, 3), 0.3), t, np.array([3.0]), background=[0.2, 0.4, 0.6])
    np.testing.assert_array_equal(out.rgb.data[0], [0.2, 0.4, 0.6])
    assert out.opacity.data[0] == 0 and out.depth.data[0] == 0


def test_composite_half_blend_and_opaque():
    c = np.array([[[0.8, 0.4, 0.2]]])
    out = composite(np.array([[math.log(2)]]), c, np.array([[0.0]]), np.array([1.0]), background=[0, 0, 0])
    np.testing.assert_allclose(out.rgb.data[0], 0.5 * c[0, 0], rtol=1e-15)
    assert out.weights.data[0, 0] == pytest.approx(0.5, rel=1e-15)
    t = np.array([[0.0, 1.0, 2.0]])
    rgb = np.array([[[0.1, 0.2, 0.3], [0.9, 0.9, 0.9], [0.5, 0.5, 0.5]]])
    out = composite(np.array([[20.0, 1.0, 1.0]]), rgb, t, np.array([3.0]), background=[1, 1, 1])
    np.testing.assert_allclose(out.rgb.data[0], rgb[0, 0], atol=1e-8)
    assert out.transmittance.data[0, 1] < 1e-8


def test_composite_rejects_unsorted():
    with pytest.raises(UnsortedSamples):
        composite(np.ones((1, 3)), np.ones((1, 3, 3)), np.array([[0.0, 2.0, 1.0]]), np.array([3.0]))


def test_energy_and_telescoping_on_random_rays():
    rng = np.random.default_rng(0)
    n, k = 10_000, 24
    near, far = rng.uniform(0.5, 2, n), rng.uniform(3, 6, n)
    t = sample_stratified(near, k, rng, far=far)
    sigma = rng.exponential(2.0, (n, k)) * (rng.random((n, k)) < 0.5)
    out = composite(sigma, rng.random((n, k, 3)), t, far)
    np.testing.assert_allclose(out.opacity.data + out.final_transmittance.data, 1.0, atol=1e-6)
    w, tr = out.weights.data, out.transmittance.data
    assert np.all(w >= 0) and np.all(np.diff(tr, axis=1) <= 1e-15)
    delta = np.concatenate([np.diff(t, axis=1), (far - t[:, -1])[:, None]], axis=1)
    np.testing.assert_allclose(tr[:, 1:], tr[:, :-1] * np.exp(-sigma[:, :-1] * delta[:, :-1]), rtol=1e-12, atol=1e-300)


def test_quadrature_error_halves():
    # density stays positive up to both bounds, so the boundary term of the
    # piecewise-constant rule is visible and the error is first order
    near, far = 0.0, 4.0

    def sigma(t):
        return 0.6 + 0.3 * np.sin(1.3 * t)

    def colour(t):
        return 0.5 + 0.4 * np.cos(t)

    def optical(t):
        return 0.6 * (t - near) - 0.3 / 1.3 * (math.cos(1.3 * t) - math.cos(1.3 * near))

    exact, _ = integrate.quad(lambda t: math.exp(-optical(t)) * sigma(t) * colour(t), near, far, epsabs=1e-14,
                              limit=200)
    errs = []
    for n in (32, 64, 128, 256):
        t = sample_stratified(np.array([near]), n, far=np.array([far]), jitter=False)
        c = np.repeat(colour(t)[..., None], 3, axis=-1)
        out = composite(sigma(t), c, t, np.array([far]), background=[0, 0, 0])
        errs.append(abs(out.rgb.data[0, 0] - exact))
    for e1, e2 in zip(errs, errs[1:]):
        assert 0.35 <= e2 / e1 <= 0.65, errs


def test_box_depth_within_two_strata():
    box = [Primitive("box", (0.0, 0.0, 0.0), (0.8, 0.6, 1.0), (0.5, 0.5, 0.5))]
    eye = np.array([2.5, 1.0, 0.8])
    cam = Camera(pinhole(16, 16, 40), look_at(eye), 16, 16, 1.0, 5.0)
    rays = generate_rays(cam)
    t_true, _, idx = intersect(rays.origins, rays.directions, box)
    n = 64
    h = (5.0 - 1.0) / n
    # corner-grazing rays whose chord is shorter than a stratum carry no sample
    hit = idx >= 0
    probe = rays.origins + np.where(hit, t_true + 2 * h, 0)[:, None] * rays.directions
    hit &= occupancy(probe, box) > 0
    assert hit.sum() > 20
    t = sample_stratified(rays, n, jitter=False)
    pts = rays.origins[:, None] + t[..., None] * rays.directions[:, None]
    sigma = 1e3 * occupancy(pts.reshape(-1, 3), box).reshape(t.shape)
    out = composite(sigma, np.zeros(t.shape + (3,)), t, rays.far)
    err = np.abs(out.depth.data[hit] - t_true[hit])
    assert err.max() <= 2 / n * (5.0 - 1.0)


def test_expected_depth_renormalised():
    t = np.array([[1.0, 2.0]])
    out = composite(np.array([[0.0, math.log(2)]]), np.zeros((1, 2, 3)), t, np.array([3.0]))
    assert out.depth.data[0] == pytest.approx(1.0)
    assert expected_depth(out, renormalize=True).data[0] == pytest.approx(2.0, rel=1e-5)


def _cfg():
    return FieldConfig(width=16, depth=2, bottleneck=8, skip=1, color_width=8, encoding=EncodingConfig(L=2, L_dir=1))


def _rays():
    cam = Camera(pinhole(6, 6, 40), look_at([3.0, 0.5, 0.5]), 6, 6, 2.0, 4.0)
    return generate_rays(cam)


def test_zero_density_field_renders_background():
    cfg = _cfg()
    p = init_params(cfg, 0, np.float64)
    p["density.w"].data[:] = 0
    p["density.b"].data[:] = -60.0
    res = render_rays(p, p, cfg, _rays(), SamplingConfig(8, 8), None, np.random.default_rng(0), [0.2, 0.3, 0.4])
    np.testing.assert_allclose(res.final.rgb.data, np.broadcast_to([0.2, 0.3, 0.4], (36, 3)), atol=1e-12)


def test_render_rays_is_deterministic():
    cfg = _cfg()
    pc, pf = init_params(cfg, 1), init_params(cfg, 2)
    a = render_rays(pc, pf, cfg, _rays(), SamplingConfig(8, 8), 3, np.random.default_rng(5), [1, 1, 1])
    b = render_rays(pc, pf, cfg, _rays(), SamplingConfig(8, 8), 3, np.random.default_rng(5), [1, 1, 1])
    assert a.final.rgb.data.tobytes() == b.final.rgb.data.tobytes()
    assert a.fine.t.shape == (36, 16)


def _check_grads(f, params):
    grads = ad.grad(f, params)
    for t, g in zip(params, grads):
        num = ad.numerical_grad(f, t)
        err = np.abs(num - g) / np.maximum(np.maximum(np.abs(num), np.abs(g)), 1e-6)
        assert err.max() < 1e-3, t.name


def test_renderer_gradient_matches_finite_differences():
    # coarse weights only steer where fine samples land (no gradient by
    # design), so each network is checked on the pass it feeds
    cfg = _cfg()
    pc, pf = init_params(cfg, 3, np.float64), init_params(cfg, 4, np.float64)
    rays = _rays()[:5]
    target = np.random.default_rng(0).random((5, 3))
    sampling = SamplingConfig(6, 6, jitter=False)

    def loss(out):
        return ad.add(ad.sum_(ad.square(ad.sub(out.rgb, target))), ad.sum_(out.depth))

    def f_coarse():
        return loss(render_rays(pc, None, cfg, rays, sampling, None, None, [1, 1, 1]).coarse)

    def f_fine():
        return loss(render_rays(pc, pf, cfg, rays, sampling, None, None, [1, 1, 1]).fine)

    _check_grads(f_coarse, pc.list())
    _check_grads(f_fine, pf.list())
