"""Ray sampling and volumetric compositing.

Quadrature along a ray with sorted samples t_1..t_K::

    delta_k = t_{k+1} - t_k,   delta_K = t_far - t_K
    T_k     = exp(-sum_{j<k} sigma_j delta_j)
    w_k     = T_k (1 - exp(-sigma_k delta_k))
    C       = sum_k w_k c_k + (1 - sum_k w_k) * background
    depth   = sum_k w_k t_k        (not renormalised; 0 for empty rays)
    F       = sum_k w_k f_k
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .field import FieldConfig, FieldParams, batch_query
from .scene_io import Ray, RayBatch


class UnsortedSamples(ValueError):
    pass


@dataclass
class SamplingConfig:
    n_coarse: int = 32
    n_fine: int = 32
    jitter: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_coarse < 1:
            raise ValueError("n_coarse must be >= 1")
        if self.n_fine < 0:
            raise ValueError("n_fine must be >= 0")


class RenderOutput(NamedTuple):
    rgb: ad.Tensor  # (R, 3)
    depth: ad.Tensor  # (R,)
    feature: ad.Tensor | None  # (R, F)
    weights: ad.Tensor  # (R, K)
    transmittance: ad.Tensor  # (R, K)
    opacity: ad.Tensor  # (R,)
    final_transmittance: ad.Tensor  # (R,)
    t: np.ndarray  # (R, K)
    sigma: ad.Tensor  # (R, K)


def _bounds(ray_or_near, far=None):
    if isinstance(ray_or_near, Ray):
        return np.array([ray_or_near.t_near]), np.array([ray_or_near.t_far])
    if isinstance(ray_or_near, RayBatch):
        return ray_or_near.near, ray_or_near.far
    return np.atleast_1d(np.asarray(ray_or_near, float)), np.atleast_1d(np.asarray(far, float))


def sample_stratified(rays, n: int, rng: np.random.Generator | None = None, jitter: bool = True,
                      far=None) -> np.ndarray:
    """One sample per equal-width stratum of [near, far]; (R, n), ascending.

    Without jitter (or without an rng) each sample is its stratum midpoint.
    """
    near, far = _bounds(rays, far)
    if np.any(near >= far):
        raise ValueError("sample_stratified needs t_near < t_far")
    u = np.full((len(near), n), 0.5)
    if jitter and rng is not None:
        u = rng.random((len(near), n))
    frac = (np.arange(n) + u) / n
    return near[:, None] + (far - near)[:, None] * frac


def inverse_cdf(edges: np.ndarray, weights: np.ndarray, n: int, rng: np.random.Generator | None = None,
                jitter: bool = True) -> np.ndarray:
    """Draw n samples per row from the piecewise-constant density over ``edges``.

    ``edges`` is (R, B+1), ``weights`` (R, B).  Rows whose weights sum to 0
    fall back to uniform sampling.  The uniforms are stratified in [0, 1).
    """
    w = np.clip(np.asarray(weights, dtype=np.float64), 0, None)
    total = w.sum(axis=1, keepdims=True)
    empty = total[:, 0] <= 0
    w = np.where(empty[:, None], 1.0, w)
    total = w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(w), 1)), np.cumsum(w / total, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    off = rng.random((len(w), n)) if (jitter and rng is not None) else np.full((len(w), n), 0.5)
    u = (np.arange(n) + off) / n
    rows = np.arange(len(w))[:, None]
    idx = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2) - 1
    idx = np.clip(idx, 0, w.shape[1] - 1)
    lo_c, hi_c = cdf[rows, idx], cdf[rows, idx + 1]
    span = np.where(hi_c - lo_c > 0, hi_c - lo_c, 1.0)
    frac = np.clip((u - lo_c) / span, 0.0, 1.0)
    lo_e, hi_e = edges[rows, idx], edges[rows, idx + 1]
    return lo_e + frac * (hi_e - lo_e)


def sample_hierarchical(rays, t_coarse: np.ndarray, weights: np.ndarray, n_fine: int,
                        rng: np.random.Generator | None = None, jitter: bool = True, far=None) -> np.ndarray:
    """Resample along each ray from the coarse weight histogram.

    Bins are the coarse strata; returns the fine samples merged with the
    coarse ones, sorted, shape (R, n_coarse + n_fine).
    """
    near, far = _bounds(rays, far)
    n_coarse = t_coarse.shape[1]
    edges = near[:, None] + (far - near)[:, None] * np.linspace(0.0, 1.0, n_coarse + 1)[None]
    fine = inverse_cdf(edges, weights, n_fine, rng, jitter)
    return np.sort(np.concatenate([t_coarse, fine], axis=1), axis=1)


_TRI_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _strict_upper(k: int, dtype) -> np.ndarray:
    key = (k, np.dtype(dtype).str)
    if key not in _TRI_CACHE:
        _TRI_CACHE[key] = np.triu(np.ones((k, k), dtype=dtype), 1)
    return _TRI_CACHE[key]


def composite(sigma, rgb, t: np.ndarray, far, background=None, feature=None) -> RenderOutput:
    """Alpha-composite per-sample density/colour/feature along each ray.

    sigma (R, K), rgb (R, K, 3), t (R, K) sorted, far (R,); background is an
    rgb triple or None (treated as black).
    """
    sigma = ad.as_tensor(sigma)
    rgb = ad.as_tensor(rgb, dtype=sigma.dtype)
    dtype = sigma.dtype
    t = np.asarray(t, dtype=np.float64)
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (t.shape[0],))
    if t.ndim != 2 or sigma.shape != t.shape:
        raise ValueError(f"sigma {sigma.shape} and t {t.shape} must both be (rays, samples)")
    gaps = np.diff(t, axis=1)
    if (gaps < 0).any() or (far < t[:, -1]).any():
        raise UnsortedSamples("samples must be sorted and end before t_far")
    delta = np.concatenate([gaps, (far - t[:, -1])[:, None]], axis=1).astype(dtype)
    k = t.shape[1]

    tau = ad.mul(sigma, delta)
    before = ad.matmul(tau, _strict_upper(k, dtype))  # exclusive prefix sums
    trans = ad.exp(ad.mul(before, -1.0))
    alpha = ad.sub(1.0, ad.exp(ad.mul(tau, -1.0)))
    w = ad.mul(trans, alpha)
    opacity = ad.sum_(w, axis=1)
    w3 = ad.reshape(w, (w.shape[0], k, 1))
    color = ad.sum_(ad.mul(w3, rgb), axis=1)
    if background is not None:
        bg = np.asarray(background, dtype=dtype).reshape(1, 3)
        color = ad.add(color, ad.mul(ad.reshape(ad.sub(1.0, opacity), (-1, 1)), bg))
    depth = ad.sum_(ad.mul(w, t.astype(dtype)), axis=1)
    feat = None
    if feature is not None:
        feat = ad.sum_(ad.mul(w3, ad.as_tensor(feature)), axis=1)
    final = ad.exp(ad.mul(ad.sum_(tau, axis=1), -1.0))
    return RenderOutput(color, depth, feat, w, trans, opacity, final, t, sigma)


def expected_depth(out: RenderOutput, renormalize: bool = False, eps: float = 1e-6) -> ad.Tensor:
    """Rendered depth; ``renormalize`` divides by accumulated opacity."""
    if not renormalize:
        return out.depth
    return ad.div(out.depth, ad.add(out.opacity, eps))


class RenderResult(NamedTuple):
    coarse: RenderOutput
    fine: RenderOutput | None

    @property
    def final(self) -> RenderOutput:
        return self.fine if self.fine is not None else self.coarse


def _points(rays: RayBatch, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    dirs = np.broadcast_to(rays.directions[:, None, :], pts.shape)
    return pts.reshape(-1, 3), dirs.reshape(-1, 3)


def _run_field(params: FieldParams, cfg: FieldConfig, rays: RayBatch, t: np.ndarray, step, background):
    r, k = t.shape
    pts, dirs = _points(rays, t)
    out = batch_query(params, pts, dirs, cfg, step)
    sigma = ad.reshape(out.sigma, (r, k))
    rgb = ad.reshape(out.rgb, (r, k, 3))
    feat = None if out.feature is None else ad.reshape(out.feature, (r, k, out.feature.shape[-1]))
    return composite(sigma, rgb, t, rays.far, background, feat)


def render_rays(coarse: FieldParams, fine: FieldParams | None, cfg: FieldConfig, rays: RayBatch,
                sampling: SamplingConfig, step: int | None = None, rng: np.random.Generator | None = None,
                background=None, fine_cfg: FieldConfig | None = None) -> RenderResult:
    """Coarse pass on stratified samples, then a fine pass on coarse+importance samples.

    ``step`` sets the frequency mask (None = unmasked).  With ``rng`` None or
    ``sampling.jitter`` off the result is fully deterministic.
    """
    jitter = sampling.jitter and rng is not None
    t_c = sample_stratified(rays, sampling.n_coarse, rng, jitter)
    out_c = _run_field(coarse, cfg, rays, t_c, step, background)
    if fine is None or sampling.n_fine == 0:
        return RenderResult(out_c, None)
    t_f = sample_hierarchical(rays, t_c, out_c.weights.data, sampling.n_fine, rng, jitter)
    out_f = _run_field(fine, fine_cfg or cfg, rays, t_f, step, background)
    return RenderResult(out_c, out_f)


def render_chunked(coarse: FieldParams, fine: FieldParams | None, cfg: FieldConfig, rays: RayBatch,
                   sampling: SamplingConfig, step: int | None = None, background=None, chunk: int = 2048,
                   fine_cfg: FieldConfig | None = None) -> dict[str, np.ndarray]:
    """Deterministic (unjittered) inference over many rays; returns numpy arrays."""
    cols: dict[str, list[np.ndarray]] = {"rgb": [], "depth": [], "opacity": []}
    for s in range(0, len(rays), chunk):
        with ad.no_grad():
            res = render_rays(coarse, fine, cfg, rays[s:s + chunk], sampling, step, None, background, fine_cfg)
        out = res.final
        cols["rgb"].append(out.rgb.data)
        cols["depth"].append(out.depth.data)
        cols["opacity"].append(out.opacity.data)
    return {k: np.concatenate(v) for k, v in cols.items()}
