"""Training objectives and their weighted combination.

Every term accepts ``reduction="sum"`` (the plain formula) or ``"mean"``
(divided by the number of summands, which keeps weights batch-size
independent).  Priors are constants; gradients flow only into rendered
quantities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad

METHODS = ("baseline", "freq_occ", "esnerf", "feature_cond")


def _reduce(x: ad.Tensor, reduction: str, count: int | None = None) -> ad.Tensor:
    if reduction == "sum":
        return ad.sum_(x)
    if reduction == "mean":
        n = x.size if count is None else count
        return ad.div(ad.sum_(x), float(max(n, 1)))
    raise ValueError(f"unknown reduction {reduction!r}")


def _zero(like=None) -> ad.Tensor:
    dtype = like.dtype if like is not None else np.float64
    return ad.Tensor(np.zeros((), dtype=dtype))


def loss_photometric(rgb_coarse, rgb_fine, target, reduction: str = "sum") -> ad.Tensor:
    """sum_r |C_c(r) - C(r)|^2 + |C_f(r) - C(r)|^2; ``rgb_fine`` may be None."""
    rgb_coarse = ad.as_tensor(rgb_coarse)
    target = np.asarray(target, dtype=rgb_coarse.dtype)
    if rgb_coarse.shape != target.shape:
        raise ValueError(f"ray counts differ: {rgb_coarse.shape} vs {target.shape}")
    per_ray = ad.sum_(ad.square(ad.sub(rgb_coarse, target)), axis=-1)
    if rgb_fine is not None:
        rgb_fine = ad.as_tensor(rgb_fine)
        if rgb_fine.shape != target.shape:
            raise ValueError(f"ray counts differ: {rgb_fine.shape} vs {target.shape}")
        per_ray = ad.add(per_ray, ad.sum_(ad.square(ad.sub(rgb_fine, target)), axis=-1))
    return _reduce(per_ray, reduction)


def occlusion_mask(k: int, reg_range) -> np.ndarray:
    """(R, K) or (K,) binary mask: 1 on the first ``reg_range`` samples of a ray."""
    reg_range = np.asarray(reg_range)
    if (reg_range < 0).any() or (reg_range > k).any():
        raise ValueError(f"regularisation range must lie in [0, {k}]")
    return (np.arange(k) < reg_range[..., None]).astype(np.float64)


def loss_occlusion(sigma, reg_range) -> ad.Tensor:
    """Mean over rays of (1/K) sum_k sigma_k m_k, m_k = 1 for the first M samples.

    ``sigma`` is (R, K), samples ordered near to far; ``reg_range`` is M, a
    scalar or one value per ray.
    """
    sigma = ad.as_tensor(sigma)
    if sigma.ndim == 1:
        sigma = ad.reshape(sigma, (1, -1))
    r, k = sigma.shape
    m = occlusion_mask(k, reg_range)
    if m.ndim == 1:
        m = np.broadcast_to(m, (r, k))
    per_ray = ad.div(ad.sum_(ad.mul(sigma, m.astype(sigma.dtype)), axis=1), float(k))
    return ad.mean(per_ray)


def loss_depth_tv(depth, valid: np.ndarray | None = None, reduction: str = "sum") -> ad.Tensor:
    """sum over in-bounds neighbour pairs of squared depth differences (H, W patch).

    With ``valid`` only pairs whose two pixels are both valid contribute.
    """
    depth = ad.as_tensor(depth)
    h, w = depth.shape
    terms = []
    count = 0
    if h > 1:
        dv = ad.square(ad.sub(depth[1:, :], depth[:-1, :]))
        if valid is not None:
            m = (valid[1:, :] & valid[:-1, :])
            dv = ad.mul(dv, m.astype(depth.dtype))
            count += int(m.sum())
        else:
            count += dv.size
        terms.append(ad.sum_(dv))
    if w > 1:
        dh = ad.square(ad.sub(depth[:, 1:], depth[:, :-1]))
        if valid is not None:
            m = (valid[:, 1:] & valid[:, :-1])
            dh = ad.mul(dh, m.astype(depth.dtype))
            count += int(m.sum())
        else:
            count += dh.size
        terms.append(ad.sum_(dh))
    if not terms:
        return _zero(depth)
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    if reduction == "mean":
        return ad.div(total, float(max(count, 1)))
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def sample_rank_pairs(n_pixels: int, n_pairs: int, rng: np.random.Generator,
                      valid: np.ndarray | None = None) -> np.ndarray:
    """(P, 2) pairs of distinct flat pixel indices drawn uniformly."""
    pool = np.arange(n_pixels) if valid is None else np.flatnonzero(valid)
    if len(pool) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    a = rng.integers(0, len(pool), n_pairs)
    b = (a + rng.integers(1, len(pool), n_pairs)) % len(pool)
    return np.stack([pool[a], pool[b]], axis=1)


def loss_depth_rank(prior, rendered, pairs: np.ndarray, margin: float = 1e-4, reduction: str = "sum") -> ad.Tensor:
    """sum over pairs with prior d_i <= d_j of max(rendered_i - rendered_j + margin, 0).

    ``prior`` and ``rendered`` are flat (N,); ``pairs`` (P, 2) indexes them.
    Each sampled pair is oriented by its prior so it contributes once.
    """
    rendered = ad.as_tensor(rendered)
    prior = np.asarray(prior, dtype=np.float64).reshape(-1)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if margin < 0:
        raise ValueError("ranking margin must be >= 0")
    if len(pairs) == 0:
        return _zero(rendered)
    a, b = pairs[:, 0], pairs[:, 1]
    swap = prior[a] > prior[b]
    i = np.where(swap, b, a)
    j = np.where(swap, a, b)
    flat = ad.reshape(rendered, (-1,))
    hinge = ad.relu(ad.add(ad.sub(flat[i], flat[j]), margin))
    return _reduce(hinge, reduction)


def knn_pairs(prior: np.ndarray, k_nn: int = 4, window: int = 8, valid: np.ndarray | None = None) -> np.ndarray:
    """Directed (i, j) pairs: j among the ``k_nn`` pixels whose prior depth is
    closest to pixel i's, searched in a ``window`` x ``window`` neighbourhood.

    The window spans rows/cols [p - window//2, p - window//2 + window) clipped
    to the image; ties go to the lower flat index.
    """
    if k_nn < 1:
        raise ValueError("k_nn must be >= 1")
    prior = np.asarray(prior, dtype=np.float64)
    h, w = prior.shape
    ok = np.ones_like(prior, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    half = window // 2
    out = []
    for r in range(h):
        for c in range(w):
            if not ok[r, c]:
                continue
            r0, r1 = max(r - half, 0), min(r - half + window, h)
            c0, c1 = max(c - half, 0), min(c - half + window, w)
            rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
            cand = (rr * w + cc).ravel()
            keep = ok.ravel()[cand] & (cand != r * w + c)
            cand = cand[keep]
            if len(cand) == 0:
                continue
            dist = np.abs(prior.ravel()[cand] - prior[r, c])
            order = np.lexsort((cand, dist))[:k_nn]
            out.extend((r * w + c, int(j)) for j in cand[order])
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def loss_depth_continuity(prior, rendered, k_nn: int = 4, threshold: float = 0.05, window: int = 8,
                          valid: np.ndarray | None = None, pairs: np.ndarray | None = None,
                          reduction: str = "sum") -> ad.Tensor:
    """sum_i sum_{j in KNN(i)} max(|rendered_i - rendered_j| - threshold, 0).

    Neighbours come from the prior depth map (see :func:`knn_pairs`) unless
    ``pairs`` is given.
    """
    rendered = ad.as_tensor(rendered)
    if math.isinf(threshold):
        return _zero(rendered)
    if pairs is None:
        pairs = knn_pairs(prior, k_nn, window, valid)
    if len(pairs) == 0:
        return _zero(rendered)
    flat = ad.reshape(rendered, (-1,))
    diff = ad.abs_(ad.sub(flat[pairs[:, 0]], flat[pairs[:, 1]]))
    return _reduce(ad.relu(ad.sub(diff, threshold)), reduction)


def loss_feature(rendered, prior) -> ad.Tensor:
    """Mean over rays of |F(r) - F_gt(r)|_2."""
    rendered = ad.as_tensor(rendered)
    prior = np.asarray(prior, dtype=rendered.dtype)
    if rendered.shape != prior.shape:
        raise ValueError(f"feature shapes differ: {rendered.shape} vs {prior.shape}")
    norms = ad.sqrt(ad.sum_(ad.square(ad.sub(rendered, prior)), axis=-1))
    return ad.mean(norms)


# -- weighting ---------------------------------------------------------------

@dataclass
class LossWeights:
    occ: float = 0.1
    tv: float = 1.0  # value reached at the end of the anneal
    rank: float = 0.2
    cont: float = 0.2
    feature: float = 0.1
    tv_anneal: int = 0  # steps to reach ``tv``; 0 = the run's total steps

    def __post_init__(self):
        for k in ("occ", "tv", "rank", "cont", "feature"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


@dataclass
class LossReport:
    terms: dict[str, float]
    weights: dict[str, float]
    total: float
    step: int = 0
    total_tensor: ad.Tensor | None = field(default=None, repr=False)

    def rows(self):
        """(step, term, weight, value) rows, ``total`` last with weight 1."""
        for name in sorted(self.terms):
            yield self.step, name, self.weights[name], self.terms[name]
        yield self.step, "total", 1.0, self.total


def resolve_weights(method: str, weights: LossWeights, step: int, max_step: int) -> dict[str, float]:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    out = {"nerf": 1.0}
    if method == "baseline":
        return out
    out["occ"] = weights.occ
    if method == "esnerf":
        horizon = weights.tv_anneal or max_step
        out["tv"] = weights.tv * min(step / max(horizon, 1), 1.0)
        out["rank"] = weights.rank
        out["cont"] = weights.cont
    elif method == "feature_cond":
        out["feature"] = weights.feature
    return out


def total_loss(method: str, terms: Mapping[str, ad.Tensor], weights: LossWeights, step: int,
               max_step: int) -> LossReport:
    """Weighted sum of the terms the method uses.

    esnerf:        nerf + w1(t) tv + w2 rank + w3 cont + w_occ occ,  w1(t) = tv * min(t / horizon, 1)
    feature_cond:  nerf + lambda feature + w_occ occ
    freq_occ:      nerf + w_occ occ
    baseline:      nerf
    Terms a method uses but that are missing from ``terms`` are skipped.
    """
    resolved = resolve_weights(method, weights, step, max_step)
    if "nerf" not in terms:
        raise ValueError("photometric term 'nerf' is required")
    used = {k: v for k, v in resolved.items() if k in terms}
    total = None
    for name, w in used.items():
        part = ad.mul(terms[name], w) if w != 1.0 else terms[name]
        total = part if total is None else ad.add(total, part)
    return LossReport(
        terms={k: float(terms[k].data) for k in used},
        weights=used,
        total=float(total.data),
        step=step,
        total_tensor=total,
    )
