"""Training loops, view rendering, teacher-student distillation and fusion.

Ray batches: the pixel pool of all input views (at the training
resolution) is shuffled with ``default_rng([seed, 11])`` and consumed in
consecutive chunks of ``batch_size``; a fresh permutation starts once the
pool is exhausted, so no ray repeats within an epoch.

Seed streams (all ``default_rng([seed, k])``): k=0/1 coarse/fine init,
11 batch order, 12 sample jitter, 13 patch placement, 14 rank pairs.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field as dfield, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .field import FieldConfig, FieldParams, init_params, load_field, save_field
from .losses import (LossReport, LossWeights, METHODS, loss_depth_continuity, loss_depth_rank,
                     loss_depth_tv, loss_feature, loss_occlusion, loss_photometric, sample_rank_pairs, total_loss)
from .metrics import masked_psnr, psnr, ssim_box, stored
from .priors import DepthPriorSource, FeaturePriorSource, depth_prior, feature_prior
from .renderer import SamplingConfig, expected_depth, render_chunked, render_rays
from .scene_io import (Camera, RayBatch, Scene, View, generate_rays, ring_cameras, write_image)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        super().__init__(f"loss non-finite twice in a row at step {step}; last finite state in {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    method: str = "freq_occ"
    iterations: int = 2000
    batch_size: int = 64
    lr: float = 5e-3
    lr_final: float = 5e-4
    resolution_scale: float = 1.0
    seed: int = 0
    weights: LossWeights = dfield(default_factory=LossWeights)
    field: FieldConfig = dfield(default_factory=FieldConfig)
    sampling: SamplingConfig = dfield(default_factory=SamplingConfig)
    freq_ratio: float = 0.5  # frequency mask completes at this fraction of the run
    occ_range: int = 3  # regularised near samples per ray
    occ_bg_range: int = 0  # longer range for rays whose target matches the background; 0 = off
    occ_passes: str = "both"  # "coarse" | "fine" | "both"
    feature_passes: str = "both"  # which passes carry the feature head: "fine" | "both"
    patch_size: int = 8
    rank_pairs: int = 128  # per patch and step
    rank_margin: float = 1e-4
    k_nn: int = 4
    cont_window: int = 8
    cont_threshold: float = 0.05
    depth_prior: DepthPriorSource = dfield(default_factory=DepthPriorSource)
    feature_prior: FeaturePriorSource = dfield(default_factory=FeaturePriorSource)
    log_every: int = 50
    checkpoint_every: int = 0  # 0 = only at the end
    chunk: int = 4096

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.resolution_scale <= 1:
            raise ValueError("resolution_scale must lie in (0, 1]")
        if self.occ_passes not in ("coarse", "fine", "both"):
            raise ValueError(f"unknown occ_passes {self.occ_passes!r}")
        if self.feature_passes not in ("fine", "both"):
            raise ValueError(f"unknown feature_passes {self.feature_passes!r}")


@dataclass
class TrainResult:
    coarse: FieldParams
    fine: FieldParams | None
    coarse_cfg: FieldConfig
    fine_cfg: FieldConfig
    config: TrainConfig
    log: list[tuple[int, str, float, float]]
    eval_step: int | None
    skipped: int = 0

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "term", "weight", "value"])
        for step, term, weight, value in self.log:
            w.writerow([step, term, f"{weight:.6g}", f"{value:.8g}"])
        return buf.getvalue()


# -- image resampling -------------------------------------------------------------

def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping.

    Output pixel (i, j) reads source coordinate ((i + .5) h / H - .5, (j + .5) w / W - .5).
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_out, n_in):
        x = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    r0, r1, fr = axis(height, h)
    c0, c1, fc = axis(width, w)
    extra = (None,) * (img.ndim - 2)
    fr = fr[(slice(None), None) + extra]
    fc = fc[(None, slice(None)) + extra]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def upsample(img: np.ndarray, factor: float) -> np.ndarray:
    h, w = img.shape[:2]
    return resize_bilinear(img, max(1, round(h * factor)), max(1, round(w * factor)))


def _block_mean(arr: np.ndarray, k: int) -> np.ndarray:
    h, w = arr.shape[:2]
    return arr.reshape(h // k, k, w // k, k, *arr.shape[2:]).mean(axis=(1, 3))


def downscale_view(view: View, scale: float) -> View:
    """The view at ``scale`` times its resolution.

    Integer reductions that divide the size use box averaging (masks keep
    blocks at least half set, depth averages the set pixels); anything else
    falls back to bilinear resampling.
    """
    if scale == 1:
        return view
    cam = view.camera.scaled(scale)
    h, w = view.camera.height, view.camera.width
    k = round(1 / scale)
    box = abs(1 / scale - k) < 1e-9 and h % k == 0 and w % k == 0
    img = mask = depth = None
    if box:
        if view.image is not None:
            img = _block_mean(view.image, k)
        if view.mask is not None:
            mask = _block_mean(view.mask.astype(np.float64), k) >= 0.5
        if view.depth is not None:
            valid = (view.depth > 0).astype(np.float64)
            num, den = _block_mean(view.depth * valid, k), _block_mean(valid, k)
            depth = np.where(den > 0, num / np.maximum(den, 1e-12), 0.0).astype(np.float32)
    else:
        if view.image is not None:
            img = resize_bilinear(view.image, cam.height, cam.width)
        if view.mask is not None:
            mask = resize_bilinear(view.mask.astype(np.float64), cam.height, cam.width) >= 0.5
        if view.depth is not None:
            d = view.depth.astype(np.float64)
            ok = resize_bilinear((d > 0).astype(np.float64), cam.height, cam.width)
            sm = resize_bilinear(d, cam.height, cam.width)
            depth = np.where(ok > 0.5, sm / np.maximum(ok, 1e-12), 0.0).astype(np.float32)
    if mask is not None and depth is not None:
        depth = np.where(mask, np.maximum(depth, 1e-6), 0).astype(np.float32)
    return View(view.name, cam, img, mask, depth)


# -- training ----------------------------------------------------------------------

def field_configs(cfg: TrainConfig, scene: Scene) -> tuple[FieldConfig, FieldConfig]:
    """(coarse, fine) field configs: positions normalised to the scene sphere,
    frequency mask on for every regularised method."""
    masked = cfg.method != "baseline"
    T = max(1, int(round(cfg.freq_ratio * cfg.iterations)))
    enc = replace(cfg.field.encoding, masked=masked and cfg.field.encoding.masked, T=T)
    fine = replace(cfg.field, encoding=enc, pos_scale=1.0 / scene.radius,
                   pos_center=tuple(float(c) for c in scene.center))
    if cfg.method == "feature_cond":
        fine = replace(fine, variant="feature_conditioned")
    coarse = fine
    if fine.has_features and cfg.feature_passes == "fine":
        coarse = replace(fine, variant="plain")
    return coarse, fine


@dataclass
class _Pool:
    rays: RayBatch
    rgb: np.ndarray
    bg_like: np.ndarray
    depth: np.ndarray | None
    feature: np.ndarray | None
    views: list[View]
    offsets: list[int]


def _build_pool(scene: Scene, cfg: TrainConfig, dtype) -> _Pool:
    views = [downscale_view(v, cfg.resolution_scale) for v in scene.input_views]
    rays = RayBatch.concat([generate_rays(v.camera, view=i) for i, v in enumerate(views)])
    rgb = np.concatenate([v.image.reshape(-1, 3) for v in views]).astype(dtype)
    bg = scene.background_rgb
    bg_like = np.zeros(len(rgb), dtype=bool) if bg is None else (np.abs(rgb - bg).max(axis=1) < 0.01)
    offsets = list(np.cumsum([0] + [v.camera.height * v.camera.width for v in views]))
    depth = feat = None
    if cfg.method == "esnerf":
        depth = np.concatenate([depth_prior(v, cfg.depth_prior, 2 * scene.radius, i).ravel()
                                for i, v in enumerate(views)])
    if cfg.method == "feature_cond":
        feat = np.concatenate([feature_prior(v, cfg.feature_prior).reshape(-1, cfg.feature_prior.dim)
                               for v in views]).astype(dtype)
    return _Pool(rays, rgb, bg_like, depth, feat, views, offsets)


def _sample_patch(pool: _Pool, size: int, rng: np.random.Generator) -> np.ndarray:
    """Flat pool indices of a size x size patch, row-major, centred on a
    random in-mask pixel of a random view when the view has a mask."""
    vi = int(rng.integers(len(pool.views)))
    v = pool.views[vi]
    h, w = v.camera.height, v.camera.width
    size = min(size, h, w)
    if v.mask is not None and v.mask.any():
        cand = np.flatnonzero(v.mask)
        r, c = divmod(int(cand[rng.integers(len(cand))]), w)
        r0 = min(max(r - size // 2, 0), h - size)
        c0 = min(max(c - size // 2, 0), w - size)
    else:
        r0, c0 = int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1))
    rr, cc = np.meshgrid(np.arange(r0, r0 + size), np.arange(c0, c0 + size), indexing="ij")
    return pool.offsets[vi] + (rr * w + cc).ravel()


class _BatchOrder:
    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            part = self.perm[self.pos:self.pos + k]
            self.pos += len(part)
            k -= len(part)
            out.append(part)
        return np.concatenate(out)


def _step_terms(cfg: TrainConfig, pool: _Pool, res, idx: np.ndarray, patch: np.ndarray | None,
                rng_pairs: np.random.Generator) -> dict[str, ad.Tensor]:
    fine_out = res.fine
    terms = {"nerf": loss_photometric(res.coarse.rgb, None if fine_out is None else fine_out.rgb, pool.rgb[idx],
                                      reduction="mean")}
    if cfg.method == "baseline":
        return terms
    k = res.coarse.sigma.shape[1]
    reg = np.full(len(idx), min(cfg.occ_range, k))
    if cfg.occ_bg_range > 0:
        reg = np.where(pool.bg_like[idx], min(cfg.occ_bg_range, k), reg)
    occ = []
    if cfg.occ_passes in ("coarse", "both"):
        occ.append(loss_occlusion(res.coarse.sigma, reg))
    if fine_out is not None and cfg.occ_passes in ("fine", "both"):
        occ.append(loss_occlusion(fine_out.sigma, np.minimum(reg, fine_out.sigma.shape[1])))
    if occ:
        terms["occ"] = occ[0] if len(occ) == 1 else ad.add(occ[0], occ[1])
    final = res.final
    if cfg.method == "esnerf" and patch is not None:
        p = int(round(math.sqrt(len(patch))))
        n = len(idx) - len(patch)
        sub = final._replace(weights=final.weights[n:], depth=final.depth[n:], opacity=final.opacity[n:])
        depth = expected_depth(sub, renormalize=True)
        prior = pool.depth[patch]
        valid = (prior > 0) & (sub.opacity.data > 0.5)
        terms["tv"] = loss_depth_tv(ad.reshape(depth, (p, p)), valid.reshape(p, p), reduction="mean")
        pairs = sample_rank_pairs(len(patch), cfg.rank_pairs, rng_pairs, valid)
        terms["rank"] = loss_depth_rank(prior, depth, pairs, cfg.rank_margin, reduction="mean")
        terms["cont"] = loss_depth_continuity(prior.reshape(p, p), depth, cfg.k_nn, cfg.cont_threshold,
                                              cfg.cont_window, valid.reshape(p, p), reduction="mean")
    if cfg.method == "feature_cond":
        parts = [o.feature for o in (res.coarse, fine_out) if o is not None and o.feature is not None]
        feats = [loss_feature(f, pool.feature[idx]) for f in parts]
        if feats:
            terms["feature"] = feats[0] if len(feats) == 1 else ad.add(feats[0], feats[1])
    return terms


def _save(out_dir: Path | None, tag: str, coarse, fine, ccfg, fcfg) -> Path | None:
    if out_dir is None:
        return None
    ck = Path(out_dir) / "checkpoints"
    save_field(ck / f"{tag}coarse.ckpt", coarse, ccfg)
    if fine is not None:
        save_field(ck / f"{tag}fine.ckpt", fine, fcfg)
    return ck


def train(scene: Scene, cfg: TrainConfig, out_dir=None, init: tuple[FieldParams, FieldParams | None] | None = None,
          tag: str = "") -> TrainResult:
    """Optimise a coarse + fine field pair on the scene's input views.

    ``init`` starts from existing parameters (copied) instead of a fresh
    initialisation.  With ``out_dir`` the final (and periodic) checkpoints
    go to ``<out_dir>/checkpoints/<tag>{coarse,fine}.ckpt``.
    """
    if not scene.input_views:
        raise ValueError("scene has no input views")
    dtype = ad.TRAIN_DTYPE
    ccfg, fcfg = field_configs(cfg, scene)
    if init is not None:
        coarse = init[0].copy()
        fine = None if init[1] is None else init[1].copy()
    else:
        coarse = init_params(ccfg, [cfg.seed, 0], dtype)
        fine = init_params(fcfg, [cfg.seed, 1], dtype) if cfg.sampling.n_fine > 0 else None
    params = coarse.list() + ([] if fine is None else fine.list())
    state = ad.adam_init(params, ad.exponential_decay(cfg.lr, cfg.lr_final, cfg.iterations))
    pool = _build_pool(scene, cfg, dtype)
    order = _BatchOrder(len(pool.rays), np.random.default_rng([cfg.seed, 11]))
    rng_jit = np.random.default_rng([cfg.seed, 12])
    rng_patch = np.random.default_rng([cfg.seed, 13])
    rng_pairs = np.random.default_rng([cfg.seed, 14])
    bg = scene.background_rgb
    rows: list[tuple[int, str, float, float]] = []
    bad_streak = 0
    for step in range(cfg.iterations):
        idx = order.take(cfg.batch_size)
        patch = None
        if cfg.method == "esnerf":
            patch = _sample_patch(pool, cfg.patch_size, rng_patch)
            idx = np.concatenate([idx, patch])
        try:
            res = render_rays(coarse, fine, ccfg, pool.rays[idx], cfg.sampling, step, rng_jit, bg, fcfg)
            terms = _step_terms(cfg, pool, res, idx, patch, rng_pairs)
            report: LossReport = total_loss(cfg.method, terms, cfg.weights, step, cfg.iterations)
            finite = math.isfinite(report.total)
        except ad.NonFiniteError as exc:
            log.warning("step %d: %s", step, exc)
            finite, report = False, None
        if not finite:
            bad_streak += 1
            if bad_streak >= 2:
                ck = _save(out_dir, tag, coarse, fine, ccfg, fcfg)
                raise TrainingDiverged(step, ck)
            continue
        bad_streak = 0
        for p in params:
            p.grad = None
        ad.backward(report.total_tensor)
        ad.optimizer_step(params, [p.grad for p in params], state)
        if step % cfg.log_every == 0 or step == cfg.iterations - 1:
            rows.extend(report.rows())
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _save(out_dir, tag, coarse, fine, ccfg, fcfg)
    _save(out_dir, tag, coarse, fine, ccfg, fcfg)
    eval_step = cfg.iterations if ccfg.encoding.masked else None
    return TrainResult(coarse, fine, ccfg, fcfg, cfg, rows, eval_step, state.skipped)


def load_run(checkpoint_dir, tag: str = "") -> tuple[FieldParams, FieldParams | None, FieldConfig, FieldConfig]:
    ck = Path(checkpoint_dir)
    coarse, ccfg = load_field(ck / f"{tag}coarse.ckpt")
    fine, fcfg = (None, ccfg)
    if (ck / f"{tag}fine.ckpt").exists():
        fine, fcfg = load_field(ck / f"{tag}fine.ckpt")
    return coarse, fine, ccfg, fcfg


# -- rendering ---------------------------------------------------------------------

def render_views(coarse: FieldParams, fine: FieldParams | None, field_cfg: FieldConfig, cameras: Sequence[Camera],
                 sampling: SamplingConfig | None = None, background=None, step: int | None = None,
                 scale: float = 1.0, upsample_to_camera: bool = True, with_depth: bool = False,
                 fine_cfg: FieldConfig | None = None, chunk: int = 4096):
    """Render each camera at ``scale`` times its resolution.

    With ``upsample_to_camera`` the result is bilinearly resized to the
    camera's full size.  Returns a list of linear (H, W, 3) images, plus a
    list of depth maps when ``with_depth``.
    """
    sampling = sampling or SamplingConfig()
    images, depths = [], []
    for cam in cameras:
        small = cam.scaled(scale) if scale != 1 else cam
        out = render_chunked(coarse, fine, field_cfg, generate_rays(small), sampling, step, background, chunk,
                             fine_cfg)
        img = out["rgb"].reshape(small.height, small.width, 3).astype(np.float64)
        dep = out["depth"].reshape(small.height, small.width).astype(np.float64)
        if upsample_to_camera and (small.height, small.width) != (cam.height, cam.width):
            img = resize_bilinear(img, cam.height, cam.width)
            dep = resize_bilinear(dep, cam.height, cam.width)
        images.append(np.clip(img, 0, 1))
        depths.append(dep)
    return (images, depths) if with_depth else images


def render_result(result: TrainResult, cameras: Sequence[Camera], background=None, **kw):
    return render_views(result.coarse, result.fine, result.coarse_cfg, cameras, result.config.sampling, background,
                        result.eval_step, result.config.resolution_scale, fine_cfg=result.fine_cfg,
                        chunk=result.config.chunk, **kw)


def heldout_metrics(images: Sequence[np.ndarray], targets: Sequence[View]) -> dict[str, float]:
    """Mean PSNR / PSNR-M / SSIM-M of linear renders against target views,
    scored in the stored 8-bit sRGB domain."""
    from .metrics import mask_bbox

    vals: dict[str, list[float]] = {"psnr": [], "psnr_m": [], "ssim_m": []}
    for img, t in zip(images, targets):
        if t.image is None:
            continue
        pred, gt = stored(img), stored(t.image)
        mask = t.mask if t.mask is not None else np.ones(gt.shape[:2], dtype=bool)
        vals["psnr"].append(psnr(pred, gt))
        vals["psnr_m"].append(masked_psnr(pred, gt, mask))
        vals["ssim_m"].append(ssim_box(pred, gt, mask_bbox(mask)))
    return {k: float(np.mean(v)) for k, v in vals.items() if v}


def evaluate_result(result: TrainResult, scene: Scene) -> dict[str, float]:
    imgs = render_result(result, scene.target_cameras, scene.background_rgb)
    return heldout_metrics(imgs, scene.targets)


def write_renders(images: Sequence[np.ndarray], names: Sequence[str], out_dir) -> list[Path]:
    out = []
    for img, name in zip(images, names):
        p = Path(out_dir) / f"{name}.png"
        write_image(p, img)
        out.append(p)
    return out


# -- distillation ------------------------------------------------------------------

def _teacher_default() -> TrainConfig:
    return TrainConfig(method="freq_occ", iterations=30000, resolution_scale=0.25)


def _student_default() -> TrainConfig:
    return TrainConfig(method="baseline", iterations=5000)


@dataclass
class DistillConfig:
    teacher: TrainConfig = dfield(default_factory=_teacher_default)
    student: TrainConfig = dfield(default_factory=_student_default)
    pseudo_views: int = 49
    pseudo_radius: float | None = None  # None = mean input-camera distance to the scene centre
    pseudo_elevation: float | None = None  # degrees; None = mean input elevation
    pseudo_azimuth_offset: float = 0.0
    width_factor: float = 2.0  # student width relative to the teacher's
    finetune_iterations: int = 5000
    finetune_method: str | None = None  # None = student method
    upscale: bool = True  # resize pseudo views from teacher resolution to full size

    def __post_init__(self):
        if self.pseudo_views < 1:
            raise ValueError("pseudo_views must be >= 1")
        if self.finetune_iterations < 0:
            raise ValueError("finetune_iterations must be >= 0")
        if self.width_factor <= 0:
            raise ValueError("width_factor must be > 0")


@dataclass
class DistillResult:
    teacher: TrainResult
    student: TrainResult  # after stage 2
    final: TrainResult  # after stage 3
    pseudo: list[View]
    stage_dirs: dict[str, Path | None]


def pseudo_ring(scene: Scene, cfg: DistillConfig) -> list[Camera]:
    """Azimuth-uniform ring at the mean input radius and elevation, looking at the scene centre."""
    c = np.asarray(scene.center, dtype=np.float64)
    rel = np.array([v.camera.position - c for v in scene.input_views])
    dist = np.linalg.norm(rel, axis=1)
    radius = cfg.pseudo_radius if cfg.pseudo_radius is not None else float(dist.mean())
    elev = cfg.pseudo_elevation if cfg.pseudo_elevation is not None else float(
        np.degrees(np.arcsin(np.clip(rel[:, 2] / dist, -1, 1))).mean())
    ref = scene.input_views[0].camera
    fov = math.degrees(2 * math.atan(0.5 * ref.height / ref.fy))
    return ring_cameras(cfg.pseudo_views, radius, elev, ref.width, ref.height, fov, c, scene.radius,
                        cfg.pseudo_azimuth_offset)


def _stage_dir(out_dir, name: str) -> Path | None:
    return None if out_dir is None else Path(out_dir) / name


def _read_log(path: Path) -> list[tuple[int, str, float, float]]:
    if not path.exists():
        return []
    rows = list(csv.reader(io.StringIO(path.read_text())))[1:]
    return [(int(r[0]), r[1], float(r[2]), float(r[3])) for r in rows]


def _train_or_resume(scene, tcfg, sdir, resume, init=None, tag=""):
    if resume and sdir is not None and (sdir / "checkpoints" / f"{tag}coarse.ckpt").exists():
        coarse, fine, ccfg, fcfg = load_run(sdir / "checkpoints", tag)
        eval_step = tcfg.iterations if ccfg.encoding.masked else None
        log.info("resuming from %s", sdir)
        return TrainResult(coarse, fine, ccfg, fcfg, tcfg, _read_log(sdir / "log.csv"), eval_step)
    res = train(scene, tcfg, sdir, init=init, tag=tag)
    if sdir is not None:
        (sdir / "log.csv").write_text(res.log_csv())
    return res


def distill(scene: Scene, cfg: DistillConfig, out_dir=None, resume: bool = False) -> DistillResult:
    """Three stages: teacher on the sparse inputs, fresh student on a dense
    ring of teacher pseudo views, student fine-tuned on the sparse inputs.

    Each stage checkpoints under ``<out_dir>/stage{1,2,3}``; with ``resume``
    a stage whose checkpoint exists is loaded instead of retrained.
    """
    dirs = {s: _stage_dir(out_dir, s) for s in ("stage1", "stage2", "stage3")}
    bg = scene.background_rgb
    # stage 1
    teacher = _train_or_resume(scene, cfg.teacher, dirs["stage1"], resume)
    # stage 2
    cams = pseudo_ring(scene, cfg)
    imgs = render_views(teacher.coarse, teacher.fine, teacher.coarse_cfg, cams, teacher.config.sampling, bg,
                        teacher.eval_step, cfg.teacher.resolution_scale, upsample_to_camera=cfg.upscale,
                        fine_cfg=teacher.fine_cfg, chunk=cfg.teacher.chunk)
    pseudo = []
    for i, (cam, img) in enumerate(zip(cams, imgs)):
        if not cfg.upscale:
            cam = cam.scaled(cfg.teacher.resolution_scale)
        pseudo.append(View(f"p{i:03d}", cam, img))
    if dirs["stage2"] is not None:
        write_renders(imgs, [v.name for v in pseudo], dirs["stage2"] / "pseudo")
    pseudo_scene = replace(scene, input_views=pseudo)
    width = max(1, int(round(cfg.teacher.field.width * cfg.width_factor)))
    sfield = replace(cfg.student.field, width=width, bottleneck=max(1, int(round(cfg.teacher.field.bottleneck
                                                                                 * cfg.width_factor))))
    scfg = replace(cfg.student, field=sfield)
    student = _train_or_resume(pseudo_scene, scfg, dirs["stage2"], resume)
    # stage 3
    fcfg = replace(scfg, iterations=cfg.finetune_iterations, method=cfg.finetune_method or scfg.method,
                   seed=scfg.seed + 1)
    final = _train_or_resume(scene, fcfg, dirs["stage3"], resume, init=(student.coarse, student.fine))
    return DistillResult(teacher, student, final, pseudo, dirs)


# -- fusion ------------------------------------------------------------------------

@dataclass
class FusionConfig:
    mode: str = "pixel_weighted"  # "pixel_weighted" | "metric_select"
    weights: list[float] | None = None  # per candidate; None = uniform
    metric: str = "psnr"  # metric_select criterion: "psnr" | "ssim"

    def __post_init__(self):
        if self.mode not in ("pixel_weighted", "metric_select"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.metric not in ("psnr", "ssim"):
            raise ValueError(f"unknown fusion metric {self.metric!r}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if (w < 0).any() or abs(w.sum() - 1) > 1e-6:
                raise ValueError("fusion weights must be >= 0 and sum to 1")


class MissingReferences(ValueError):
    pass


def fuse(candidates: Sequence[Sequence[np.ndarray]], cfg: FusionConfig, references: Sequence[np.ndarray] | None = None,
         weight_maps: Sequence[Sequence[np.ndarray]] | None = None) -> list[np.ndarray]:
    """Combine aligned image sets (``candidates[k][view]``, values in [0, 1]).

    pixel_weighted: c_0 + sum_{k>0} w_k (c_k - c_0), i.e. the convex
    combination written so that weight 1 on one candidate returns it
    exactly.  ``weight_maps[k][view]`` (H, W) overrides the scalar weights.
    metric_select: per view the candidate scoring highest against the
    reference (first wins ties); references are mandatory.
    """
    if len(candidates) < 2:
        raise ValueError("fusion needs at least two candidate sets")
    n = len(candidates[0])
    for c in candidates:
        if len(c) != n:
            raise ValueError("candidate sets differ in view count")
        for a, b in zip(c, candidates[0]):
            if np.shape(a) != np.shape(b):
                raise ValueError(f"candidate sizes differ: {np.shape(a)} vs {np.shape(b)}")
    k = len(candidates)
    if cfg.mode == "metric_select":
        if references is None:
            raise MissingReferences("metric_select requires reference images")
        if len(references) != n:
            raise ValueError("need one reference per view")
        out = []
        for v in range(n):
            if cfg.metric == "psnr":
                scores = [psnr(candidates[j][v], references[v]) for j in range(k)]
            else:
                scores = [ssim_box(candidates[j][v], references[v]) for j in range(k)]
            out.append(np.asarray(candidates[int(np.argmax(scores))][v]).copy())
        return out
    if cfg.weights is not None and len(cfg.weights) != k:
        raise ValueError(f"{len(cfg.weights)} weights for {k} candidates")
    out = []
    for v in range(n):
        base = np.asarray(candidates[0][v], dtype=np.float64)
        if weight_maps is not None:
            maps = [np.asarray(weight_maps[j][v], dtype=np.float64) for j in range(k)]
            total = sum(maps)
            if any((m < 0).any() for m in maps) or np.abs(total - 1).max() > 1e-6:
                raise ValueError(f"view {v}: weight maps must be >= 0 and sum to 1 per pixel")
            ws = [m[..., None] if base.ndim == 3 else m for m in maps]
        else:
            ws = [float(w) for w in (cfg.weights if cfg.weights is not None else [1.0 / k] * k)]
        acc = base.copy()
        for j in range(1, k):
            acc = acc + ws[j] * (np.asarray(candidates[j][v], dtype=np.float64) - base)
        out.append(acc)
    return out
