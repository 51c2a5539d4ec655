"""Evaluation protocol: PSNR, masked PSNR, mask bounding boxes and SSIM-M.

All metrics work in the stored 8-bit domain: inputs in [0, 1] are
quantised to ``round(255 x) / 255`` first (``quantize=False`` skips this).
Linear renders must be sRGB-encoded before scoring, see :func:`stored`.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .scene_io import MANIFEST, linear_to_srgb, read_mask, read_png, to_uint8

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WIN = 11
SSIM_SIGMA = 1.5
LUMA = np.array([0.299, 0.587, 0.114])  # ITU-R BT.601
CSV_FIELDS = ("scene", "view", "source", "psnr", "psnr_m", "ssim_m")


class MissingPrediction(FileNotFoundError):
    def __init__(self, views: Sequence[str]):
        super().__init__(f"missing prediction(s): {', '.join(views)}")
        self.views = list(views)


class EmptyMask(ValueError):
    pass


def stored(linear: np.ndarray) -> np.ndarray:
    """Linear image -> the [0, 1] values its 8-bit sRGB file would hold."""
    return to_uint8(linear_to_srgb(linear)) / 255.0


def _prep(img: np.ndarray, quantize: bool) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if quantize:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img


def _check_pair(pred, gt):
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"image sizes differ: {np.shape(pred)} vs {np.shape(gt)}")


def _psnr_masked(pred, gt, mask, quantize) -> float:
    _check_pair(pred, gt)
    if not mask.any():
        raise EmptyMask("mask has no set pixels")
    err = np.square(_prep(pred, quantize) - _prep(gt, quantize))
    mse = float(np.mean(err[mask]))
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def psnr(pred, gt, quantize: bool = True) -> float:
    """10 log10(1 / MSE); identical images give the 99 dB cap."""
    return _psnr_masked(pred, gt, np.ones(np.shape(gt)[:2], dtype=bool), quantize)


def masked_psnr(pred, gt, mask, quantize: bool = True) -> float:
    """PSNR over the pixels (all channels) where ``mask`` is set."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != np.shape(gt)[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {np.shape(gt)[:2]}")
    return _psnr_masked(pred, gt, mask, quantize)


@dataclass(frozen=True)
class MaskBox:
    row_min: int
    row_max: int
    col_min: int
    col_max: int

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1

    def crop(self, img: np.ndarray) -> np.ndarray:
        return img[self.row_min:self.row_max + 1, self.col_min:self.col_max + 1]


def mask_bbox(mask) -> MaskBox:
    """Smallest inclusive box containing every set pixel."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("mask has no set pixels")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return MaskBox(int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    pad = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")
    return out[pad:img.shape[0] - pad, pad:img.shape[1] - pad]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over the valid (fully covered) window positions of 2-D images."""
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a * mu_a
    s_bb = _filter_valid(b * b, g) - mu_b * mu_b
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * s_ab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (s_aa + s_bb + SSIM_C2)
    return float(np.mean(num / den))


def _luma(img: np.ndarray) -> np.ndarray:
    return img if img.ndim == 2 else img[..., :3] @ LUMA


def ssim_box(pred, gt, box: MaskBox | None = None, channel: str = "luma", quantize: bool = True) -> float:
    """SSIM on the crop ``box`` (whole image if None).

    Crops smaller than 11x11 are reflect-padded up to 11 first.  ``channel``
    is ``"luma"`` (BT.601) or ``"mean"`` (average of per-channel SSIM).
    """
    _check_pair(pred, gt)
    p, g = _prep(pred, quantize), _prep(gt, quantize)
    if box is not None:
        p, g = box.crop(p), box.crop(g)
    if channel == "luma":
        pairs = [(_luma(p), _luma(g))]
    elif channel == "mean":
        pairs = [(p[..., c], g[..., c]) for c in range(p.shape[-1])] if p.ndim == 3 else [(p, g)]
    else:
        raise ValueError(f"unknown ssim channel mode {channel!r}")
    vals = []
    for a, b in pairs:
        ph, pw = max(0, SSIM_WIN - a.shape[0]), max(0, SSIM_WIN - a.shape[1])
        if ph or pw:
            widths = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
            a, b = np.pad(a, widths, mode="symmetric"), np.pad(b, widths, mode="symmetric")
        vals.append(ssim(a, b))
    return float(np.mean(vals))


# -- perceptual slot --------------------------------------------------------------

PerceptualScorer = Callable[[Path, Path, MaskBox], float]


class ExternalScorer:
    """Runs ``command`` (with ``{pred}``, ``{gt}``, ``{box}`` placeholders) per
    image pair and reads the last number it prints."""

    def __init__(self, command: str):
        self.command = command

    def __call__(self, pred: Path, gt: Path, box: MaskBox) -> float:
        box_s = f"{box.row_min},{box.row_max},{box.col_min},{box.col_max}"
        args = [a.format(pred=pred, gt=gt, box=box_s) for a in shlex.split(self.command)]
        out = subprocess.run(args, check=True, capture_output=True, text=True).stdout
        nums = re.findall(r"[-+]?\d*\.?\d+(?:[eE][-+]?\d+)?", out)
        if not nums:
            raise ValueError(f"perceptual scorer printed no number: {out!r}")
        return float(nums[-1])


# -- reports ------------------------------------------------------------------------

@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    capped: list[str] = field(default_factory=list)  # scene/view pairs at the PSNR cap
    notes: list[str] = field(default_factory=list)

    METRICS = ("psnr", "psnr_m", "ssim_m")

    @property
    def metrics(self) -> tuple[str, ...]:
        extra = ("perceptual_m",) if self.rows and "perceptual_m" in self.rows[0] else ()
        return self.METRICS + extra

    def by_source(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for src in sorted({r["source"] for r in self.rows}):
            sel = [r for r in self.rows if r["source"] == src]
            out[src] = {m: float(np.mean([r[m] for r in sel])) for m in self.metrics}
        return out

    def source_mean(self) -> dict[str, float]:
        """Mean of per-source means (the table's Avg column)."""
        per = self.by_source()
        return {m: float(np.mean([v[m] for v in per.values()])) for m in self.metrics} if per else {}

    def view_mean(self) -> dict[str, float]:
        return {m: float(np.mean([r[m] for r in self.rows])) for m in self.metrics} if self.rows else {}

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = list(CSV_FIELDS) + (["perceptual_m"] if "perceptual_m" in self.metrics else [])
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in fields})
        return buf.getvalue()

    def table(self) -> str:
        ms = self.metrics
        head = f"{'':<12}" + "".join(f"{m:>12}" for m in ms)
        lines = [head]
        for src, vals in self.by_source().items():
            lines.append(f"{src:<12}" + "".join(f"{vals[m]:>12.4f}" for m in ms))
        if self.rows:
            lines.append(f"{'avg(source)':<12}" + "".join(f"{self.source_mean()[m]:>12.4f}" for m in ms))
            lines.append(f"{'avg(view)':<12}" + "".join(f"{self.view_mean()[m]:>12.4f}" for m in ms))
        for c in self.capped:
            lines.append(f"note: PSNR capped at {PSNR_CAP:g} dB for {c}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def score_view(pred, gt, mask) -> dict[str, float]:
    """PSNR, PSNR-M and SSIM-M for one image pair in [0, 1] (stored domain)."""
    box = mask_bbox(mask)
    return {
        "psnr": psnr(pred, gt),
        "psnr_m": masked_psnr(pred, gt, mask),
        "ssim_m": ssim_box(pred, gt, box),
    }


def _gt_scenes(gt_dir: Path) -> list[Path]:
    if (gt_dir / MANIFEST).exists():
        return [gt_dir]
    return sorted(p for p in gt_dir.iterdir() if (p / MANIFEST).exists())


def evaluate_submission(pred_dir, gt_dir, sources: Mapping[str, str] | None = None,
                        perceptual: PerceptualScorer | None = None) -> MetricReport:
    """Score predictions against scene-directory ground truth.

    ``gt_dir`` is one scene directory or a folder of them; ground truth is
    read from ``<scene>/targets/images`` and ``<scene>/targets/masks``.
    Predictions are ``<pred_dir>/<scene>/<view>.png`` (or
    ``<pred_dir>/<view>.png`` when ``gt_dir`` is a single scene).  The
    source label comes from ``sources[scene]``, else the scene manifest.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    scenes = _gt_scenes(gt_dir)
    if not scenes:
        raise FileNotFoundError(f"{gt_dir}: no scene directories with {MANIFEST}")
    single = scenes == [gt_dir]
    report = MetricReport()
    missing = []
    jobs = []
    for sdir in scenes:
        manifest = json.loads((sdir / MANIFEST).read_text())
        scene = manifest.get("name", sdir.name)
        src = (sources or {}).get(scene, manifest.get("source", "default"))
        pdir = pred_dir if single else pred_dir / sdir.name
        for img_path in sorted((sdir / "targets" / "images").glob("*.png")):
            view = img_path.stem
            ppath = pdir / f"{view}.png"
            if single and not ppath.exists():
                ppath = pred_dir / sdir.name / f"{view}.png"
            if not ppath.exists():
                missing.append(f"{sdir.name}/{view}")
                continue
            jobs.append((scene, view, src, ppath, img_path, sdir / "targets" / "masks" / f"{view}.png"))
    if missing:
        raise MissingPrediction(missing)
    for scene, view, src, ppath, gpath, mpath in jobs:
        pred = read_png(ppath)[..., :3] / 255.0
        gt = read_png(gpath)[..., :3] / 255.0
        if pred.shape != gt.shape:
            raise ValueError(f"{scene}/{view}: prediction {pred.shape[:2]} vs ground truth {gt.shape[:2]}")
        mask = read_mask(mpath) if mpath.exists() else np.ones(gt.shape[:2], dtype=bool)
        row = {"scene": scene, "view": view, "source": src, **score_view(pred, gt, mask)}
        if perceptual is not None:
            row["perceptual_m"] = float(perceptual(ppath, gpath, mask_bbox(mask)))
        if row["psnr_m"] >= PSNR_CAP or row["psnr"] >= PSNR_CAP:
            report.capped.append(f"{scene}/{view}")
        report.rows.append(row)
    return report
