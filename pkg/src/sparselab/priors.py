"""Depth and feature priors standing in for pretrained networks.

Feature descriptor (12 channels per pixel, replicate-padded borders)::

    0-2   linear rgb
    3-5   x-gradient per channel, (I[c+1] - I[c-1]) / 2
    6-8   y-gradient per channel, (I[r+1] - I[r-1]) / 2
    9-11  3x3 box mean per channel

Feature raster on disk: little-endian header ``u32 width, u32 height,
u32 channels`` then f32 values in (row, col, channel) order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene_io import Scene, View, read_depth

DESCRIPTOR_DIM = 12
_FEATURE_HEADER = struct.Struct("<III")


@dataclass
class DepthPriorSource:
    kind: str = "synthetic"  # "synthetic" (ground truth + noise) | "file"
    noise: float = 0.02  # gaussian std as a fraction of the scene diameter
    seed: int = 0
    directory: str | None = None  # file kind: <directory>/<view>.depth

    def __post_init__(self):
        if self.kind == "synthetic_gt_plus_noise":
            self.kind = "synthetic"
        if self.kind not in ("synthetic", "file"):
            raise ValueError(f"unknown depth prior kind {self.kind!r}")


@dataclass
class FeaturePriorSource:
    kind: str = "local_descriptor"  # "local_descriptor" | "file"
    dim: int = DESCRIPTOR_DIM
    directory: str | None = None  # file kind: <directory>/<view>.feat

    def __post_init__(self):
        if self.kind not in ("local_descriptor", "file"):
            raise ValueError(f"unknown feature prior kind {self.kind!r}")
        if self.kind == "local_descriptor" and self.dim != DESCRIPTOR_DIM:
            raise ValueError(f"local descriptor has {DESCRIPTOR_DIM} channels, not {self.dim}")


def depth_prior(view: View, source: DepthPriorSource, scene_diameter: float = 2.0, index: int = 0) -> np.ndarray:
    """Per-view depth prior raster (H, W), 0 where undefined.

    ``synthetic`` adds seeded Gaussian noise (std ``noise * scene_diameter``)
    to the view's ground-truth depth and clamps it positive; the stream is
    seeded by (seed, index) so views get independent noise.
    """
    hw = (view.camera.height, view.camera.width)
    if source.kind == "file":
        if source.directory is None:
            raise ValueError("file depth prior needs a directory")
        path = Path(source.directory) / f"{view.name}.depth"
        if not path.exists():
            raise FileNotFoundError(f"missing depth prior {path}")
        d = read_depth(path)
        if d.shape != hw:
            raise ValueError(f"depth prior {path} is {d.shape}, view is {hw}")
        return d
    if view.depth is None:
        raise ValueError(f"view {view.name} has no ground-truth depth to perturb")
    gt = np.asarray(view.depth, dtype=np.float64)
    defined = gt > 0 if view.mask is None else (view.mask & (gt > 0))
    std = source.noise * scene_diameter
    out = np.zeros(hw)
    if std > 0:
        rng = np.random.default_rng([source.seed, index])
        noisy = gt + rng.normal(0.0, std, hw)
    else:
        noisy = gt
    floor = 1e-3 * max(scene_diameter, 1e-6)
    out[defined] = np.maximum(noisy[defined], floor)
    return out.astype(np.float32)


def scene_depth_priors(scene: Scene, source: DepthPriorSource) -> list[np.ndarray]:
    return [depth_prior(v, source, 2 * scene.radius, i) for i, v in enumerate(scene.input_views)]


def _pad(img: np.ndarray) -> np.ndarray:
    return np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")


def local_descriptor(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None].repeat(3, axis=-1)
    p = _pad(img)
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2
    h, w = img.shape[:2]
    box = sum(p[r:r + h, c:c + w] for r in range(3) for c in range(3)) / 9
    return np.concatenate([img, gx, gy, box], axis=-1).astype(np.float32)


def feature_prior(view: View, source: FeaturePriorSource | None = None) -> np.ndarray:
    """(H, W, D) per-pixel descriptor map, same size as the view image."""
    source = source or FeaturePriorSource()
    hw = (view.camera.height, view.camera.width)
    if source.kind == "file":
        if source.directory is None:
            raise ValueError("file feature prior needs a directory")
        path = Path(source.directory) / f"{view.name}.feat"
        if not path.exists():
            raise FileNotFoundError(f"missing feature prior {path}")
        f = read_features(path)
        if f.shape[:2] != hw:
            raise ValueError(f"feature map {path} is {f.shape[:2]}, view is {hw}")
        if f.shape[2] != source.dim:
            raise ValueError(f"feature map {path} has {f.shape[2]} channels, expected {source.dim}")
        return f
    if view.image is None:
        raise ValueError(f"view {view.name} has no image")
    return local_descriptor(view.image)


def write_features(path, feat: np.ndarray) -> None:
    feat = np.asarray(feat, dtype=np.float32)
    h, w, c = feat.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(w, h, c))
        fh.write(feat.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h, c = _FEATURE_HEADER.unpack_from(blob)
    vals = np.frombuffer(blob, dtype="<f4", count=w * h * c, offset=_FEATURE_HEADER.size)
    return vals.reshape(h, w, c).astype(np.float32)
