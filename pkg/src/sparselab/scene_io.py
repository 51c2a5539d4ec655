"""Posed multi-view scenes: cameras, rays, on-disk format and synthetic scenes.

Conventions used everywhere in the package:

* Camera frame is x right, y down, z forward (OpenCV).  ``world_from_camera``
  maps camera coordinates to world coordinates; its third rotation column is
  the viewing direction.
* Pixel ``(row, col)`` samples the continuous image point
  ``(u, v) = (col + 0.5, row + 0.5)``; the camera-frame ray direction is
  ``((u - cx) / fx, (v - cy) / fy, 1)`` normalised.
* Ray depth is distance along the unit direction, not camera z.
* Images on disk are 8-bit sRGB; in memory they are linear floats in [0, 1]
  (IEC 61966-2-1 transfer function, see :func:`srgb_to_linear`).

Scene directory layout::

    <scene>/cameras.json          manifest (see save_scene)
    <scene>/images/<name>.png     input views, 8-bit RGB
    <scene>/masks/<name>.png      optional, 0/255
    <scene>/depths/<name>.depth   optional depth prior raster
    <scene>/targets/{images,masks,depths}/<name>.*   optional target ground truth

Depth raster: little-endian header ``u32 width, u32 height, f32 scale``
(12 bytes) followed by ``width*height`` little-endian f32 values, row-major;
depth = value * scale, 0 where undefined.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

MANIFEST = "cameras.json"
SCENE_FORMAT = "sparselab-scene/1"


class SceneFormatError(ValueError):
    pass


class MissingCameraFile(SceneFormatError, FileNotFoundError):
    pass


class ImageSizeMismatch(SceneFormatError):
    pass


class NonBinaryMask(SceneFormatError):
    pass


class PixelOutOfBounds(ValueError):
    pass


class InvalidCamera(ValueError):
    pass


# -- colour and raster I/O ------------------------------------------------------

def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def to_uint8(x: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit with round-half-even."""
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize_linear(img: np.ndarray) -> np.ndarray:
    """Snap a linear image onto the values an 8-bit sRGB file can hold."""
    return srgb_to_linear(to_uint8(linear_to_srgb(img)) / 255.0)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def write_png(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise TypeError("write_png expects uint8 data")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def read_image(path) -> np.ndarray:
    """8-bit sRGB PNG -> linear float64 (H, W, 3)."""
    arr = read_png(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return srgb_to_linear(arr[..., :3] / 255.0)


def write_image(path, img: np.ndarray) -> None:
    write_png(path, to_uint8(linear_to_srgb(img)))


def read_mask(path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    if not np.isin(arr, (0, 255)).all():
        bad = np.unique(arr[~np.isin(arr, (0, 255))])[:5]
        raise NonBinaryMask(f"{path}: mask values must be 0 or 255, found {bad.tolist()}")
    return arr == 255


def write_mask(path, mask: np.ndarray) -> None:
    write_png(path, np.where(mask, 255, 0).astype(np.uint8))


_DEPTH_HEADER = struct.Struct("<IIf")


def write_depth(path, depth: np.ndarray, scale: float = 1.0) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    h, w = depth.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_DEPTH_HEADER.pack(w, h, scale))
        fh.write((depth / np.float32(scale)).astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h, scale = _DEPTH_HEADER.unpack_from(blob)
    vals = np.frombuffer(blob, dtype="<f4", count=w * h, offset=_DEPTH_HEADER.size)
    if scale == 1.0:
        return vals.reshape(h, w).astype(np.float32)
    return (vals.reshape(h, w) * np.float32(scale)).astype(np.float32)


# -- cameras -----------------------------------------------------------------------

@dataclass
class Camera:
    intrinsics: np.ndarray  # 3x3
    world_from_camera: np.ndarray  # 4x4
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.world_from_camera = np.asarray(self.world_from_camera, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)
        self.near = float(self.near)
        self.far = float(self.far)

    fx = property(lambda self: self.intrinsics[0, 0])
    fy = property(lambda self: self.intrinsics[1, 1])
    cx = property(lambda self: self.intrinsics[0, 2])
    cy = property(lambda self: self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def validate(self) -> "Camera":
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-5) or np.linalg.det(r) < 0:
            raise InvalidCamera("rotation block is not orthonormal")
        if not np.allclose(self.world_from_camera[3], [0, 0, 0, 1]):
            raise InvalidCamera("world_from_camera last row must be (0, 0, 0, 1)")
        if not 0 < self.near < self.far:
            raise InvalidCamera(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidCamera("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidCamera("principal point outside the image")
        return self

    def scaled(self, factor: float) -> "Camera":
        """Camera for the same view at ``factor`` times the resolution."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        sx, sy = w / self.width, h / self.height
        k = self.intrinsics.copy()
        k[0] *= sx
        k[1] *= sy
        return replace(self, intrinsics=k, width=w, height=h)

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "world_from_camera": self.world_from_camera.tolist(),
            "width": self.width,
            "height": self.height,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict, near_far: tuple[float, float] | None = None) -> "Camera":
        near, far = d.get("near"), d.get("far")
        if near is None or far is None:
            if near_far is None:
                raise SceneFormatError("camera without near/far and no scene bounds to fit them")
            near, far = near_far
        return cls(d["intrinsics"], d["world_from_camera"], d["width"], d["height"], near, far)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, fwd, eye
    return m


def pinhole(width: int, height: int, fov_deg: float) -> np.ndarray:
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1]], dtype=np.float64)


def fit_near_far(position, center, radius: float, pad: float = 0.1) -> tuple[float, float]:
    """Bounds covering a sphere seen from ``position``, padded by ``pad``."""
    d = float(np.linalg.norm(np.asarray(position) - np.asarray(center)))
    near = max((d - radius) * (1 - pad), 1e-3)
    far = (d + radius) * (1 + pad)
    return near, far


def ring_cameras(count: int, radius: float, elevation_deg: float, width: int, height: int,
                 fov_deg: float, center=(0.0, 0.0, 0.0), bound_radius: float = 1.0,
                 azimuth_offset_deg: float = 0.0) -> list[Camera]:
    cams = []
    el = math.radians(elevation_deg)
    k = pinhole(width, height, fov_deg)
    for i in range(count):
        az = math.radians(azimuth_offset_deg) + 2 * math.pi * i / count
        eye = np.asarray(center) + radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        near, far = fit_near_far(eye, center, bound_radius)
        cams.append(Camera(k, look_at(eye, center), width, height, near, far))
    return cams


# -- rays ------------------------------------------------------------------------

@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    pixel: tuple[int, int]
    view: int


@dataclass
class RayBatch:
    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3), unit
    near: np.ndarray  # (N,)
    far: np.ndarray  # (N,)
    pixels: np.ndarray  # (N, 2) row, col
    views: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, i) -> "Ray | RayBatch":
        if isinstance(i, (int, np.integer)):
            return Ray(self.origins[i], self.directions[i], float(self.near[i]), float(self.far[i]),
                       (int(self.pixels[i, 0]), int(self.pixels[i, 1])), int(self.views[i]))
        return RayBatch(self.origins[i], self.directions[i], self.near[i], self.far[i], self.pixels[i], self.views[i])

    def __iter__(self) -> Iterator[Ray]:
        return (self[i] for i in range(len(self)))

    @staticmethod
    def concat(batches: Sequence["RayBatch"]) -> "RayBatch":
        return RayBatch(*(np.concatenate([getattr(b, f) for b in batches]) for f in
                          ("origins", "directions", "near", "far", "pixels", "views")))


def all_pixels(height: int, width: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=-1)


def generate_rays(camera: Camera, pixels: np.ndarray | None = None, view: int = 0) -> RayBatch:
    """Back-project pixel centres through a pinhole camera.

    ``pixels`` is an (N, 2) array of (row, col); ``None`` means every pixel in
    row-major order.
    """
    if pixels is None:
        pixels = all_pixels(camera.height, camera.width)
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    bad = (pixels[:, 0] < 0) | (pixels[:, 0] >= camera.height) | (pixels[:, 1] < 0) | (pixels[:, 1] >= camera.width)
    if bad.any():
        raise PixelOutOfBounds(f"pixel {tuple(pixels[bad][0])} outside {camera.height}x{camera.width} image")
    u = pixels[:, 1] + 0.5
    v = pixels[:, 0] + 0.5
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    n = len(pixels)
    return RayBatch(
        origins=np.broadcast_to(camera.position, (n, 3)).copy(),
        directions=d,
        near=np.full(n, camera.near),
        far=np.full(n, camera.far),
        pixels=pixels,
        views=np.full(n, view, dtype=np.int64),
    )


# -- scenes ------------------------------------------------------------------------

@dataclass
class View:
    name: str
    camera: Camera
    image: np.ndarray | None  # (H, W, 3) linear
    mask: np.ndarray | None = None  # (H, W) bool
    depth: np.ndarray | None = None  # (H, W) float32, 0 = undefined

    def validate(self) -> "View":
        self.camera.validate()
        hw = (self.camera.height, self.camera.width)
        if self.image is not None and self.image.shape[:2] != hw:
            raise ImageSizeMismatch(f"view {self.name}: image {self.image.shape[:2]} vs camera {hw}")
        if self.mask is not None:
            if self.mask.shape != hw:
                raise ImageSizeMismatch(f"view {self.name}: mask {self.mask.shape} vs camera {hw}")
            if self.mask.dtype != bool:
                raise NonBinaryMask(f"view {self.name}: mask must be boolean")
        if self.depth is not None:
            if self.depth.shape != hw:
                raise ImageSizeMismatch(f"view {self.name}: depth {self.depth.shape} vs camera {hw}")
            if self.mask is not None and not (self.depth[self.mask] > 0).all():
                raise SceneFormatError(f"view {self.name}: depth prior must be positive inside the mask")
        return self


BACKGROUNDS = {"white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0), "none": None}


@dataclass
class Scene:
    input_views: list[View]
    targets: list[View]  # camera always set; image/mask/depth only when ground truth is known
    background: str = "white"
    split: str = "train"
    source: str = "syn"
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0
    name: str = "scene"

    @property
    def target_cameras(self) -> list[Camera]:
        return [t.camera for t in self.targets]

    @property
    def background_rgb(self) -> np.ndarray | None:
        bg = BACKGROUNDS[self.background]
        return None if bg is None else np.array(bg)

    def validate(self) -> "Scene":
        if self.background not in BACKGROUNDS:
            raise SceneFormatError(f"unknown background {self.background!r}")
        for v in self.input_views:
            v.validate()
            if v.image is None:
                raise SceneFormatError(f"input view {v.name} has no image")
        for t in self.targets:
            t.validate()
        return self


def select_track(scene: Scene, track: int | None) -> Scene:
    """Restrict to 3 (track 1) or 9 (track 2) evenly spaced input views."""
    if track is None:
        return scene
    want = {1: 3, 2: 9}.get(int(track))
    if want is None:
        raise ValueError(f"track must be 1 or 2, got {track}")
    n = len(scene.input_views)
    if n < want:
        raise SceneFormatError(f"track {track} needs {want} input views, scene has {n}")
    idx = [int(i * n / want) for i in range(want)]
    return replace(scene, input_views=[scene.input_views[i] for i in idx])


def _fit_bounds(manifest: dict) -> tuple[np.ndarray, float]:
    return np.asarray(manifest.get("center", [0, 0, 0]), dtype=np.float64), float(manifest.get("radius", 1.0))


def _load_view(root: Path, entry: dict, center, radius, sub: str, require_image: bool) -> View:
    cam_d = entry["camera"]
    pos = np.asarray(cam_d["world_from_camera"], dtype=np.float64)[:3, 3]
    cam = Camera.from_dict(cam_d, fit_near_far(pos, center, radius))
    name = entry["name"]
    base = root / sub if sub else root
    img_path = base / "images" / f"{name}.png"
    image = read_image(img_path) if img_path.exists() else None
    if image is None and require_image:
        raise SceneFormatError(f"missing image {img_path}")
    mpath = base / "masks" / f"{name}.png"
    mask = read_mask(mpath) if mpath.exists() else None
    dpath = base / "depths" / f"{name}.depth"
    depth = read_depth(dpath) if dpath.exists() else None
    return View(name, cam, image, mask, depth).validate()


def load_scene(path) -> Scene:
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise MissingCameraFile(f"{root}: no {MANIFEST}")
    manifest = json.loads(mpath.read_text())
    center, radius = _fit_bounds(manifest)
    inputs = sorted(manifest.get("inputs", []), key=lambda e: e["name"])
    targets = sorted(manifest.get("targets", []), key=lambda e: e["name"])
    scene = Scene(
        input_views=[_load_view(root, e, center, radius, "", True) for e in inputs],
        targets=[_load_view(root, e, center, radius, "targets", False) for e in targets],
        background=manifest.get("background", "white"),
        split=manifest.get("split", "train"),
        source=manifest.get("source", "syn"),
        center=center,
        radius=radius,
        name=manifest.get("name", root.name),
    )
    return scene.validate()


def _save_view(root: Path, v: View) -> dict:
    if v.image is not None:
        write_image(root / "images" / f"{v.name}.png", v.image)
    if v.mask is not None:
        write_mask(root / "masks" / f"{v.name}.png", v.mask)
    if v.depth is not None:
        write_depth(root / "depths" / f"{v.name}.depth", v.depth)
    return {"name": v.name, "camera": v.camera.to_dict()}


def save_scene(scene: Scene, path) -> Path:
    """Write ``scene`` in the directory layout described in the module docstring.

    ``cameras.json`` keys: format, name, background, split, source, center,
    radius, inputs[{name, camera}], targets[{name, camera}]; a camera is
    {intrinsics 3x3, world_from_camera 4x4, width, height, near, far}.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": SCENE_FORMAT,
        "name": scene.name,
        "background": scene.background,
        "split": scene.split,
        "source": scene.source,
        "center": np.asarray(scene.center).tolist(),
        "radius": scene.radius,
        "inputs": [_save_view(root, v) for v in scene.input_views],
        "targets": [_save_view(root / "targets", t) for t in scene.targets],
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return root


# -- synthetic scenes --------------------------------------------------------------

@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    center: tuple[float, float, float]
    size: float | tuple[float, float, float]  # sphere radius or box edge lengths
    albedo: tuple[float, float, float]

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        s = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        if (s <= 0).any():
            raise ValueError(f"degenerate {self.kind}: size {self.size}")

    @property
    def bound(self) -> float:
        c = np.linalg.norm(self.center)
        if self.kind == "sphere":
            return c + float(self.size)
        return c + 0.5 * float(np.linalg.norm(np.broadcast_to(np.asarray(self.size, float), 3)))


@dataclass
class SyntheticSceneSpec:
    primitives: list[Primitive]
    light_direction: tuple[float, float, float] = (0.4, -0.3, 0.85)
    ambient: float = 0.25
    background: str = "white"
    ring_count: int = 9
    ring_radius: float = 3.2
    ring_elevation: float = 25.0
    target_count: int = 6
    target_elevation: float | None = None
    image_size: int = 64
    fov_deg: float = 35.0
    checker: float = 0.0  # albedo modulation amplitude of a 3D checker texture, 0 = flat
    checker_period: float = 0.25
    albedo_jitter: float = 0.0  # seeded per-primitive albedo perturbation
    name: str = "synthetic"

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        prims = [Primitive(p["kind"], tuple(p["center"]), p["size"] if np.isscalar(p["size"]) else tuple(p["size"]),
                           tuple(p["albedo"])) for p in d.pop("primitives", [])]
        if "light_direction" in d:
            d["light_direction"] = tuple(float(x) for x in d["light_direction"])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise KeyError(f"unknown synthetic scene key(s): {sorted(unknown)}")
        return cls(primitives=prims, **d)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "primitives"}
        out["primitives"] = [
            {"kind": p.kind, "center": list(p.center), "size": p.size if np.isscalar(p.size) else list(p.size),
             "albedo": list(p.albedo)} for p in self.primitives
        ]
        return out


def default_spec() -> SyntheticSceneSpec:
    """Sphere + box on a white background, 9-camera ring, 64x64."""
    return SyntheticSceneSpec(
        primitives=[
            Primitive("sphere", (-0.35, -0.1, 0.0), 0.45, (0.85, 0.3, 0.2)),
            Primitive("box", (0.4, 0.2, -0.05), (0.5, 0.5, 0.7), (0.2, 0.45, 0.85)),
        ],
        checker=0.35,
    )


def _intersect_sphere(o, d, c, r):
    oc = o - np.asarray(c)
    b = np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - r * r
    disc = b * b - cc
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    hit &= t > 1e-9
    pts = o + t[:, None] * d
    n = (pts - np.asarray(c)) / r
    return np.where(hit, t, np.inf), n


def _intersect_box(o, d, c, size):
    half = 0.5 * np.broadcast_to(np.asarray(size, dtype=np.float64), 3)
    lo, hi = np.asarray(c) - half, np.asarray(c) + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta, tb = (lo - o) * inv, (hi - o) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    t = np.where(tmin > 1e-9, tmin, tmax)
    pts = o + t[:, None] * d
    rel = (pts - np.asarray(c)) / half
    axis = np.argmax(np.abs(rel), axis=1)
    n = np.zeros_like(pts)
    n[np.arange(len(n)), axis] = np.sign(rel[np.arange(len(n)), axis])
    return np.where(hit, t, np.inf), n


def intersect(origins: np.ndarray, directions: np.ndarray, primitives: Sequence[Primitive]):
    """First hit of each ray: (t or inf, unit normal, primitive index or -1)."""
    best_t = np.full(len(origins), np.inf)
    best_n = np.zeros_like(origins)
    best_i = np.full(len(origins), -1)
    for i, p in enumerate(primitives):
        if p.kind == "sphere":
            t, n = _intersect_sphere(origins, directions, p.center, float(p.size))
        else:
            t, n = _intersect_box(origins, directions, p.center, p.size)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = n[closer]
        best_i[closer] = i
    return best_t, best_n, best_i


def occupancy(points: np.ndarray, primitives: Sequence[Primitive]) -> np.ndarray:
    """Boolean inside-test for (N, 3) points against the primitive union."""
    inside = np.zeros(len(points), dtype=bool)
    for p in primitives:
        c = np.asarray(p.center)
        if p.kind == "sphere":
            inside |= np.linalg.norm(points - c, axis=1) <= float(p.size)
        else:
            half = 0.5 * np.broadcast_to(np.asarray(p.size, dtype=np.float64), 3)
            inside |= (np.abs(points - c) <= half).all(axis=1)
    return inside


def _shade(spec: SyntheticSceneSpec, albedos: np.ndarray, rays: RayBatch, bg) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t, n, idx = intersect(rays.origins, rays.directions, spec.primitives)
    hit = idx >= 0
    light = np.asarray(spec.light_direction, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lam = spec.ambient + (1 - spec.ambient) * np.clip(n @ light, 0, None)
    alb = albedos[np.where(hit, idx, 0)]
    if spec.checker > 0:
        pts = rays.origins + np.where(hit, t, 0)[:, None] * rays.directions
        cell = np.floor(pts / spec.checker_period).astype(np.int64).sum(axis=1) % 2
        alb = alb * (1 - spec.checker * cell)[:, None]
    rgb = np.clip(alb * lam[:, None], 0, 1)
    bg_rgb = np.zeros(3) if bg is None else bg
    rgb = np.where(hit[:, None], rgb, bg_rgb)
    depth = np.where(hit, t, 0.0)
    return rgb, hit, depth


def synthesize_scene(spec: SyntheticSceneSpec, seed: int = 0) -> Scene:
    """Render an analytic scene with exact masks and first-hit depths.

    Images are snapped to the 8-bit sRGB grid so the in-memory scene equals
    the one read back from disk.
    """
    if not spec.primitives:
        raise ValueError("synthetic scene needs at least one primitive")
    rng = np.random.default_rng(seed)
    albedos = np.array([p.albedo for p in spec.primitives], dtype=np.float64)
    if spec.albedo_jitter > 0:
        albedos = np.clip(albedos + rng.uniform(-spec.albedo_jitter, spec.albedo_jitter, albedos.shape), 0, 1)
    center = np.zeros(3)
    radius = max(p.bound for p in spec.primitives)
    bg = BACKGROUNDS[spec.background]
    bg = None if bg is None else np.array(bg)
    size = spec.image_size
    in_cams = ring_cameras(spec.ring_count, spec.ring_radius, spec.ring_elevation, size, size, spec.fov_deg,
                           center, radius)
    tel = spec.ring_elevation if spec.target_elevation is None else spec.target_elevation
    tg_cams = ring_cameras(spec.target_count, spec.ring_radius, tel, size, size, spec.fov_deg, center, radius,
                           azimuth_offset_deg=180.0 / spec.ring_count)

    def make(cam: Camera, name: str) -> View:
        rays = generate_rays(cam)
        rgb, hit, depth = _shade(spec, albedos, rays, bg)
        img = quantize_linear(rgb.reshape(size, size, 3))
        return View(name, cam, img, hit.reshape(size, size), depth.reshape(size, size).astype(np.float32))

    scene = Scene(
        input_views=[make(c, f"{i:03d}") for i, c in enumerate(in_cams)],
        targets=[make(c, f"t{i:03d}") for i, c in enumerate(tg_cams)],
        background=spec.background,
        split="test",
        source="syn",
        center=center,
        radius=float(radius),
        name=spec.name,
    )
    return scene.validate()


def march_depth(rays: RayBatch, primitives: Sequence[Primitive], step: float = 1e-2, iters: int = 40) -> np.ndarray:
    """First-hit distance found by marching the occupancy test and bisecting.

    Independent of :func:`intersect`; used to cross-check it.  Returns 0 for
    rays that never enter the union.
    """
    out = np.zeros(len(rays))
    for i in range(len(rays)):
        o, d = rays.origins[i], rays.directions[i]
        ts = np.arange(rays.near[i], rays.far[i] + step, step)
        occ = occupancy(o + ts[:, None] * d, primitives)
        if not occ.any():
            continue
        k = int(np.argmax(occ))
        lo, hi = (ts[k - 1] if k > 0 else rays.near[i]), ts[k]
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if occupancy((o + mid * d)[None], primitives)[0]:
                hi = mid
            else:
                lo = mid
        out[i] = hi
    return out
