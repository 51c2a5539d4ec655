"""Radiance fields: bottleneck trunk, density head, feature head, colour head.

    b = M_b(gamma(p))          trunk MLP with one skip connection
    sigma = softplus(M_s(b))   depends on position only
    f = M_f(b)                 feature head (feature-conditioned variant only)
    c = sigmoid(M_c([b, f, gamma_dir(d)]))
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .encoding import EncodingConfig, apply_mask, encode, encoded_width, mask_at

VARIANTS = ("plain", "feature_conditioned")


@dataclass
class FieldConfig:
    width: int = 64
    depth: int = 4
    bottleneck: int = 64
    feature: int = 12
    skip: int = 2
    variant: str = "plain"
    color_width: int = 32
    feature_width: int = 32
    pos_scale: float = 1.0  # encoded point = (p - pos_center) * pos_scale
    pos_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)

    def __post_init__(self):
        if isinstance(self.encoding, dict):
            self.encoding = EncodingConfig(**self.encoding)
        self.pos_center = tuple(float(c) for c in self.pos_center)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown field variant {self.variant!r}")
        for name in ("width", "depth", "bottleneck", "color_width", "feature_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.variant == "feature_conditioned" and self.feature < 1:
            raise ValueError("feature-conditioned field needs feature >= 1")

    @property
    def has_features(self) -> bool:
        return self.variant == "feature_conditioned"

    def to_dict(self) -> dict:
        return asdict(self)


class FieldParams:
    """Named weight tensors in declaration order."""

    def __init__(self, tensors: "OrderedDict[str, ad.Tensor]"):
        self.tensors = tensors

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def list(self) -> list[ad.Tensor]:
        return list(self.tensors.values())

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def set_flat(self, values: np.ndarray) -> None:
        pos = 0
        for t in self.tensors.values():
            t.data = np.asarray(values[pos:pos + t.size], dtype=t.dtype).reshape(t.shape).copy()
            pos += t.size

    def copy(self) -> "FieldParams":
        return FieldParams(OrderedDict((k, ad.Tensor(v.data.copy(), requires_grad=True, name=k))
                                       for k, v in self.tensors.items()))

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(OrderedDict((k, ad.Tensor(v.data.astype(dtype), requires_grad=True, name=k))
                                       for k, v in self.tensors.items()))


def _layer_shapes(cfg: FieldConfig) -> list[tuple[str, tuple[int, int]]]:
    enc = cfg.encoding.width
    shapes = []
    fan_in = enc
    for i in range(cfg.depth):
        if i == cfg.skip and i > 0:
            fan_in += enc
        shapes.append((f"trunk{i}", (fan_in, cfg.width)))
        fan_in = cfg.width
    shapes.append(("bottleneck", (fan_in, cfg.bottleneck)))
    shapes.append(("density", (cfg.bottleneck, 1)))
    color_in = cfg.bottleneck + encoded_width(cfg.encoding.L_dir)
    if cfg.has_features:
        shapes.append(("feature0", (cfg.bottleneck, cfg.feature_width)))
        shapes.append(("feature1", (cfg.feature_width, cfg.feature)))
        color_in += cfg.feature
    shapes.append(("color0", (color_in, cfg.color_width)))
    shapes.append(("color1", (cfg.color_width, 3)))
    return shapes


def init_params(cfg: FieldConfig, seed: int = 0, dtype=ad.TRAIN_DTYPE) -> FieldParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, ad.Tensor] = OrderedDict()
    for name, (fi, fo) in _layer_shapes(cfg):
        bound = np.sqrt(6.0 / (fi + fo))
        tensors[f"{name}.w"] = ad.Tensor(rng.uniform(-bound, bound, (fi, fo)).astype(dtype), requires_grad=True,
                                         name=f"{name}.w")
        tensors[f"{name}.b"] = ad.Tensor(np.zeros(fo, dtype=dtype), requires_grad=True, name=f"{name}.b")
    return FieldParams(tensors)


class FieldOutput(NamedTuple):
    sigma: ad.Tensor  # (N,)
    rgb: ad.Tensor  # (N, 3)
    feature: ad.Tensor | None  # (N, F)
    bottleneck: ad.Tensor  # (N, B)


class NonFiniteActivation(ad.NonFiniteError):
    def __init__(self, layer: str, op: str):
        FloatingPointError.__init__(self, f"non-finite activation in layer '{layer}' (op '{op}')")
        self.op = op
        self.layer = layer


def _dense(params: FieldParams, name: str, x: ad.Tensor) -> ad.Tensor:
    try:
        return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])
    except ad.NonFiniteError as exc:
        raise NonFiniteActivation(name, exc.op) from exc


def encode_points(points: np.ndarray, cfg: FieldConfig, step: int | None, dtype) -> np.ndarray:
    x = (np.asarray(points, dtype=np.float64) - np.asarray(cfg.pos_center)) * cfg.pos_scale
    enc = encode(x, cfg.encoding, dtype)
    if cfg.encoding.masked and step is not None:
        enc = apply_mask(enc, mask_at(step, cfg.encoding))
    return enc


def batch_query(params: FieldParams, points: np.ndarray, dirs: np.ndarray, cfg: FieldConfig,
                step: int | None = None) -> FieldOutput:
    """Evaluate the field at (N, 3) points with (N, 3) unit view directions.

    ``step`` drives the frequency mask; ``None`` disables masking (all bands on).
    """
    dtype = params.list()[0].dtype
    enc = ad.Tensor(encode_points(points, cfg, step, dtype))
    h = enc
    for i in range(cfg.depth):
        if i == cfg.skip and i > 0:
            h = ad.concat([h, enc], axis=-1)
        h = ad.relu(_dense(params, f"trunk{i}", h))
    b = _dense(params, "bottleneck", h)
    try:
        sigma = ad.reshape(ad.softplus(_dense(params, "density", b)), (-1,))
    except ad.NonFiniteError as exc:
        raise NonFiniteActivation("density", exc.op) from exc
    feat = None
    parts = [b]
    if cfg.has_features:
        feat = _dense(params, "feature1", ad.relu(_dense(params, "feature0", b)))
        parts.append(feat)
    parts.append(ad.Tensor(encode(dirs, cfg.encoding.L_dir, dtype)))
    c = ad.relu(_dense(params, "color0", ad.concat(parts, axis=-1)))
    rgb = ad.sigmoid(_dense(params, "color1", c))
    return FieldOutput(sigma, rgb, feat, b)


def query(params: FieldParams, point, direction, cfg: FieldConfig, step: int | None = None) -> FieldOutput:
    """Single-sample query; returns the same tuple with the batch axis removed."""
    out = batch_query(params, np.asarray(point, dtype=np.float64)[None], np.asarray(direction, dtype=np.float64)[None],
                      cfg, step)
    return FieldOutput(out.sigma[0], out.rgb[0], None if out.feature is None else out.feature[0], out.bottleneck[0])


def save_field(path, params: FieldParams, cfg: FieldConfig) -> None:
    """``<path>`` holds the values, ``<path>.json`` the FieldConfig manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(path, params.list())
    manifest = {"field": cfg.to_dict(), "tensors": [[k, list(v.shape)] for k, v in params.tensors.items()]}
    Path(f"{path}.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_field(path) -> tuple[FieldParams, FieldConfig]:
    path = Path(path)
    manifest = json.loads(Path(f"{path}.json").read_text())
    cfg = FieldConfig(**manifest["field"])
    with open(path, "rb") as fh:
        width = ad._HEADER.unpack(fh.read(ad._HEADER.size))[3]
    params = init_params(cfg, dtype={4: np.float32, 8: np.float64}[width])
    ad.load_checkpoint(path, params.list())
    return params, cfg
