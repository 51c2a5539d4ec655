"""Sinusoidal positional encoding and the frequency-reveal mask.

Layout of ``encode(x)`` for ``L`` bands (length ``3 + 6L``)::

    [x0, x1, x2,
     sin(pi x0), sin(pi x1), sin(pi x2), cos(pi x0), cos(pi x1), cos(pi x2),   # band 0
     sin(2pi x0), ...                                                          # band 1
     ...  up to frequency 2^(L-1) pi]

The mask has ``L + 3`` slots: one per identity entry, then one per band.  A
band slot scales all six of that band's entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class EncodingConfig:
    L: int = 10
    T: int = 1  # step at which every band is visible
    include_identity: bool = True
    dims: int = 3
    L_dir: int = 4
    masked: bool = True
    mask_mode: str = "frac"  # "frac" | "literal"

    def __post_init__(self):
        if self.L < 0:
            raise ValueError("L must be >= 0")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.mask_mode not in ("frac", "literal"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")

    @property
    def width(self) -> int:
        return encoded_width(self.L, self.dims, self.include_identity)


def encoded_width(L: int, dims: int = 3, include_identity: bool = True) -> int:
    return (dims if include_identity else 0) + 2 * dims * L


def _bands(x: np.ndarray, L: int) -> np.ndarray:
    freqs = (2.0 ** np.arange(L)) * np.pi
    scaled = x[..., None, :] * freqs[:, None].astype(x.dtype)  # (..., L, dims)
    return np.concatenate([np.sin(scaled), np.cos(scaled)], axis=-1).reshape(*x.shape[:-1], -1)


def encode(x, cfg: EncodingConfig | int, dtype=None) -> np.ndarray:
    """Encode points (..., dims); returns (..., dims + 2*dims*L).

    ``dtype`` sets the working precision (default: that of ``x``, float64 for ints).
    """
    L = cfg if isinstance(cfg, int) else cfg.L
    identity = True if isinstance(cfg, int) else cfg.include_identity
    x = np.asarray(x)
    if dtype is not None:
        x = x.astype(dtype, copy=False)
    elif not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if not np.isfinite(x).all():
        raise ValueError("encode: non-finite input")
    parts = [x] if identity else []
    if L > 0:
        parts.append(_bands(x, L))
    return np.concatenate(parts, axis=-1) if parts else x[..., :0]


@dataclass(frozen=True)
class FrequencyMask:
    slots: np.ndarray  # (L + 3,)
    t: int


def mask_at(t: int, cfg: EncodingConfig) -> FrequencyMask:
    """Slot values at training step ``t``.

    With ``n = floor(t L / T)`` and ``r = frac(t L / T)``: the three identity
    slots and the first ``n`` band slots are 1, the next band slot is ``r``,
    the rest are 0; every slot is 1 once ``t >= T``.  ``mask_mode="literal"``
    instead fills the three slots after the fully-on ones with
    ``min(t L / T, 1)``.
    """
    if t < 0:
        raise ValueError("step must be >= 0")
    L, T = cfg.L, cfg.T
    slots = np.zeros(L + 3)
    if t >= T:
        slots[:] = 1.0
        return FrequencyMask(slots, t)
    n, rem = divmod(t * L, T)  # exact integer arithmetic
    slots[: n + 3] = 1.0
    if cfg.mask_mode == "frac":
        if n + 3 < L + 3:
            slots[n + 3] = rem / T
    else:
        slots[n + 3: n + 6] = min(t * L / T, 1.0)
    return FrequencyMask(slots, t)


def expand_mask(mask: FrequencyMask | np.ndarray, dims: int = 3) -> np.ndarray:
    slots = mask.slots if isinstance(mask, FrequencyMask) else np.asarray(mask)
    return np.concatenate([slots[:dims], np.repeat(slots[3:], 2 * dims)])


def apply_mask(encoded, mask: FrequencyMask | np.ndarray, dims: int = 3):
    """Scale encoded entries by their slot; works on arrays and Tensors."""
    full = expand_mask(mask, dims)
    if encoded.shape[-1] != full.size:
        raise ValueError(f"mask expands to {full.size} entries, encoding has {encoded.shape[-1]}")
    if isinstance(encoded, ad.Tensor):
        return ad.mul(encoded, full.astype(encoded.dtype))
    return encoded * full.astype(np.asarray(encoded).dtype)
