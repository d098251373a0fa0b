"""Invertible view augmentations (flip -> resize -> crop) and the inverse warp
that brings per-view predictions back into the canonical image frame.

Coordinates follow the pixel-centre convention: pixel ``k`` of an axis of
length ``n`` covers ``[k - 0.5, k + 0.5)``.  Resizing from ``n`` to ``m``
pixels maps a source coordinate ``u`` to ``(u + 0.5) * m / n - 0.5``.

Array layout: torch tensors carry the spatial axes last, ``(..., H, W)``.
Numpy inputs may be ``(H, W)`` or channels-last ``(H, W, C)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch


@dataclass(frozen=True)
class ViewTransform:
    flip: bool
    scale: float
    crop_origin: tuple[int, int]
    crop_size: tuple[int, int]
    canonical_size: tuple[int, int]

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if min(self.crop_size) <= 0:
            raise ValueError(f"crop_size must be positive, got {self.crop_size}")
        if min(self.crop_origin) < 0:
            raise ValueError(f"crop_origin must be non-negative, got {self.crop_origin}")
        sh, sw = self.scaled_size
        (r0, c0), (ch, cw) = self.crop_origin, self.crop_size
        if r0 + ch > sh or c0 + cw > sw:
            raise ValueError(
                f"crop window {self.crop_origin}+{self.crop_size} exceeds scaled image {self.scaled_size}"
            )

    @property
    def scaled_size(self) -> tuple[int, int]:
        h, w = self.canonical_size
        return scaled_extent(h, self.scale), scaled_extent(w, self.scale)

    @classmethod
    def identity(cls, size: tuple[int, int]) -> "ViewTransform":
        size = (int(size[0]), int(size[1]))
        return cls(False, 1.0, (0, 0), size, size)

    def to_dict(self) -> dict:
        return {
            "flip": self.flip,
            "scale": self.scale,
            "crop_origin": list(self.crop_origin),
            "crop_size": list(self.crop_size),
            "canonical_size": list(self.canonical_size),
        }


def scaled_extent(n: int, scale: float) -> int:
    # tolerate float noise such as 100 * 1.1 = 110.00000000000001
    return int(math.floor(n * scale + 1e-9))


@dataclass
class AugmentConfig:
    """Sampling ranges for view augmentations.

    ``crop_size=None`` takes ``crop_fraction`` of the canonical size per axis,
    rounded to a multiple of ``crop_multiple`` so that crops stay valid
    network inputs.
    """

    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.8, 1.2)
    crop_size: tuple[int, int] | None = None
    crop_fraction: float = 0.75
    crop_multiple: int = 16

    def resolve_crop(self, canonical_size: tuple[int, int]) -> tuple[int, int]:
        if self.crop_size is not None:
            return int(self.crop_size[0]), int(self.crop_size[1])
        out = []
        for n in canonical_size:
            c = int(round(n * self.crop_fraction))
            if self.crop_multiple > 1:
                c = max(self.crop_multiple, int(round(c / self.crop_multiple)) * self.crop_multiple)
            out.append(c)
        return out[0], out[1]


def sample_view_transform(
    rng: np.random.Generator, cfg: AugmentConfig, canonical_size: tuple[int, int]
) -> ViewTransform:
    s_lo, s_hi = (float(v) for v in cfg.scale_range)
    if not (0 < s_lo <= s_hi):
        raise ValueError(f"scale range must satisfy 0 < lo <= hi, got {cfg.scale_range}")
    if not 0.0 <= cfg.flip_prob <= 1.0:
        raise ValueError(f"flip_prob must lie in [0, 1], got {cfg.flip_prob}")
    h, w = int(canonical_size[0]), int(canonical_size[1])
    ch, cw = cfg.resolve_crop((h, w))
    if ch > scaled_extent(h, s_lo) or cw > scaled_extent(w, s_lo):
        raise ValueError(
            f"crop {(ch, cw)} does not fit the smallest scaled image "
            f"{(scaled_extent(h, s_lo), scaled_extent(w, s_lo))}"
        )

    flip = bool(rng.random() < cfg.flip_prob)
    scale = float(rng.uniform(s_lo, s_hi)) if s_hi > s_lo else s_lo
    sh, sw = scaled_extent(h, scale), scaled_extent(w, scale)
    r0 = int(rng.integers(0, sh - ch + 1))
    c0 = int(rng.integers(0, sw - cw + 1))
    return ViewTransform(flip, scale, (r0, c0), (ch, cw), (h, w))


# -- coordinate maps ---------------------------------------------------------


def _axis_view_to_canonical(idx, origin: int, n_canon: int, n_scaled: int):
    return (idx + origin + 0.5) * (n_canon / n_scaled) - 0.5


def _axis_canonical_to_view(coord, origin: int, n_canon: int, n_scaled: int):
    return (coord + 0.5) * (n_scaled / n_canon) - 0.5 - origin


def view_to_canonical_coords(t: ViewTransform, rows, cols):
    """Continuous canonical (row, col) of view-frame positions."""
    (h, w), (sh, sw) = t.canonical_size, t.scaled_size
    r = _axis_view_to_canonical(np.asarray(rows, dtype=np.float64), t.crop_origin[0], h, sh)
    c = _axis_view_to_canonical(np.asarray(cols, dtype=np.float64), t.crop_origin[1], w, sw)
    if t.flip:
        c = (w - 1) - c
    return r, c


def canonical_to_view_coords(t: ViewTransform, rows, cols):
    """Continuous view-frame (row, col) of canonical positions."""
    (h, w), (sh, sw) = t.canonical_size, t.scaled_size
    cols = np.asarray(cols, dtype=np.float64)
    if t.flip:
        cols = (w - 1) - cols
    r = _axis_canonical_to_view(np.asarray(rows, dtype=np.float64), t.crop_origin[0], h, sh)
    c = _axis_canonical_to_view(cols, t.crop_origin[1], w, sw)
    return r, c


def covered(t: ViewTransform, rows, cols) -> np.ndarray:
    """True where a canonical position falls inside the crop window's pixel extent."""
    r, c = canonical_to_view_coords(t, rows, cols)
    ch, cw = t.crop_size
    return (r >= -0.5) & (r < ch - 0.5) & (c >= -0.5) & (c < cw - 0.5)


# -- separable resampling ----------------------------------------------------


class _AxisTaps(NamedTuple):
    lo: torch.Tensor
    hi: torch.Tensor
    frac: np.ndarray


def _taps(coords: np.ndarray, n: int) -> _AxisTaps:
    c = np.clip(coords, 0.0, n - 1)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    return _AxisTaps(torch.from_numpy(lo), torch.from_numpy(hi), c - lo)


def _resample_axis(x: torch.Tensor, coords: np.ndarray, dim: int, mode: str) -> torch.Tensor:
    n = x.shape[dim]
    if mode == "nearest":
        idx = np.clip(np.floor(coords + 0.5), 0, n - 1).astype(np.int64)
        return x.index_select(dim, torch.from_numpy(idx))
    if mode != "bilinear":
        raise ValueError(f"unknown resampling mode {mode!r}")
    taps = _taps(coords, n)
    shape = [1] * x.dim()
    shape[dim] = len(coords)
    w = torch.as_tensor(taps.frac, dtype=x.dtype).reshape(shape)
    return x.index_select(dim, taps.lo) * (1 - w) + x.index_select(dim, taps.hi) * w


def _as_torch(img):
    """Return (tensor in (..., H, W) layout, function restoring the input type)."""
    if isinstance(img, torch.Tensor):
        return img, lambda out: out
    arr = np.asarray(img)
    if arr.ndim == 2:
        return torch.from_numpy(arr), lambda out: out.numpy()
    if arr.ndim == 3:
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))), (
            lambda out: np.ascontiguousarray(out.numpy().transpose(1, 2, 0))
        )
    raise ValueError(f"expected a 2-D or 3-D array, got shape {arr.shape}")


def _spatial_shape(img) -> tuple[int, int]:
    if isinstance(img, torch.Tensor):
        return tuple(img.shape[-2:])
    arr = np.asarray(img)
    return tuple(arr.shape[:2])


def apply_transform(img, t: ViewTransform, mode: str = "bilinear"):
    """Render the view of ``img`` described by ``t``.

    Use ``mode="nearest"`` for label masks so they stay binary.
    """
    if _spatial_shape(img) != tuple(t.canonical_size):
        raise ValueError(
            f"image spatial shape {_spatial_shape(img)} != canonical size {t.canonical_size}"
        )
    x, restore = _as_torch(img)
    ch, cw = t.crop_size
    rows, cols = view_to_canonical_coords(t, np.arange(ch), np.arange(cw))
    out = _resample_axis(x, rows, x.dim() - 2, mode)
    out = _resample_axis(out, cols, x.dim() - 1, mode)
    return restore(out)


@dataclass
class CanonicalPrediction:
    values: torch.Tensor
    validity: torch.Tensor = field(repr=False)

    @property
    def shape(self):
        return tuple(self.values.shape)


def validity_mask(t: ViewTransform) -> torch.Tensor:
    h, w = t.canonical_size
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    return torch.from_numpy(covered(t, rows, cols))


def to_canonical(pred, t: ViewTransform, mode: str = "bilinear") -> CanonicalPrediction:
    """Inverse-warp a view-frame prediction ``(..., ch, cw)`` into the canonical frame.

    The map is linear in ``pred``, so autograd carries canonical-frame loss
    gradients back to the view-frame prediction.  Invalid pixels are zero.
    """
    x = pred if isinstance(pred, torch.Tensor) else torch.as_tensor(np.asarray(pred))
    if tuple(x.shape[-2:]) != tuple(t.crop_size):
        raise ValueError(f"prediction shape {tuple(x.shape[-2:])} != crop size {t.crop_size}")
    h, w = t.canonical_size
    vr, _ = canonical_to_view_coords(t, np.arange(h), np.zeros(1))
    _, vc = canonical_to_view_coords(t, np.zeros(1), np.arange(w))
    out = _resample_axis(x, vr, x.dim() - 2, mode)
    out = _resample_axis(out, vc, x.dim() - 1, mode)
    valid = validity_mask(t)
    out = out * valid.to(out.dtype)
    return CanonicalPrediction(out, valid)


def intersection_masks(
    a: CanonicalPrediction, b: CanonicalPrediction, threshold: float = 0.5
) -> tuple[torch.Tensor, torch.Tensor]:
    """Foreground and background agreement regions of two canonical predictions.

    Binarisation only selects pixels; no gradient flows through it.
    """
    if a.values.shape != b.values.shape or a.validity.shape != b.validity.shape:
        raise ValueError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    joint = a.validity & b.validity
    va, vb = a.values.detach(), b.values.detach()
    fg = joint & (va >= threshold) & (vb >= threshold)
    bg = joint & (va < threshold) & (vb < threshold)
    return fg, bg
