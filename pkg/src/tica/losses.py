"""Loss kernels with closed-form gradients.

Every kernel returns a :class:`LossValue` carrying the scalar value and the
gradient with respect to each prediction, so callers can push the gradient
through the network with ``tensor.backward(grad)``.  Kernels never build an
autograd graph of their own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .geometry import CanonicalPrediction, intersection_masks

EPS = 1e-7
KL_MODES = ("sym", "fwd", "rev")


@dataclass
class LossValue:
    value: float
    grad_y1: torch.Tensor
    grad_y2: torch.Tensor | None = None
    pixel_count: int = 0


@dataclass(frozen=True)
class LossWeights:
    lambda_fg: float = 0.5
    lambda_bg: float = 1.0

    def __post_init__(self):
        for name in ("lambda_fg", "lambda_bg"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _values(y) -> torch.Tensor:
    if isinstance(y, CanonicalPrediction):
        y = y.values
    return torch.as_tensor(y).detach()


def _clamp(y: torch.Tensor):
    """Clamp to [EPS, 1-EPS]; also return d(clamped)/dy (0 where clipped)."""
    yc = y.clamp(EPS, 1 - EPS)
    return yc, ((y >= EPS) & (y <= 1 - EPS)).to(y.dtype)


def _logit(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p) - torch.log1p(-p)


def bernoulli_kl(p, q):
    """KL(Bern(p) || Bern(q)), elementwise, after clamping both to [EPS, 1-EPS]."""
    p = torch.as_tensor(p, dtype=torch.float64).clamp(EPS, 1 - EPS)
    q = torch.as_tensor(q, dtype=torch.float64).clamp(EPS, 1 - EPS)
    out = p * (torch.log(p) - torch.log(q)) + (1 - p) * (torch.log1p(-p) - torch.log1p(-q))
    return out.clamp_min(0.0)


def sym_kl(a, b):
    """Symmetrised Bernoulli KL: 0.5 * (KL(a||b) + KL(b||a)) = 0.5 * (a-b) * (logit a - logit b)."""
    a = torch.as_tensor(a, dtype=torch.float64).clamp(EPS, 1 - EPS)
    b = torch.as_tensor(b, dtype=torch.float64).clamp(EPS, 1 - EPS)
    return 0.5 * (a - b) * (_logit(a) - _logit(b))


def _kl_terms(a: torch.Tensor, b: torch.Tensor, kl_mode: str):
    """Pointwise divergence and its partials wrt (clamped) a and b."""
    la, lb = _logit(a), _logit(b)
    if kl_mode == "sym":
        d = a - b
        dl = la - lb
        val = 0.5 * d * dl
        ga = 0.5 * (dl + d / (a * (1 - a)))
        gb = 0.5 * (-dl - d / (b * (1 - b)))
        return val, ga, gb
    if kl_mode == "rev":
        val, gb, ga = _kl_terms(b, a, "fwd")
        return val, ga, gb
    if kl_mode != "fwd":
        raise ValueError(f"kl_mode must be one of {KL_MODES}, got {kl_mode!r}")
    val = a * (torch.log(a) - torch.log(b)) + (1 - a) * (torch.log1p(-a) - torch.log1p(-b))
    ga = la - lb
    gb = (b - a) / (b * (1 - b))
    return val, ga, gb


def _region_kl(y1, y2, mask, kl_mode: str) -> LossValue:
    a_raw, b_raw = _values(y1), _values(y2)
    if a_raw.shape != b_raw.shape:
        raise ValueError(f"shape mismatch: {tuple(a_raw.shape)} vs {tuple(b_raw.shape)}")
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != a_raw.shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} != prediction shape {tuple(a_raw.shape)}")
    g1 = torch.zeros_like(a_raw)
    g2 = torch.zeros_like(b_raw)
    n = int(mask.sum())
    if n == 0:
        return LossValue(0.0, g1, g2, 0)
    a, da = _clamp(a_raw[mask])
    b, db = _clamp(b_raw[mask])
    val, ga, gb = _kl_terms(a, b, kl_mode)
    g1[mask] = ga * da / n
    g2[mask] = gb * db / n
    return LossValue(max(float(val.sum()) / n, 0.0), g1, g2, n)


def fc_loss(y1, y2, fg_mask, kl_mode: str = "sym") -> LossValue:
    """Mean divergence between two predictions over the foreground agreement region."""
    return _region_kl(y1, y2, fg_mask, kl_mode)


def bc_loss(y1, y2, bg_mask, kl_mode: str = "sym") -> LossValue:
    """Foreground kernel on the complements ``1 - y`` over the background region."""
    out = _region_kl(1 - _values(y1), 1 - _values(y2), bg_mask, kl_mode)
    return LossValue(out.value, -out.grad_y1, -out.grad_y2, out.pixel_count)


@dataclass
class TicaLoss(LossValue):
    fc: float = 0.0
    bc: float = 0.0
    fg_pixels: int = 0
    bg_pixels: int = 0


def tica_loss(
    y1: CanonicalPrediction,
    y2: CanonicalPrediction,
    weights: LossWeights = LossWeights(),
    threshold: float = 0.5,
    kl_mode: str = "sym",
) -> TicaLoss:
    fg, bg = intersection_masks(y1, y2, threshold)
    f = fc_loss(y1, y2, fg, kl_mode)
    b = bc_loss(y1, y2, bg, kl_mode)
    lf, lb = weights.lambda_fg, weights.lambda_bg
    return TicaLoss(
        value=lf * f.value + lb * b.value,
        grad_y1=lf * f.grad_y1 + lb * b.grad_y1,
        grad_y2=lf * f.grad_y2 + lb * b.grad_y2,
        pixel_count=f.pixel_count + b.pixel_count,
        fc=f.value,
        bc=b.value,
        fg_pixels=f.pixel_count,
        bg_pixels=b.pixel_count,
    )


def bbce(pred, gt, literal: bool = False) -> LossValue:
    """Class-balanced binary cross-entropy of one image, summed over pixels.

    Default weights are inverse class frequency (the positive term gets
    ``N_n / N``).  ``literal=True`` swaps them so the positive term gets
    ``N_p / N``.
    """
    y_raw = _values(pred)
    g = torch.as_tensor(gt).detach().to(y_raw.dtype)
    if y_raw.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(y_raw.shape)} vs {tuple(g.shape)}")
    if y_raw.numel() == 0:
        raise ValueError("empty prediction")
    if not bool(((g == 0) | (g == 1)).all()):
        raise ValueError("ground truth must be binary {0, 1}")
    n = g.numel()
    n_pos = float(g.sum())
    n_neg = n - n_pos
    w_pos, w_neg = (n_pos / n, n_neg / n) if literal else (n_neg / n, n_pos / n)
    y, dy = _clamp(y_raw)
    val = -(w_pos * g * torch.log(y) + w_neg * (1 - g) * torch.log1p(-y))
    grad = (-w_pos * g / y + w_neg * (1 - g) / (1 - y)) * dy
    return LossValue(float(val.sum()), grad, None, n)


def binary_entropy(p) -> torch.Tensor:
    p = torch.as_tensor(p).clamp(EPS, 1 - EPS)
    return -(p * torch.log(p) + (1 - p) * torch.log1p(-p))


def entropy_loss(pred) -> LossValue:
    """Mean per-pixel binary entropy; gradient is ``-logit(p) / N``."""
    y_raw = _values(pred)
    n = y_raw.numel()
    y, dy = _clamp(y_raw)
    val = -(y * torch.log(y) + (1 - y) * torch.log1p(-y))
    grad = -_logit(y) * dy / n
    return LossValue(float(val.sum()) / n, grad, None, n)
