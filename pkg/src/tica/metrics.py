"""Confusion counting and balanced error rate."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for k in ("tp", "fp", "tn", "fn"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class BerReport:
    ber: float
    ber_shadow: float
    ber_nonshadow: float
    counts: ConfusionCounts
    degenerate: list[str] = field(default_factory=list)
    per_image: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ber_x100"] = 100.0 * self.ber
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BerReport":
        return cls(
            ber=float(d["ber"]),
            ber_shadow=float(d["ber_shadow"]),
            ber_nonshadow=float(d["ber_nonshadow"]),
            counts=ConfusionCounts(**d["counts"]),
            degenerate=list(d.get("degenerate", [])),
            per_image=[float(v) for v in d.get("per_image", [])],
            meta=dict(d.get("meta", {})),
        )


def _as_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def confusion(pred, gt, threshold: float = 0.5) -> ConfusionCounts:
    p = _as_numpy(pred)
    g = _as_numpy(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    pb = p >= threshold
    gb = g > 0.5
    tp = int(np.count_nonzero(pb & gb))
    fp = int(np.count_nonzero(pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    return ConfusionCounts(tp, fp, int(pb.size) - tp - fp - fn, fn)


def accumulate(pred, gt, threshold: float = 0.5, acc: ConfusionCounts | None = None) -> ConfusionCounts:
    c = confusion(pred, gt, threshold)
    return c if acc is None else acc + c


def ber(c: ConfusionCounts) -> BerReport:
    """BER = 1 - (TP/(TP+FN) + TN/(TN+FP)) / 2.

    A class with no pixels has recall 1 and is listed in ``degenerate``.
    """
    if c.total == 0:
        raise ValueError("cannot compute BER from empty counts")
    degenerate = []
    if c.tp + c.fn > 0:
        rec_pos = c.tp / (c.tp + c.fn)
    else:
        rec_pos = 1.0
        degenerate.append("no_shadow_pixels")
    if c.tn + c.fp > 0:
        rec_neg = c.tn / (c.tn + c.fp)
    else:
        rec_neg = 1.0
        degenerate.append("no_nonshadow_pixels")
    return BerReport(
        ber=1.0 - 0.5 * (rec_pos + rec_neg),
        ber_shadow=1.0 - rec_pos,
        ber_nonshadow=1.0 - rec_neg,
        counts=c,
        degenerate=degenerate,
    )


def ber_from_predictions(preds, gts, threshold: float = 0.5) -> BerReport:
    """Pool counts over all images, then compute one BER; per-image BERs ride along."""
    total = ConfusionCounts()
    per_image = []
    for p, g in zip(preds, gts, strict=True):
        c = confusion(p, g, threshold)
        per_image.append(ber(c).ber)
        total = total + c
    report = ber(total)
    report.per_image = per_image
    return report


def evaluate(model, dataset, threshold: float = 0.5, batch_size: int = 8) -> BerReport:
    """Eval-mode predictions of ``model`` over ``dataset`` (a list of SamplePair)."""
    from .adapt import predict_batch

    preds = predict_batch(model, [s.image for s in dataset], batch_size=batch_size)
    report = ber_from_predictions(preds, [s.mask for s in dataset], threshold)
    report.meta["threshold"] = threshold
    report.meta["n_images"] = len(dataset)
    return report
