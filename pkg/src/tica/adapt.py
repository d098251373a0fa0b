"""Supervised training and test-time adaptation (TICA, TENT, BN, ETA).

All routines work on a deep copy of the incoming model and return the
adapted copy together with a per-step loss trace.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .geometry import AugmentConfig, apply_transform, sample_view_transform, to_canonical
from .losses import LossWeights, bbce, binary_entropy, entropy_loss, tica_loss
from .model import ShadowNet, norm_modules, scope_parameter_names, to_batch

log = logging.getLogger(__name__)

METHODS = ("none", "tica", "tent", "bn", "eta")
DEFAULT_SCOPE = {"none": "none", "tica": "encoder", "tent": "norm-affine", "eta": "norm-affine", "bn": "none"}
# running statistics each method may touch
STAT_SCOPE = {"none": "none", "tica": "encoder", "tent": "all", "eta": "all", "bn": "all"}
# entropy objectives tolerate far larger steps than the consistency loss
DEFAULT_LR = {"none": 0.0, "tica": 1e-5, "tent": 1e-3, "eta": 1e-3, "bn": 0.0}


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 2e-3
    weight_decay: float = 1e-2
    batch_size: int = 8
    cosine: bool = True
    bbce_literal: bool = False
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("train config needs epochs >= 1, batch_size >= 1, lr >= 0")
        return self


@dataclass
class AdaptConfig:
    method: str = "tica"
    epochs: int = 5
    batch_size: int = 4
    lr: float | None = None  # None -> method default
    weights: LossWeights = field(default_factory=LossWeights)
    threshold: float = 0.5
    update_scope: str | None = None  # None -> method default
    kl_mode: str = "sym"
    eta_entropy_threshold: float = 0.4 * math.log(2)
    mode: str = "continual"  # continual | episodic
    norm_stats: str = "train"  # train: batch statistics; eval: frozen running statistics
    grad_clip: float | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def validate(self) -> "AdaptConfig":
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr is not None and not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.mode not in ("continual", "episodic"):
            raise ValueError(f"mode must be continual or episodic, got {self.mode!r}")
        if self.norm_stats not in ("train", "eval"):
            raise ValueError(f"norm_stats must be train or eval, got {self.norm_stats!r}")
        return self

    @property
    def scope(self) -> str:
        return self.update_scope or DEFAULT_SCOPE[self.method]

    @property
    def learning_rate(self) -> float:
        return DEFAULT_LR[self.method] if self.lr is None else float(self.lr)


@dataclass
class AdaptResult:
    model: ShadowNet
    trace: list[dict] = field(default_factory=list)
    predictions: list[np.ndarray] | None = None  # episodic mode only


EpochHook = Callable[[int, ShadowNet], None]


def _image_tensor(img, dtype) -> torch.Tensor:
    """Channels-last numpy image -> (C, H, W) tensor."""
    return to_batch(img, dtype=dtype)[0]


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield list(range(start, min(start + size, n)))


def _scoped_optimizer(model: nn.Module, scope: str, lr: float, weight_decay: float | None = None):
    names = scope_parameter_names(model, scope)
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in names)
        if name in names:
            params.append(p)
    if not params:
        return None
    if weight_decay is None:
        return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=weight_decay)


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at {where}")


def _step(optimizer, params, grad_clip):
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(params, grad_clip)
    optimizer.step()
    optimizer.zero_grad(set_to_none=False)


# -- supervised stage --------------------------------------------------------


@dataclass
class TrainResult:
    model: ShadowNet
    epoch_losses: list[float]
    trace: list[dict]
    steps: int


def train_supervised(
    model: ShadowNet,
    train_set,
    cfg: TrainConfig | None = None,
    start_step: int = 0,
    total_steps: int | None = None,
) -> TrainResult:
    """Minimise the mean per-image balanced BCE with AdamW and cosine-decayed lr.

    Every sample is augmented with a fresh random view each epoch.  ``start_step``
    and ``total_steps`` let a resumed run continue the same schedule.
    """
    cfg = (cfg or TrainConfig()).validate()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    model = copy.deepcopy(model)
    dtype = next(model.parameters()).dtype
    opt = _scoped_optimizer(model, "all", cfg.lr, cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = total_steps or start_step + cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, start_step]))

    def lr_at(step):
        if not cfg.cosine:
            return cfg.lr
        return 0.5 * cfg.lr * (1 + math.cos(math.pi * min(step, total) / total))

    model.train()
    trace, epoch_losses, step = [], [], start_step
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for b, idx in enumerate(_batches(len(order), cfg.batch_size)):
            xs, ys = [], []
            for i in order[idx]:
                s = train_set[i]
                t = sample_view_transform(rng, cfg.augment, s.mask.shape)
                xs.append(apply_transform(_image_tensor(s.image, dtype), t))
                ys.append(apply_transform(torch.from_numpy(s.mask), t, mode="nearest"))
            probs = torch.sigmoid(model(torch.stack(xs)))[:, 0]
            grads, total_loss = [], 0.0
            for k, y in enumerate(ys):
                lv = bbce(probs[k], y, literal=cfg.bbce_literal)
                total_loss += lv.value
                grads.append(lv.grad_y1 / len(ys))
            loss = total_loss / len(ys)
            _check_finite(loss, f"train epoch {epoch} batch {b}")
            for g in opt.param_groups:
                g["lr"] = lr_at(step)
            probs.backward(torch.stack(grads))
            _step(opt, opt.param_groups[0]["params"], None)
            trace.append({"epoch": epoch, "batch": b, "step": step, "method": "train", "loss": loss})
            losses.append(loss)
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        log.info("train epoch %d loss %.4f", epoch, epoch_losses[-1])
    model.eval()
    return TrainResult(model, epoch_losses, trace, step)


# -- inference ---------------------------------------------------------------


@torch.no_grad()
def predict_batch(model: ShadowNet, images, batch_size: int = 8) -> list[np.ndarray]:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for idx in _batches(len(images), batch_size):
        x = to_batch([images[i] for i in idx], dtype=dtype)
        out.extend(p for p in torch.sigmoid(model(x))[:, 0].numpy())
    return out


def predict(model: ShadowNet, image) -> np.ndarray:
    """Eval-mode shadow probabilities ``(H, W)`` for one channels-last image."""
    return predict_batch(model, [image], batch_size=1)[0]


# -- test-time adaptation ------------------------------------------------------


def _set_modes(model: ShadowNet, cfg: AdaptConfig) -> None:
    if cfg.norm_stats == "eval":
        model.eval()
        return
    if cfg.method == "tica":
        model.encoder.train()
        model.decoder.eval()
    else:
        model.train()


def _tica_batch(model, images, cfg, rng, dtype):
    xs1, xs2, ts1, ts2 = [], [], [], []
    for img in images:
        x = _image_tensor(img, dtype)
        size = tuple(x.shape[-2:])
        t1 = sample_view_transform(rng, cfg.augment, size)
        t2 = sample_view_transform(rng, cfg.augment, size)
        xs1.append(apply_transform(x, t1))
        xs2.append(apply_transform(x, t2))
        ts1.append(t1)
        ts2.append(t2)
    n = len(images)
    probs = torch.sigmoid(model(torch.stack(xs1 + xs2)))[:, 0]
    outs, grads, rec = [], [], {"loss": 0.0, "fc": 0.0, "bc": 0.0, "fg_pixels": 0, "bg_pixels": 0}
    for k in range(n):
        c1 = to_canonical(probs[k], ts1[k])
        c2 = to_canonical(probs[n + k], ts2[k])
        lv = tica_loss(c1, c2, cfg.weights, cfg.threshold, cfg.kl_mode)
        outs += [c1.values, c2.values]
        grads += [lv.grad_y1 / n, lv.grad_y2 / n]
        rec["loss"] += lv.value / n
        rec["fc"] += lv.fc / n
        rec["bc"] += lv.bc / n
        rec["fg_pixels"] += lv.fg_pixels
        rec["bg_pixels"] += lv.bg_pixels
    return outs, grads, rec


def _entropy_batch(model, images, cfg, dtype, select: bool):
    probs = torch.sigmoid(model(to_batch(list(images), dtype=dtype)))[:, 0]
    n = len(images)
    grads, total, chosen = [], 0.0, 0
    for k in range(n):
        lv = entropy_loss(probs[k])
        keep = (not select) or lv.value < cfg.eta_entropy_threshold
        grads.append(lv.grad_y1 / n if keep else torch.zeros_like(lv.grad_y1))
        if keep:
            total += lv.value / n
            chosen += 1
    return [probs], [torch.stack(grads)], {"loss": total, "selected": chosen}


def _run_gradient_method(model: ShadowNet, images, cfg: AdaptConfig, on_epoch_end=None) -> list[dict]:
    dtype = next(model.parameters()).dtype
    opt = _scoped_optimizer(model, cfg.scope, cfg.learning_rate)
    params = opt.param_groups[0]["params"] if opt else []
    rng = np.random.default_rng(cfg.seed)
    trace, step = [], 0
    for epoch in range(cfg.epochs):
        for b, idx in enumerate(_batches(len(images), cfg.batch_size)):
            _set_modes(model, cfg)
            batch = [images[i] for i in idx]
            if cfg.method == "tica":
                outs, grads, rec = _tica_batch(model, batch, cfg, rng, dtype)
            else:
                outs, grads, rec = _entropy_batch(model, batch, cfg, dtype, select=cfg.method == "eta")
            _check_finite(rec["loss"], f"{cfg.method} epoch {epoch} batch {b}")
            if opt is not None and any(p.requires_grad for p in params):
                torch.autograd.backward(outs, grads)
                _step(opt, params, cfg.grad_clip)
            rec.update(epoch=epoch, batch=b, step=step, method=cfg.method)
            trace.append(rec)
            step += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, model)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    return trace


@torch.no_grad()
def _recompute_norm_stats(model: ShadowNet, images, batch_size: int) -> None:
    norms = norm_modules(model).values()
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average over the pass
    model.train()
    dtype = next(model.parameters()).dtype
    for idx in _batches(len(images), batch_size):
        model(to_batch([images[i] for i in idx], dtype=dtype))
    for m, mom in zip(norms, saved):
        m.momentum = mom
    model.eval()


def adapt(model: ShadowNet, test_images, cfg: AdaptConfig | None = None, on_epoch_end: EpochHook | None = None) -> AdaptResult:
    """Adapt a copy of ``model`` to unlabeled ``test_images`` (channels-last arrays).

    Continual mode keeps one set of parameters over the whole test set.
    Episodic mode restarts from ``model`` for every image and returns the
    per-image predictions made right after that image's adaptation.
    """
    cfg = (cfg or AdaptConfig()).validate()
    images = list(test_images)
    if not images:
        raise ValueError("test set is empty")
    if cfg.mode == "episodic" and cfg.method != "none":
        preds, trace, last = [], [], model
        for k, img in enumerate(images):
            sub = _adapt_continual(model, [img], cfg, None)
            for rec in sub.trace:
                rec["image"] = k
            trace += sub.trace
            preds.append(predict(sub.model, img))
            last = sub.model
        return AdaptResult(last, trace, preds)
    return _adapt_continual(model, images, cfg, on_epoch_end)


def _adapt_continual(model, images, cfg, on_epoch_end) -> AdaptResult:
    model = copy.deepcopy(model)
    if cfg.method == "none":
        return AdaptResult(model, [])
    if cfg.method == "bn":
        _recompute_norm_stats(model, images, cfg.batch_size)
        if on_epoch_end is not None:
            for e in range(cfg.epochs):
                on_epoch_end(e + 1, model)
        return AdaptResult(model, [{"epoch": 0, "batch": 0, "step": 0, "method": "bn", "loss": 0.0}])
    trace = _run_gradient_method(model, images, cfg, on_epoch_end)
    return AdaptResult(model, trace)


def adapt_tica(model, test_images, cfg: AdaptConfig | None = None, **kw) -> AdaptResult:
    cfg = copy.copy(cfg or AdaptConfig())
    cfg.method = "tica"
    return adapt(model, test_images, cfg, **kw)


def adapt_tent(model, test_images, cfg: AdaptConfig | None = None, **kw) -> AdaptResult:
    cfg = copy.copy(cfg or AdaptConfig())
    cfg.method = "tent"
    return adapt(model, test_images, cfg, **kw)


def adapt_eta(model, test_images, cfg: AdaptConfig | None = None, **kw) -> AdaptResult:
    cfg = copy.copy(cfg or AdaptConfig())
    cfg.method = "eta"
    return adapt(model, test_images, cfg, **kw)


def adapt_bn(model, test_images, cfg: AdaptConfig | None = None, **kw) -> AdaptResult:
    cfg = copy.copy(cfg or AdaptConfig())
    cfg.method = "bn"
    return adapt(model, test_images, cfg, **kw)


def mean_entropy(model: ShadowNet, images) -> float:
    preds = predict_batch(model, images)
    return float(np.mean([binary_entropy(torch.from_numpy(p)).mean().item() for p in preds]))
