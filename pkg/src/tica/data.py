"""Image/mask datasets: on-disk loading and a procedural shadow-scene generator.

A synthetic scene is ``albedo * illumination``.  Shadows attenuate the
illumination by a factor ``alpha`` inside a blurred matte; distractors are
dark-albedo objects that never enter the mask.  The test split additionally
gets a photometric shift ``v -> clip((gain * v) ** gamma, 0, 1)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

log = logging.getLogger(__name__)

_SUPERSAMPLE = 4


@dataclass
class SamplePair:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"sample {self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"sample {self.id}: mask is not binary")


@dataclass
class SynthConfig:
    size: tuple[int, int] = (128, 128)
    channels: int = 3
    n_train: int = 400
    n_test: int = 100
    noise_sigmas: tuple[float, ...] = (16.0, 6.0, 2.0)
    albedo_range: tuple[float, float] = (0.45, 0.95)
    texture_contrast: float = 0.25
    illum_gradient: float = 0.15
    shadow_count: tuple[int, int] = (1, 3)
    shadow_shape: str = "union"  # polygon | ellipse | union
    shadow_extent: tuple[float, float] = (0.12, 0.35)
    alpha_range: tuple[float, float] = (0.3, 0.7)
    penumbra_sigma: tuple[float, float] = (0.5, 2.0)
    distractor_count: tuple[int, int] = (1, 3)
    distractor_albedo: tuple[float, float] = (0.05, 0.3)
    distractor_extent: tuple[float, float] = (0.06, 0.2)
    gain: float = 1.4
    gamma: float = 1.3
    seed: int = 0

    def validate(self) -> "SynthConfig":
        def rng_ok(name, lo_bound=None, hi_bound=None, open_lo=False, open_hi=False):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range {lo} > {hi}")
            if lo_bound is not None and (lo < lo_bound or (open_lo and lo == lo_bound)):
                raise ValueError(f"{name}: lower end {lo} out of bounds")
            if hi_bound is not None and (hi > hi_bound or (open_hi and hi == hi_bound)):
                raise ValueError(f"{name}: upper end {hi} out of bounds")

        rng_ok("alpha_range", 0.0, 1.0, open_lo=True)
        rng_ok("albedo_range", 0.0, 1.0)
        rng_ok("distractor_albedo", 0.0, 1.0)
        rng_ok("shadow_count", 0)
        rng_ok("distractor_count", 0)
        rng_ok("penumbra_sigma", 0.0)
        rng_ok("shadow_extent", 0.0, 1.0, open_lo=True)
        rng_ok("distractor_extent", 0.0, 1.0, open_lo=True)
        if self.shadow_shape not in ("polygon", "ellipse", "union"):
            raise ValueError(f"unknown shadow_shape {self.shadow_shape!r}")
        if not (self.gain > 0 and self.gamma > 0):
            raise ValueError("gain and gamma must be positive")
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test == 0:
            raise ValueError("dataset would be empty")
        return self


@dataclass
class Scene:
    image: np.ndarray
    mask: np.ndarray
    albedo: np.ndarray
    illumination: np.ndarray
    matte: np.ndarray
    distractors: np.ndarray = field(repr=False)


def photometric_shift(v: np.ndarray, gain: float, gamma: float) -> np.ndarray:
    return np.clip(np.power(gain * v, gamma), 0.0, 1.0)


def _smooth_noise(rng, shape, sigmas) -> np.ndarray:
    out = np.zeros(shape)
    for i, s in enumerate(sigmas):
        layer = ndimage.gaussian_filter(rng.standard_normal(shape), s, mode="wrap")
        layer /= layer.std() + 1e-12
        out += layer * 0.5**i
    return out / (np.abs(out).max() + 1e-12)


def _raster(draw_fn, size) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of shapes drawn at 4x resolution."""
    h, w = size
    canvas = Image.new("L", (w * _SUPERSAMPLE, h * _SUPERSAMPLE), 0)
    draw_fn(ImageDraw.Draw(canvas), _SUPERSAMPLE)
    hi = np.asarray(canvas, dtype=np.float64) / 255.0
    return hi.reshape(h, _SUPERSAMPLE, w, _SUPERSAMPLE).mean(axis=(1, 3))


def _random_polygon(rng, cy, cx, radius, n_vertices):
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    radii = radius * rng.uniform(0.55, 1.0, n_vertices)
    return list(zip(cx + radii * np.cos(angles), cy + radii * np.sin(angles)))


def _shape_coverage(rng, size, kind: str, extent) -> np.ndarray:
    h, w = size
    radius = 0.5 * rng.uniform(*extent) * min(h, w)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    if kind == "union":
        kind = "polygon" if rng.random() < 0.5 else "ellipse"
    if kind == "polygon":
        pts = _random_polygon(rng, cy, cx, radius * 1.3, int(rng.integers(3, 8)))
        return _raster(lambda d, s: d.polygon([(x * s, y * s) for x, y in pts], fill=255), size)
    ry = radius * rng.uniform(0.5, 1.3)
    rx = radius * rng.uniform(0.5, 1.3)
    return _raster(
        lambda d, s: d.ellipse([(cx - rx) * s, (cy - ry) * s, (cx + rx) * s, (cy + ry) * s], fill=255),
        size,
    )


def render_scene(rng: np.random.Generator, cfg: SynthConfig) -> Scene:
    h, w = cfg.size
    c = cfg.channels
    base = rng.uniform(*cfg.albedo_range, size=c)
    tint = _smooth_noise(rng, (h, w), cfg.noise_sigmas)
    albedo = base[None, None, :] * (1.0 + cfg.texture_contrast * tint[:, :, None])
    albedo *= 1.0 + 0.05 * _smooth_noise(rng, (h, w, c), (1.0,))

    distractors = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(cfg.distractor_count[0], cfg.distractor_count[1] + 1))):
        cov = _shape_coverage(rng, (h, w), "union", cfg.distractor_extent)
        dark = rng.uniform(*cfg.distractor_albedo) * rng.uniform(0.85, 1.0, size=c)
        albedo = albedo * (1 - cov[:, :, None]) + dark[None, None, :] * cov[:, :, None]
        distractors |= cov >= 0.5
    albedo = np.clip(albedo, 0.0, 1.0)

    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * yy + np.sin(theta) * xx
    illumination = 1.0 - cfg.illum_gradient * (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)

    matte = np.zeros((h, w))
    attenuation = np.ones((h, w))
    for _ in range(int(rng.integers(cfg.shadow_count[0], cfg.shadow_count[1] + 1))):
        cov = _shape_coverage(rng, (h, w), cfg.shadow_shape, cfg.shadow_extent)
        alpha = rng.uniform(*cfg.alpha_range)
        sigma = rng.uniform(*cfg.penumbra_sigma)
        soft = ndimage.gaussian_filter(cov, sigma) if sigma > 0 else cov
        attenuation *= 1.0 - (1.0 - alpha) * soft
        matte = np.maximum(matte, cov)
    illumination = illumination * attenuation

    image = np.clip(albedo * illumination[:, :, None], 0.0, 1.0)
    mask = (matte >= 0.5).astype(np.uint8)
    return Scene(image, mask, albedo, illumination, matte, distractors)


def _split(cfg: SynthConfig, name: str, n: int, shift: bool) -> list[SamplePair]:
    root = np.random.SeedSequence([int(cfg.seed), 0 if name == "train" else 1])
    pairs = []
    for i, child in enumerate(root.spawn(n)):
        scene = render_scene(np.random.default_rng(child), cfg)
        img = photometric_shift(scene.image, cfg.gain, cfg.gamma) if shift else scene.image
        pairs.append(SamplePair(img.astype(np.float32), scene.mask, f"{name}-{i:04d}"))
    return pairs


def generate_synthetic(cfg: SynthConfig | None = None) -> tuple[list[SamplePair], list[SamplePair]]:
    """Train split (unshifted) and test split (photometrically shifted)."""
    cfg = (cfg or SynthConfig()).validate()
    return _split(cfg, "train", cfg.n_train, False), _split(cfg, "test", cfg.n_test, True)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def dataset_digest(*splits: list[SamplePair]) -> str:
    """SHA-256 over the 8-bit serialisation of every sample, in order."""
    h = hashlib.sha256()
    for split in splits:
        for s in split:
            h.update(s.id.encode())
            h.update(quantize(s.image).tobytes())
            h.update((s.mask * 255).astype(np.uint8).tobytes())
    return h.hexdigest()


# -- disk I/O ------------------------------------------------------------------


def save_dataset(pairs: list[SamplePair], root) -> Path:
    """Write ``root/images/NNNN.png`` and ``root/masks/NNNN.png`` (masks as 0/255)."""
    if not pairs:
        raise ValueError("refusing to save an empty dataset")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(pairs):
        img = quantize(s.image)
        if img.ndim == 3 and img.shape[2] == 1:
            img = img[:, :, 0]
        Image.fromarray(img).save(root / "images" / f"{i:04d}.png")
        Image.fromarray((s.mask * 255).astype(np.uint8)).save(root / "masks" / f"{i:04d}.png")
    return root


def save_synthetic(train, test, root, cfg: SynthConfig) -> dict:
    root = Path(root)
    save_dataset(train, root / "train")
    save_dataset(test, root / "test")
    manifest = {
        "config": asdict(cfg),
        "seed": cfg.seed,
        "counts": {"train": len(train), "test": len(test)},
        "digest": dataset_digest(train, test),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _read(path: Path, mode: str, size: tuple[int, int] | None, resample) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert(mode)
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), resample)
            return np.asarray(im)
    except OSError as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc


def load_dataset(root, size: tuple[int, int] | None = None, channels: int = 3) -> list[SamplePair]:
    """Read a split directory holding ``images/`` and ``masks/`` with matching names."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain images/ and masks/")
    names = sorted(p.name for p in img_dir.iterdir() if p.is_file())
    if not names:
        raise ValueError(f"no images under {img_dir}")
    mask_names = {p.name for p in mask_dir.iterdir() if p.is_file()}
    pairs = []
    for name in names:
        sid = Path(name).stem
        if name not in mask_names:
            raise FileNotFoundError(f"sample {sid}: missing mask {mask_dir / name}")
        img = _read(img_dir / name, "RGB" if channels == 3 else "L", size, Image.BILINEAR)
        mask = _read(mask_dir / name, "L", size, Image.NEAREST)
        if img.shape[:2] != mask.shape:
            raise ValueError(f"sample {sid}: image {img.shape[:2]} and mask {mask.shape} differ")
        if img.ndim == 2:
            img = img[:, :, None]
        pairs.append(SamplePair(img.astype(np.float32) / 255.0, (mask >= 128).astype(np.uint8), sid))
    orphans = mask_names - set(names)
    if orphans:
        raise FileNotFoundError(f"masks without images: {sorted(orphans)}")
    log.debug("loaded %d samples from %s", len(pairs), root)
    return pairs
