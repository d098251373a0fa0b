"""Desk-scale encoder-decoder shadow segmenter.

The encoder is four conv stages emitting features at strides 2, 4, 8 and 16.
The decoder projects every level to a shared width, upsamples to stride 2,
concatenates, fuses with two 3x3 convs and predicts a logit map that is
upsampled once to full resolution.

Parameters whose name starts with ``encoder.`` form the encoder group; all
others form the decoder group.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1
STRIDE = 16


@dataclass
class ModelConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 128)
    decoder_width: int = 32
    input_size: tuple[int, int] = (128, 128)
    norm_momentum: float = 0.1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_size = (int(self.input_size[0]), int(self.input_size[1]))
        if len(self.widths) != 4:
            raise ValueError(f"expected 4 encoder widths, got {self.widths}")
        if self.input_size[0] % STRIDE or self.input_size[1] % STRIDE:
            raise ValueError(f"input size {self.input_size} must be divisible by {STRIDE}")


def _conv_block(cin: int, cout: int, momentum: float) -> list[nn.Module]:
    return [
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout, momentum=momentum),
        nn.ReLU(),
    ]


class EncoderStage(nn.Sequential):
    def __init__(self, cin: int, cout: int, momentum: float):
        super().__init__(
            *_conv_block(cin, cout, momentum),
            *_conv_block(cout, cout, momentum),
            nn.MaxPool2d(2),
        )


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        stages, cin = [], cfg.in_channels
        for w in cfg.widths:
            stages.append(EncoderStage(cin, w, cfg.norm_momentum))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.decoder_width
        self.proj = nn.ModuleList(nn.Conv2d(w, d, 1) for w in cfg.widths)
        self.fuse = nn.Sequential(
            *_conv_block(len(cfg.widths) * d, d, cfg.norm_momentum),
            *_conv_block(d, d, cfg.norm_momentum),
        )
        self.head = nn.Conv2d(d, 1, 1)

    def forward(self, levels: list[torch.Tensor], out_size) -> torch.Tensor:
        target = levels[0].shape[-2:]
        z = [
            p(f) if f.shape[-2:] == target
            else F.interpolate(p(f), size=target, mode="bilinear", align_corners=False)
            for p, f in zip(self.proj, levels)
        ]
        logits = self.head(self.fuse(torch.cat(z, dim=1)))
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)


class ShadowNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Multi-scale feature pyramid (strides 2, 4, 8, 16)."""
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Shadow logits of shape ``(B, 1, H, W)``."""
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected (B, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"spatial size {(h, w)} must be divisible by {STRIDE}")
        return self.decoder(self.encoder(x), (h, w))


def _init_weights(model: nn.Module, generator: torch.Generator) -> None:
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            bound = (6.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> ShadowNet:
    cfg = cfg or ModelConfig()
    model = ShadowNet(cfg)
    _init_weights(model, torch.Generator().manual_seed(int(seed)))
    return model


def group_of(name: str) -> str:
    return "encoder" if name.startswith("encoder.") else "decoder"


def param_groups(model: nn.Module) -> dict[str, str]:
    """Parameter name -> 'encoder' | 'decoder'."""
    return {name: group_of(name) for name, _ in model.named_parameters()}


def norm_modules(model: nn.Module) -> dict[str, nn.BatchNorm2d]:
    return {n: m for n, m in model.named_modules() if isinstance(m, nn.BatchNorm2d)}


def norm_affine_names(model: nn.Module) -> set[str]:
    return {f"{n}.{p}" for n in norm_modules(model) for p in ("weight", "bias")}


def scope_parameter_names(model: nn.Module, scope: str) -> set[str]:
    names = set(param_groups(model))
    if scope == "all":
        return names
    if scope == "encoder":
        return {n for n in names if group_of(n) == "encoder"}
    if scope == "decoder":
        return {n for n in names if group_of(n) == "decoder"}
    if scope == "norm-affine":
        return norm_affine_names(model)
    if scope == "none":
        return set()
    raise ValueError(f"unknown update scope {scope!r}")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def to_batch(images, dtype=torch.float32) -> torch.Tensor:
    """Channels-last numpy image(s) -> (B, C, H, W) tensor."""
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images.unsqueeze(0)
    arr = np.asarray(images if not isinstance(images, list) else np.stack(images))
    if arr.ndim == 2:
        arr = arr[None, :, :, None]
    elif arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def forward(model: ShadowNet, images, mode: str = "eval") -> torch.Tensor:
    """Probabilities ``(B, 1, H, W)``; autograd keeps the graph for :func:`backward`."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    x = to_batch(images, dtype=next(model.parameters()).dtype)
    return torch.sigmoid(model(x))


def backward(probs: torch.Tensor, grad_output: torch.Tensor) -> None:
    """Accumulate parameter gradients of ``sum(probs * grad_output)`` into ``.grad``."""
    grad_output = torch.as_tensor(grad_output, dtype=probs.dtype)
    if grad_output.shape != probs.shape:
        raise ValueError(f"grad shape {tuple(grad_output.shape)} != output shape {tuple(probs.shape)}")
    if probs.grad_fn is None:
        raise RuntimeError("output carries no graph (stale or detached forward)")
    probs.backward(grad_output)


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    """Model weights plus provenance; written as a single ``.npz`` container.

    Layout: ``param/<name>`` and ``buffer/<name>`` arrays and a ``__meta__``
    JSON string with ``format_version``, ``model_config``, ``groups`` (name ->
    encoder/decoder) and free-form ``extra``.
    """

    model_config: ModelConfig
    state: dict[str, np.ndarray]
    param_names: list[str]
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ShadowNet, **extra) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.cfg, state, [n for n, _ in model.named_parameters()], dict(extra))

    def to_model(self) -> ShadowNet:
        model = ShadowNet(self.model_config)
        if self.state[self.param_names[0]].dtype == np.float64:
            model = model.double()
        model.load_state_dict({k: torch.from_numpy(np.array(self.state[k])) for k in model.state_dict()})
        return model

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model_config": asdict(self.model_config),
            "groups": {n: group_of(n) for n in self.param_names},
            "extra": self.extra,
        }
        arrays = {}
        for k, v in self.state.items():
            arrays[("param/" if k in self.param_names else "buffer/") + k] = v
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
            state, params = {}, []
            for key in z.files:
                if key == "__meta__":
                    continue
                kind, name = key.split("/", 1)
                state[name] = z[key]
                if kind == "param":
                    params.append(name)
        cfg = ModelConfig(**meta["model_config"])
        order = [n for n, _ in ShadowNet(cfg).named_parameters()]
        return cls(cfg, state, [n for n in order if n in params], meta.get("extra", {}))


def save_checkpoint(model: ShadowNet, path, **extra) -> Path:
    return Checkpoint.from_model(model, **extra).save(path)


def load_checkpoint(path) -> ShadowNet:
    return Checkpoint.load(path).to_model()


def state_equal(a: nn.Module, b: nn.Module, names=None) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    keys = sa.keys() if names is None else names
    return all(torch.equal(sa[k], sb[k]) for k in keys)


def changed_tensors(before: nn.Module, after: nn.Module) -> set[str]:
    sa, sb = before.state_dict(), after.state_dict()
    return {k for k in sa if not torch.equal(sa[k], sb[k])}
