"""``tica`` command line: gen-data, train, adapt, eval and compare.

Settings resolve in three layers: built-in defaults, then an optional YAML or
JSON file passed with ``--config``, then explicit flags.  The resolved
configuration and its hash are written into every artifact.  Relative output
paths are placed under ``$TICA_OUTPUT_ROOT`` (default ``./runs``).

Config file keys::

    seeds: [0, 1, 2, 3, 4]
    model:  {widths, decoder_width, input_size, norm_momentum}
    train:  {epochs, lr, weight_decay, batch_size, cosine, bbce_literal, seed, augment}
    adapt:  {method, epochs, batch_size, lr, lambda_fg, lambda_bg, threshold,
             update_scope, kl_mode, eta_entropy_threshold, mode, norm_stats,
             grad_clip, seed, augment}
    synth:  any SynthConfig field
    augment (inside train/adapt): {flip_prob, scale_range, crop_size,
             crop_fraction, crop_multiple}
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .adapt import METHODS, AdaptConfig, TrainConfig, adapt, predict_batch, train_supervised
from .data import SynthConfig, generate_synthetic, load_dataset, save_synthetic
from .geometry import AugmentConfig
from .losses import LossWeights
from .metrics import BerReport, ber_from_predictions, evaluate
from .model import Checkpoint, ModelConfig, build_model, save_checkpoint

log = logging.getLogger("tica")

OUTPUT_ROOT_ENV = "TICA_OUTPUT_ROOT"
COMPARE_ROWS = ("none", "fc-only", "bc-only", "tica", "tent", "bn", "eta")
BENCH_MODEL = dict(widths=(8, 16, 32, 64), decoder_width=16)


class CliError(Exception):
    pass


# -- configuration -------------------------------------------------------------


def _augment_from(d: dict | None) -> AugmentConfig:
    d = dict(d or {})
    for k in ("scale_range", "crop_size"):
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    return AugmentConfig(**d)


def _pick(cls, d: dict, section: str) -> dict:
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise CliError(f"unknown key(s) in [{section}]: {sorted(extra)}")
    return d


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**BENCH_MODEL))
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        extra = set(d) - {"model", "train", "adapt", "synth", "seeds"}
        if extra:
            raise CliError(f"unknown top-level config key(s): {sorted(extra)}")
        cfg = cls()
        if "model" in d:
            cfg.model = ModelConfig(**_pick(ModelConfig, {**asdict(cfg.model), **d["model"]}, "model"))
        if "train" in d:
            t = dict(d["train"])
            aug = _augment_from(t.pop("augment", None))
            cfg.train = TrainConfig(**_pick(TrainConfig, t, "train"), augment=aug)
        if "adapt" in d:
            a = dict(d["adapt"])
            aug = _augment_from(a.pop("augment", None))
            w = LossWeights(float(a.pop("lambda_fg", 0.5)), float(a.pop("lambda_bg", 1.0)))
            cfg.adapt = AdaptConfig(**_pick(AdaptConfig, a, "adapt"), weights=w, augment=aug)
        if "synth" in d:
            s = dict(d["synth"])
            for k, v in s.items():
                if isinstance(v, list):
                    s[k] = tuple(v)
            cfg.synth = SynthConfig(**_pick(SynthConfig, s, "synth"))
        if "seeds" in d:
            cfg.seeds = [int(x) for x in d["seeds"]]
        return cfg

    def to_dict(self) -> dict:
        a = asdict(self.adapt)
        w = a.pop("weights")
        a["lambda_fg"], a["lambda_bg"] = w["lambda_fg"], w["lambda_bg"]
        return _jsonable({
            "model": asdict(self.model),
            "train": asdict(self.train),
            "adapt": a,
            "synth": asdict(self.synth),
            "seeds": list(self.seeds),
        })

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if data is not None and not isinstance(data, dict):
        raise CliError(f"config file {path} must hold a mapping")
    return data or {}


def _set(cfg, attr, value):
    if value is not None:
        setattr(cfg, attr, value)


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_dict(read_config_file(args.config) if args.config else {})
    s, t, a = cfg.synth, cfg.train, cfg.adapt
    g = vars(args)
    if g.get("seeds"):
        cfg.seeds = list(g["seeds"])
    if args.command == "gen-data":
        _set(s, "seed", g.get("seed"))
        _set(s, "n_train", g.get("n_train"))
        _set(s, "n_test", g.get("n_test"))
        _set(s, "gain", g.get("gain"))
        _set(s, "gamma", g.get("gamma"))
        if g.get("size"):
            s.size = tuple(g["size"])
        if g.get("alpha_range"):
            s.alpha_range = tuple(g["alpha_range"])
    if args.command == "train":
        _set(t, "epochs", g.get("epochs"))
        _set(t, "lr", g.get("lr"))
        _set(t, "batch_size", g.get("batch_size"))
        _set(t, "seed", g.get("seed"))
        if g.get("widths"):
            cfg.model = ModelConfig(**{**asdict(cfg.model), "widths": tuple(g["widths"])})
    if args.command in ("adapt", "compare"):
        _set(a, "method", g.get("method"))
        _set(a, "epochs", g.get("epochs"))
        _set(a, "lr", g.get("lr"))
        _set(a, "batch_size", g.get("batch_size"))
        _set(a, "seed", g.get("seed"))
        _set(a, "update_scope", g.get("scope"))
        _set(a, "mode", g.get("mode"))
        _set(a, "kl_mode", g.get("kl_mode"))
        _set(a, "norm_stats", g.get("norm_stats"))
        if g.get("lambda_fg") is not None or g.get("lambda_bg") is not None:
            a.weights = LossWeights(
                a.weights.lambda_fg if g.get("lambda_fg") is None else g["lambda_fg"],
                a.weights.lambda_bg if g.get("lambda_bg") is None else g["lambda_bg"],
            )
    s.validate()
    t.validate()
    a.validate()
    return cfg


# -- paths and artifacts ---------------------------------------------------------


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out_path(p, default: str) -> Path:
    p = Path(p) if p else Path(default)
    return p if p.is_absolute() else output_root() / p


def _in_path(p) -> Path:
    """Inputs resolve as given, falling back to the output root for relative paths."""
    p = Path(p)
    if p.exists() or p.is_absolute():
        return p
    alt = output_root() / p
    return alt if alt.exists() else p


def split_dir(root: Path, split: str) -> Path:
    if (root / split / "images").is_dir():
        return root / split
    if (root / "images").is_dir():
        return root
    raise FileNotFoundError(f"no {split!r} split under {root} (expected {root / split / 'images'})")


def write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True)
    path.write_text(text + "\n")
    if json.loads(path.read_text()) != json.loads(text):
        raise CliError(f"artifact {path} failed read-back validation")
    return path


def write_trace(path: Path, trace: list[dict], config_hash: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(_jsonable({**rec, "config_hash": config_hash})) + "\n")
    return path


def _provenance(cfg: RunConfig) -> dict:
    return {"config": cfg.to_dict(), "config_hash": cfg.digest()}


def _load_model(path: Path):
    ck = Checkpoint.load(path)
    return ck.to_model(), ck


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out_path(args.out, "data")
    train, test = generate_synthetic(cfg.synth)
    manifest = save_synthetic(train, test, out, cfg.synth)
    manifest.update(_provenance(cfg))
    write_json(out / "manifest.json", manifest)
    print(f"wrote {len(train)} train / {len(test)} test pairs to {out}  digest {manifest['digest'][:12]}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    data = split_dir(_in_path(args.data), "train")
    train_set = load_dataset(data, size=cfg.model.input_size, channels=cfg.model.in_channels)
    start, total = 0, None
    if args.resume_from:
        model, ck = _load_model(_in_path(args.resume_from))
        start = int(ck.extra.get("steps", 0))
        cfg.model = model.cfg
    else:
        model = build_model(cfg.model, seed=cfg.train.seed)
    t0 = time.perf_counter()
    res = train_supervised(model, train_set, cfg.train, start_step=start, total_steps=total)
    out = _out_path(args.out, "model.npz")
    save_checkpoint(res.model, out, steps=res.steps, epoch_losses=res.epoch_losses,
                    runtime_s=time.perf_counter() - t0, **_provenance(cfg))
    write_trace(out.with_suffix(".trace.jsonl"), res.trace, cfg.digest())
    print(f"trained {cfg.train.epochs} epoch(s) to step {res.steps}; final loss {res.epoch_losses[-1]:.4f}; wrote {out}")
    return 0


def _test_images(args, model_cfg: ModelConfig):
    data = split_dir(_in_path(args.data), "test")
    return load_dataset(data, size=model_cfg.input_size, channels=model_cfg.in_channels)


def cmd_adapt(args, cfg: RunConfig) -> int:
    src = _in_path(args.checkpoint)
    out = _out_path(args.out, "adapted.npz")
    if cfg.adapt.method == "none":
        Checkpoint.load(src)  # validate before copying
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, out)
        print(f"method none: copied {src} to {out}")
        return 0
    model, _ = _load_model(src)
    test = _test_images(args, model.cfg)
    res = adapt(model, [s.image for s in test], cfg.adapt)
    save_checkpoint(res.model, out, method=cfg.adapt.method, source=str(src), **_provenance(cfg))
    write_trace(out.with_suffix(".trace.jsonl"), res.trace, cfg.digest())
    last = res.trace[-1]["loss"] if res.trace else 0.0
    print(f"adapted with {cfg.adapt.method} for {cfg.adapt.epochs} epoch(s); last loss {last:.6f}; wrote {out}")
    return 0


def dump_masks(preds, ids, root: Path, threshold: float) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for p, name in zip(preds, ids):
        Image.fromarray(((np.asarray(p) >= threshold) * 255).astype(np.uint8)).save(root / f"{name}.png")


def cmd_eval(args, cfg: RunConfig) -> int:
    if bool(args.checkpoint) == bool(args.predictions):
        raise CliError("eval needs exactly one of --checkpoint or --predictions")
    if args.predictions:
        test = load_dataset(split_dir(_in_path(args.data), "test"))
        pred_dir = _in_path(args.predictions)
        preds = []
        for s in test:
            f = pred_dir / f"{s.id}.png"
            if not f.is_file():
                raise FileNotFoundError(f"missing prediction for {s.id}: {f}")
            preds.append(np.asarray(Image.open(f).convert("L"), dtype=np.float64) / 255.0)
        report = ber_from_predictions(preds, [s.mask for s in test], args.threshold)
        report.meta.update(source=str(pred_dir), threshold=args.threshold)
    else:
        model, _ = _load_model(_in_path(args.checkpoint))
        test = _test_images(args, model.cfg)
        report = evaluate(model, test, args.threshold)
        report.meta["source"] = str(args.checkpoint)
        preds = predict_batch(model, [s.image for s in test]) if args.dump_masks else None
    if args.dump_masks:
        dump_masks(preds, [s.id for s in test], _out_path(args.dump_masks, "masks"), args.threshold)
    report.meta.update(_provenance(cfg))
    out = _out_path(args.out, "report.json")
    write_json(out, report.to_dict())
    BerReport.from_dict(json.loads(out.read_text()))
    print(f"BER {100 * report.ber:.2f} (shadow {100 * report.ber_shadow:.2f}, non-shadow {100 * report.ber_nonshadow:.2f}); wrote {out}")
    return 0


def row_config(base: AdaptConfig, row: str, seed: int, epochs: int | None = None) -> AdaptConfig:
    """Adaptation settings for one comparison row.

    The ablation rows zero one loss weight.  Explicit lr and scope settings
    apply to the consistency rows only; baselines keep their own defaults.
    """
    cfg = copy.deepcopy(base)
    cfg.seed = seed
    if epochs is not None:
        cfg.epochs = epochs
    cfg.method = "tica" if row in ("fc-only", "bc-only") else row
    if row == "fc-only":
        cfg.weights = LossWeights(base.weights.lambda_fg, 0.0)
    elif row == "bc-only":
        cfg.weights = LossWeights(0.0, base.weights.lambda_bg)
    if cfg.method != "tica":
        cfg.lr = None
        cfg.update_scope = None
    return cfg.validate()


def dedupe_rows(rows) -> list[str]:
    seen = []
    for r in rows:
        if r not in COMPARE_ROWS:
            raise CliError(f"unknown compare row {r!r}; choose from {COMPARE_ROWS}")
        if r in seen:
            log.warning("duplicate method %r ignored", r)
            continue
        seen.append(r)
    return seen


def compare_matrix(model, test, rows, seeds, base: AdaptConfig, sweep: int | None = None, threshold: float = 0.5) -> dict:
    """BER for every (row, seed) cell, optionally with per-epoch curves."""
    images = [s.image for s in test]
    t0 = time.perf_counter()
    baseline = evaluate(model, test, threshold).ber
    base_time = time.perf_counter() - t0
    result = {"rows": list(rows), "seeds": list(seeds), "ber": {}, "runtime_s": {}, "curves": {}}
    for row in rows:
        bers, times, curves = [], [], {}
        for seed in seeds:
            if row == "none":
                bers.append(baseline)
                times.append(base_time)
                if sweep:
                    curves[str(seed)] = [baseline] * (sweep + 1)
                continue
            cfg = row_config(base, row, seed, sweep)
            curve = [baseline]
            hook = (lambda e, m: curve.append(evaluate(m, test, threshold).ber)) if sweep else None
            t0 = time.perf_counter()
            res = adapt(model, images, cfg, on_epoch_end=hook)
            final = curve[-1] if sweep else evaluate(res.model, test, threshold).ber
            times.append(time.perf_counter() - t0)
            bers.append(final)
            if sweep:
                curves[str(seed)] = curve
            log.info("%s seed %d: BER %.4f (%.1fs)", row, seed, final, times[-1])
        result["ber"][row] = bers
        result["runtime_s"][row] = times
        if sweep:
            result["curves"][row] = curves
    result["mean"] = {r: float(np.mean(v)) for r, v in result["ber"].items()}
    result["relative_reduction"] = {r: 1.0 - m / baseline if baseline > 0 else 0.0 for r, m in result["mean"].items()}
    result["baseline_ber"] = baseline
    return result


def format_table(result: dict) -> str:
    seeds = result["seeds"]
    head = ["method"] + [f"seed {s}" for s in seeds] + ["mean", "vs none"]
    lines = [head]
    for row in result["rows"]:
        vals = [f"{100 * b:.2f}" for b in result["ber"][row]]
        lines.append([row] + vals + [f"{100 * result['mean'][row]:.2f}", f"{-100 * result['relative_reduction'][row]:+.1f}%"])
    widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
    out = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in lines]
    out.insert(1, "  ".join("-" * w for w in widths))
    text = "BER x100\n" + "\n".join(out) + "\n"
    if result.get("curves"):
        text += "\nper-epoch BER x100 (epoch 0 = unadapted), mean over seeds\n"
        for row, curves in result["curves"].items():
            arr = np.mean([c for c in curves.values()], axis=0)
            text += f"{row.ljust(widths[0])}  " + " ".join(f"{100 * v:.2f}" for v in arr) + "\n"
    return text


def cmd_compare(args, cfg: RunConfig) -> int:
    rows = dedupe_rows(args.methods or list(COMPARE_ROWS))
    model, _ = _load_model(_in_path(args.checkpoint))
    test = _test_images(args, model.cfg)
    result = compare_matrix(model, test, rows, cfg.seeds, cfg.adapt, args.epoch_sweep, args.threshold)
    result.update(_provenance(cfg))
    out = _out_path(args.out, "compare")
    write_json(out / "compare.json", result)
    table = format_table(result)
    (out / "compare.txt").write_text(f"config {cfg.digest()}\n" + table)
    print(table, end="")
    return 0


# -- parser ------------------------------------------------------------------------


def _csv_methods(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tica", description="Test-time intensity consistency adaptation for shadow segmentation.")
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic shadow benchmark")
    g.add_argument("--out", help="dataset directory (default: <root>/data)")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    g.add_argument("--alpha-range", type=float, nargs=2, metavar=("LO", "HI"))
    g.add_argument("--gain", type=float)
    g.add_argument("--gamma", type=float)

    t = sub.add_parser("train", help="supervised training on the train split")
    t.add_argument("--data", required=True)
    t.add_argument("--out", help="checkpoint path (default: <root>/model.npz)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--widths", type=int, nargs=4)
    t.add_argument("--resume-from", help="continue from a checkpoint written by train")

    def adapt_flags(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--epochs", type=int, help="adaptation epochs (default 5)")
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lambda-fg", type=float)
        sp.add_argument("--lambda-bg", type=float)
        sp.add_argument("--scope", choices=["encoder", "decoder", "all", "norm-affine", "none"])
        sp.add_argument("--mode", choices=["continual", "episodic"])
        sp.add_argument("--kl-mode", choices=["sym", "fwd", "rev"])
        sp.add_argument("--norm-stats", choices=["train", "eval"])

    a = sub.add_parser("adapt", help="test-time adaptation of a checkpoint")
    adapt_flags(a)
    a.add_argument("--method", choices=METHODS, default=None)
    a.add_argument("--seed", type=int)
    a.add_argument("--out", help="adapted checkpoint path (default: <root>/adapted.npz)")

    e = sub.add_parser("eval", help="balanced error rate on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="directory of <id>.png probability maps instead of a model")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out", help="report path (default: <root>/report.json)")
    e.add_argument("--dump-masks", help="write binarised predictions as PNGs here")

    c = sub.add_parser("compare", help="method x seed BER matrix")
    adapt_flags(c)
    c.add_argument("--methods", type=_csv_methods, help=f"comma list from {','.join(COMPARE_ROWS)}")
    c.add_argument("--seeds", type=int, nargs="+")
    c.add_argument("--epoch-sweep", type=int, nargs="?", const=10, default=None,
                   help="evaluate after every epoch up to N (default 10)")
    c.add_argument("--threshold", type=float, default=0.5)
    c.add_argument("--out", help="output directory (default: <root>/compare)")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "adapt": cmd_adapt, "eval": cmd_eval, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (CliError, ValueError, FileNotFoundError, FloatingPointError, KeyError, OSError) as exc:
        print(f"tica {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
