"""Command-line entry points.

Subcommands: ``train``, ``eval``, ``sweep`` (prototype count x diversity
weight grid), and ``export-heatmaps``. Every run writes a manifest recording
the effective config, a content hash of the package sources, the seed, and
the artifact list; the manifest is checked against the filesystem before the
command returns.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import Config, ConfigError, load_config
from .crf import crf_refine
from .data import DataError, load_dataset
from .metrics import evaluate_label_maps, format_table, metrics_row, write_tsv
from .prototypes import save_bank, similarity_maps
from .refiner import fuse_cams, resize_mask, threshold
from .training import Trainer, load_checkpoint
from .tensorio import ContainerError


class UsageError(Exception):
    """Bad flags, paths, or config values (exit code 2)."""


def code_version() -> str:
    """Content hash over the package's source files."""
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]


def config_hash(config: Config) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


class Manifest:
    def __init__(self, command: str, out_dir: Path, config: Config, seed: int):
        self.data = {
            "command": command,
            "config": config.to_dict(),
            "code_version": code_version(),
            "package_version": __version__,
            "seed": seed,
            "out_dir": str(out_dir),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
            "artifacts": [],
        }
        self.out_dir = out_dir

    def add(self, path: Path):
        self.data["artifacts"].append(str(path.relative_to(self.out_dir)))

    def write(self):
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
        missing = [a for a in self.data["artifacts"] if not (self.out_dir / a).exists()]
        if missing:
            raise RuntimeError(f"manifest artifacts missing on disk: {missing}")
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _require_dataset(args) -> Path:
    root = Path(args.data)
    if not root.is_dir():
        raise UsageError(f"--data: dataset root {root} does not exist")
    return root


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_effective_config(args) -> Config:
    try:
        return load_config(args.config, overrides=args.set or (), seed=args.seed)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    except FileNotFoundError as exc:
        raise UsageError(f"--config: {exc}") from exc


def _check_class_count(config: Config, samples, flag_hint: str):
    if samples and samples[0].labels.shape[0] != config.num_classes:
        raise UsageError(
            f"dataset has {samples[0].labels.shape[0]} classes but num_classes is "
            f"{config.num_classes}; fix with {flag_hint}"
        )


# -- train --------------------------------------------------------------------


def cmd_train(args) -> int:
    root = _require_dataset(args)
    out = _out_dir(args)
    config = _load_effective_config(args)
    train_samples = load_dataset(root, "train")
    if not train_samples:
        raise UsageError(f"--data: no training samples under {root}")
    val_samples = load_dataset(root, "val")
    _check_class_count(config, train_samples, "--set num_classes=N")

    print("effective config:")
    print(config.to_yaml())
    manifest = Manifest("train", out, config, config.seed)

    (out / "config.yaml").write_text(config.to_yaml())
    manifest.add(out / "config.yaml")

    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    trainer = Trainer(config, train_samples, val_samples, log_path=log_path)
    result = trainer.run()
    manifest.add(log_path)

    ckpt = out / "checkpoint.bin"
    trainer.save_checkpoint(ckpt)
    manifest.add(ckpt)
    bank_path = out / "bank.bin"
    save_bank(bank_path, trainer.model.bank)
    manifest.add(bank_path)
    if val_samples:
        best = out / "best.bin"
        trainer.save_best(best)
        manifest.add(best)
        print(
            f"best {result.best_metric_name} = {result.best_metric:.4f} "
            f"at epoch {result.best_epoch}"
        )
    manifest.write()
    print(f"wrote {ckpt}")
    return 0


# -- eval ----------------------------------------------------------------------


def _predict_maps(model, samples, batch_size: int, use_crf: bool, crf_config):
    preds = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk]))
        probs = model.predict_proba(images).numpy()
        for i, sample in enumerate(chunk):
            if use_crf:
                preds.append(crf_refine(sample.image.astype(np.float64), probs[i], crf_config))
            else:
                preds.append(probs[i].argmax(axis=0).astype(np.int64))
    return preds


def _evaluate_split(model, config: Config, samples, use_crf: bool):
    masked = [s for s in samples if s.mask is not None]
    if not masked:
        raise UsageError("--data: split has no ground-truth masks to evaluate against")
    preds = _predict_maps(model, masked, config.trainer.batch_size, use_crf, config.crf)
    gts = [s.mask for s in masked]
    return evaluate_label_maps(preds, gts, config.num_classes)


def cmd_eval(args) -> int:
    root = _require_dataset(args)
    out = _out_dir(args)
    try:
        model, meta = load_checkpoint(args.checkpoint)
    except (ContainerError, FileNotFoundError) as exc:
        raise UsageError(f"--checkpoint: {exc}") from exc
    config = Config.from_dict(meta["config"])
    samples = load_dataset(root, args.split)
    if not samples:
        raise UsageError(f"--data: split {args.split!r} is empty")
    if samples[0].labels.shape[0] != config.num_classes:
        raise RuntimeError(
            f"checkpoint was trained with num_classes={config.num_classes} but the "
            f"dataset has {samples[0].labels.shape[0]} classes"
        )
    use_crf = _crf_flag(args, config)

    seg = _evaluate_split(model, config, samples, use_crf)
    row = metrics_row(
        Path(args.checkpoint).stem,
        seg,
        config.num_classes,
        extra={"split": args.split, "crf": "on" if use_crf else "off"},
    )
    table = format_table([row])
    print(table, end="")

    manifest = Manifest("eval", out, config, config.seed)
    write_tsv([row], out / "metrics.tsv")
    manifest.add(out / "metrics.tsv")
    (out / "metrics.txt").write_text(table)
    manifest.add(out / "metrics.txt")
    manifest.write()
    return 0


def _crf_flag(args, config: Config) -> bool:
    if args.crf is None:
        return config.crf.enabled
    return args.crf == "on"


# -- sweep ----------------------------------------------------------------------


def _parse_float_list(text: str, flag: str):
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"{flag}: expected a comma-separated number list, got {text!r}")


def _parse_int_list(text: str, flag: str):
    values = _parse_float_list(text, flag)
    if any(v != int(v) for v in values):
        raise UsageError(f"{flag}: expected integers, got {text!r}")
    return [int(v) for v in values]


def cmd_sweep(args) -> int:
    root = _require_dataset(args)
    out = _out_dir(args)
    base_config = _load_effective_config(args)
    ks = _parse_int_list(args.k_grid, "--k-grid")
    lams = _parse_float_list(args.lambda_grid, "--lambda-grid")
    if not ks or not lams:
        raise UsageError("--k-grid/--lambda-grid must be non-empty")

    train_samples = load_dataset(root, "train")
    if not train_samples:
        raise UsageError(f"--data: no training samples under {root}")
    val_samples = load_dataset(root, "val")
    eval_samples = load_dataset(root, args.split)
    _check_class_count(base_config, train_samples, "--set num_classes=N")
    use_crf = _crf_flag(args, base_config)

    cells_dir = out / "cells"
    cells_dir.mkdir(exist_ok=True)
    rows = []
    failures = 0
    for k in ks:
        for lam in lams:
            config = Config.from_dict(base_config.to_dict())
            config.bank.k = k
            config.trainer.lambda_div = lam
            cell = cells_dir / config_hash(config)
            cell.mkdir(exist_ok=True)
            result_path = cell / "result.json"
            if result_path.exists():
                row = json.loads(result_path.read_text())
                print(f"cell k={k} lambda_div={lam}: cached ({cell.name})")
            else:
                try:
                    config.validate()
                    row = _run_cell(config, cell, train_samples, val_samples,
                                    eval_samples, use_crf, args.split)
                    result_path.write_text(json.dumps(row, sort_keys=True) + "\n")
                except Exception as exc:  # cell failure must not kill the sweep
                    (cell / "failed.json").write_text(
                        json.dumps({"k": k, "lambda_div": lam, "error": str(exc)}) + "\n"
                    )
                    print(f"cell k={k} lambda_div={lam}: FAILED: {exc}", file=sys.stderr)
                    failures += 1
                    rows.append({"k": k, "lambda_div": lam, "status": "failed"})
                    continue
            rows.append(row)

    table = format_table(rows)
    print(table, end="")
    manifest = Manifest("sweep", out, base_config, base_config.seed)
    write_tsv(rows, out / "sweep.tsv")
    manifest.add(out / "sweep.tsv")
    (out / "sweep.txt").write_text(table)
    manifest.add(out / "sweep.txt")
    manifest.write()
    return 1 if failures else 0


def _run_cell(config, cell: Path, train_samples, val_samples, eval_samples,
              use_crf: bool, split: str):
    log_path = cell / "train_log.jsonl"
    log_path.write_text("")
    trainer = Trainer(config, train_samples, val_samples, log_path=log_path)
    trainer.run()
    if val_samples:
        trainer.load_best()
    trainer.save_checkpoint(cell / "checkpoint.bin")
    seg = _evaluate_split(trainer.model, config, eval_samples, use_crf)
    row = {"k": config.bank.k, "lambda_div": config.trainer.lambda_div, "status": "ok",
           "split": split, "crf": "on" if use_crf else "off"}
    row.update(
        {k: v for k, v in metrics_row("", seg, config.num_classes).items() if k != "method"}
    )
    return row


# -- heatmap export ---------------------------------------------------------------


def _colorize(values: np.ndarray):
    """Maps a 2D array to viridis RGB bytes; returns (pixels, vmin, vmax)."""
    from matplotlib import colormaps

    vmin, vmax = float(values.min()), float(values.max())
    norm = np.zeros_like(values) if vmax == vmin else (values - vmin) / (vmax - vmin)
    rgba = colormaps["viridis"](norm)
    return (rgba[..., :3] * 255.0).round().astype(np.uint8), vmin, vmax


def _save_png(pixels: np.ndarray, path: Path):
    from PIL import Image

    Image.fromarray(pixels).save(path)


def cmd_export_heatmaps(args) -> int:
    root = _require_dataset(args)
    out = _out_dir(args)
    try:
        model, meta = load_checkpoint(args.checkpoint)
    except (ContainerError, FileNotFoundError) as exc:
        raise UsageError(f"--checkpoint: {exc}") from exc
    config = Config.from_dict(meta["config"])
    samples = load_dataset(root, args.split)
    by_id = {s.id: s for s in samples}
    if args.ids:
        wanted = [s.strip() for s in args.ids.split(",") if s.strip()]
        missing = [w for w in wanted if w not in by_id]
        if missing:
            raise UsageError(f"--ids: sample ids not found in split {args.split!r}: {missing}")
        selected = [by_id[w] for w in wanted]
    else:
        selected = samples
    if not selected:
        raise UsageError(f"--data: split {args.split!r} is empty")

    manifest = Manifest("export-heatmaps", out, config, config.seed)
    model.eval()
    bank = model.bank
    for sample in selected:
        sample_dir = out / sample.id
        sample_dir.mkdir(exist_ok=True)
        images = torch.from_numpy(sample.image[None])
        with torch.no_grad():
            pyramid = model.encoder(images)
            per_proto = similarity_maps(pyramid, bank)
            fused_proto = fuse_cams(per_proto, config.refiner.fusion_weights).cam[0]
            _, _, fused = model.forward_cams(images)
            mask = threshold(fused, config.refiner.alpha)
            mask_full = resize_mask(mask.fg, sample.image.shape[-2:])[0]

        ranges = {}

        def export(name: str, values: np.ndarray):
            pixels, vmin, vmax = _colorize(values)
            path = sample_dir / name
            _save_png(pixels, path)
            ranges[name] = [vmin, vmax]
            manifest.add(path)

        for c in range(config.num_classes):
            export(f"class_c{c}.png", fused.cam[0, c].numpy())
            for u in range(bank.k):
                row = c * bank.k + u
                export(f"proto_c{c}_p{u}.png", fused_proto[row].numpy())
            # binary pseudo mask at map resolution, exact threshold output
            mask_png = (mask.fg[0, c].numpy().astype(np.uint8)) * 255
            path = sample_dir / f"mask_c{c}.png"
            _save_png(mask_png, path)
            manifest.add(path)
            # FG overlay at image resolution
            rgb = (sample.image.transpose(1, 2, 0) * 255.0).round().astype(np.float64)
            fg = mask_full[c].numpy()
            rgb[fg] = 0.6 * rgb[fg] + 0.4 * np.array([255.0, 0.0, 0.0])
            path = sample_dir / f"overlay_c{c}.png"
            _save_png(rgb.round().astype(np.uint8), path)
            manifest.add(path)
        if bank.background:
            for u in range(bank.k):
                row = config.num_classes * bank.k + u
                export(f"proto_bg_p{u}.png", fused_proto[row].numpy())

        sidecar = sample_dir / "sidecar.json"
        sidecar.write_text(
            json.dumps(
                {"colormap": "viridis", "alpha": config.refiner.alpha, "ranges": ranges},
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
        manifest.add(sidecar)
    manifest.write()
    print(f"exported heatmaps for {len(selected)} sample(s) to {out}")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protodiv",
        description="Prototype-based weakly supervised histology segmentation.",
    )
    parser.add_argument("--version", action="version", version=f"protodiv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="YAML config file (defaults applied otherwise)")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="dotted-path config override, repeatable",
        )
        p.add_argument("--seed", type=int, help="overrides config seed")
        if data:
            p.add_argument("--data", required=True, help="dataset root directory")
        p.add_argument("--out", required=True, help="output directory")

    p_train = sub.add_parser("train", help="train a model")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint against masks")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_eval.add_argument("--crf", choices=["on", "off"], default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="k x lambda_div ablation grid")
    common(p_sweep)
    p_sweep.add_argument("--k-grid", default="3,10", help="comma list of prototype counts")
    p_sweep.add_argument(
        "--lambda-grid", default="0.0,0.25,0.5,0.75", help="comma list of diversity weights"
    )
    p_sweep.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_sweep.add_argument("--crf", choices=["on", "off"], default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_heat = sub.add_parser("export-heatmaps", help="per-class and per-prototype maps")
    common(p_heat)
    p_heat.add_argument("--checkpoint", required=True)
    p_heat.add_argument("--split", default="val", choices=["train", "val", "test"])
    p_heat.add_argument("--ids", help="comma list of sample ids (default: whole split)")
    p_heat.set_defaults(func=cmd_export_heatmaps)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
