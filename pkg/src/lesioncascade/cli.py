"""Command-line entry point: ``synth``, ``train``, ``eval`` and ``predict``.

Exit codes: 0 success, 1 runtime error (missing file, bad config, ...),
2 usage error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .autodiff import ConfigurationError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .data import (
    Sample,
    fit_to_canvas,
    generate_splits,
    load_isic,
    read_image,
    write_dataset,
)
from .lpse import descriptor_to_csv
from .metrics import CLS_METRICS, SEG_METRICS
from .model import CascadeNet, ModelConfig
from .morphology import mask_to_uint8
from .train import HISTORY_FIELDS, TrainingDiverged, evaluate, predict, train

log = logging.getLogger("lesioncascade")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
CHECKPOINT_NAME = "model.ckpt"
METRIC_ORDER = SEG_METRICS + CLS_METRICS


def _fmt(value: float) -> str:
    return "nan" if isinstance(value, float) and math.isnan(value) else repr(float(value))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def _load_split(directory: Path, split: str, image_size: int) -> list[Sample]:
    """Load ``directory/split`` when it exists, otherwise ``directory`` itself."""
    root = directory / split if (directory / split).is_dir() else directory
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    errors: list[str] = []
    samples = load_isic(root, errors)
    for e in errors:
        print(f"warning: {e}", file=sys.stderr)
    return [fit_to_canvas(s, image_size) for s in samples]


def _model_from_checkpoint(path: Path) -> tuple[CascadeNet, dict]:
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors, meta = load_checkpoint(path)
    if "model" not in meta:
        raise CheckpointError(f"{path}: checkpoint has no model configuration")
    model = CascadeNet(ModelConfig(**meta["model"]))
    model.load_state_dict(tensors)
    return model, meta


# subcommands ---------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    train_set, test_set = generate_splits(cfg.data)
    write_dataset(train_set, out / "train")
    write_dataset(test_set, out / "test")
    cfg.write(out / "config.ini")
    print(f"wrote {len(train_set)} training and {len(test_set)} test samples to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    data_dir, out = Path(args.data), Path(args.out)
    size = cfg.data.image_size
    train_set = _load_split(data_dir, "train", size)
    if not train_set:
        raise ValueError(f"no training samples found under {data_dir}")
    monitor = _load_split(data_dir, "test", size) if (data_dir / "test").is_dir() else None
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.ini")

    model = CascadeNet(cfg.model, seed=cfg.train.seed)
    try:
        result = train(model, train_set, cfg.train, eval_samples=monitor)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    rows = [[row["iteration"], _fmt(row["lr"])] + [_fmt(row[k]) for k in HISTORY_FIELDS[2:]] for row in result.history]
    _write_csv(out / "metrics.csv", HISTORY_FIELDS, rows)
    meta = {
        "model": cfg.model.to_dict(),
        "train": cfg.train.to_dict(),
        "image_size": size,
        "final_loss": result.final_loss,
    }
    save_checkpoint(out / CHECKPOINT_NAME, model.state_dict(), meta)
    print(f"wrote {out / CHECKPOINT_NAME} and {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model, meta = _model_from_checkpoint(Path(args.checkpoint))
    size = int(meta.get("image_size", cfg.data.image_size))
    samples = _load_split(Path(args.data), "test", size)
    if not samples:
        raise ValueError(f"no samples found under {args.data}")
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    report = evaluate(model, samples)
    _write_csv(out / "metrics.csv", ["metric", "value"], [[k, _fmt(report.metrics[k])] for k in METRIC_ORDER])
    if report.roc is not None:
        (out / "roc.csv").write_text(report.roc.to_csv())
    else:
        (out / "roc.csv").write_text("# auc=nan (single-class ground truth)\nfpr,tpr\n")
    preds = predict(model, samples)
    per_image = []
    for s, mask, prob, seg in zip(samples, preds.masks, preds.melanoma_probs, report.per_image):
        Image.fromarray(mask_to_uint8(mask), mode="L").save(out / "masks" / f"{s.id}_prediction.png")
        per_image.append([s.id, s.label, _fmt(prob)] + [_fmt(seg[k]) for k in SEG_METRICS])
    _write_csv(out / "per_image.csv", ["image_id", "melanoma", "p_melanoma", *SEG_METRICS], per_image)
    for k in METRIC_ORDER:
        print(f"{k:5s} {report.metrics[k]:.4f}")
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    model, meta = _model_from_checkpoint(Path(args.checkpoint))
    path = Path(args.image)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    if args.dump_descriptor and model.config.pooling != "lpse":
        raise ConfigurationError("--dump-descriptor needs a model with lesion-based pooling")
    size = int(meta.get("image_size", cfg.data.image_size))
    image = read_image(path)
    h, w = image.shape[1:]
    sample = fit_to_canvas(Sample(image=image, mask=np.zeros((h, w), bool), label=0, id=path.stem), size)
    preds = predict(model, [sample])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = Image.fromarray(mask_to_uint8(preds.masks[0]), mode="L")
    if mask.size != (w, h):
        mask = mask.resize((w, h), Image.NEAREST)
    mask.save(out / f"{path.stem}_mask.png")
    rows = [[i + 1] + [_fmt(p) for p in probs] for i, probs in enumerate(preds.stage_diagnosis[0])]
    _write_csv(out / f"{path.stem}_diagnosis.csv", ["stage", "p_non_melanoma", "p_melanoma"], rows)
    if args.dump_descriptor:
        (out / f"{path.stem}_descriptor.csv").write_text(descriptor_to_csv(preds.descriptors[0]))
    print(f"melanoma probability {preds.melanoma_probs[0]:.4f}")
    return EXIT_OK


# argument parsing ----------------------------------------------------------------


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file with [model]/[train]/[data] sections")
    p.add_argument("--beta", type=float, help="classification loss weight")
    p.add_argument("--stages", type=int, help="number of cascade stages")
    p.add_argument("--seed", type=int, help="run seed (data seed for synth, training seed otherwise)")
    p.add_argument("--warmup-iters", type=int, help="segmentation-only iterations")
    p.add_argument("--max-iters", type=int, help="total training iterations")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--image-size", type=int, help="square input size, divisible by 32")
    p.add_argument("--eval-interval", type=int, help="iterations between metric log rows")
    p.add_argument("--deterministic", action="store_true", help="force single-threaded numerics")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesioncascade", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{synth,train,eval,predict}")

    p = sub.add_parser("synth", help="write a synthetic dataset in ISIC layout")
    p.add_argument("--out", required=True)
    _add_overrides(p)

    p = sub.add_parser("train", help="train a model and write a checkpoint + metrics CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_overrides(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_overrides(p)

    p = sub.add_parser("predict", help="segment and diagnose a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-descriptor", action="store_true", help="also write the lesion descriptor CSV")
    _add_overrides(p)
    return parser


def _overrides(args) -> dict:
    seed_section = "data" if args.command == "synth" else "train"
    return {
        "model": {"beta": args.beta, "stages": args.stages},
        "train": {
            "warmup_iters": args.warmup_iters,
            "max_iters": args.max_iters,
            "batch_size": args.batch_size,
            "base_lr": args.base_lr,
            "eval_interval": args.eval_interval,
            **({"seed": args.seed} if seed_section == "train" else {}),
        },
        "data": {
            "image_size": args.image_size,
            **({"seed": args.seed} if seed_section == "data" else {}),
        },
    }


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    limits = threadpool_limits(limits=1) if args.deterministic else contextlib.nullcontext()
    try:
        cfg = load_run_config(args.config, _overrides(args))
        with limits:
            return COMMANDS[args.command](args, cfg)
    except (FileNotFoundError, ConfigurationError, CheckpointError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def run(argv: Optional[Sequence[str]] = None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
