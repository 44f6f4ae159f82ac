"""Command-line entry point: train / eval / segment / metrics.

Every run writes a resolved-configuration manifest next to its outputs so
it can be repeated exactly; domain errors exit with status 1 and a single
diagnostic line, usage errors with argparse's conventional status 2.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import __version__, config as cfg, dataio, evaluation, inference, train, vmetrics
from .errors import ConfigurationError, OutOfMemoryError, VesselSegError
from .model import load_checkpoint, save_checkpoint


def _log(message: str) -> None:
    print(f"[vesselseg] {message}", file=sys.stderr)


def _apply_thread_cap() -> None:
    raw = os.environ.get("VESSELSEG_NUM_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigurationError(
            f"VESSELSEG_NUM_THREADS must be a positive integer, got {raw!r}"
        ) from None
    import torch

    torch.set_num_threads(n)


def _parse_set_overrides(items) -> dict[str, str]:
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _load_dataset(manifest_path):
    """Manifest -> (ordered ids, {id: (image, mask)})."""
    pairs = dataio.read_manifest(manifest_path)
    data, ids = {}, []
    for image_path, mask_path in pairs:
        image, mask = dataio.load_pair(image_path, mask_path)
        if image.id in data:
            raise ConfigurationError(f"duplicate sample id {image.id!r} in manifest")
        data[image.id] = (image, mask)
        ids.append(image.id)
    return ids, data


# --- subcommands ---------------------------------------------------------------

def _cmd_train(args) -> int:
    file_values = cfg.parse_config_file(args.config) if args.config else {}
    overrides = _parse_set_overrides(args.set)
    if args.manifest:
        overrides["manifest"] = args.manifest
    if args.out:
        overrides["out_dir"] = args.out
    run = cfg.resolve(file_values, overrides)
    cfg.ensure_seeds(run, log=_log)

    if run["manifest"] is None:
        raise ConfigurationError("train needs a dataset manifest (--manifest or config)")
    ids, data = _load_dataset(run["manifest"])

    out_dir = Path(run["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_run_manifest(run, out_dir / "run_manifest.cfg", __version__)

    if run["split_file"] is not None:
        split = dataio.read_split(run["split_file"])
    else:
        n_val, n_test = run["val_count"], run["test_count"]
        n_train = len(ids) - n_val - n_test
        split = dataio.make_split(ids, (n_train, n_val, n_test), run["split_seed"])
    dataio.write_split(split, out_dir / "split.txt")
    _log(f"split: {len(split.train_ids)} train / {len(split.val_ids)} val / "
         f"{len(split.test_ids)} test")

    train_config = cfg.train_config_from(run)
    model, history = train.run_training(train_config, split, data)
    history.write_csv(out_dir / "history.csv")
    save_checkpoint(model, train._metadata(train_config, len(history)),
                    out_dir / "model_final.ckpt")
    last = history.epochs[-1]
    _log(f"finished epoch {last.epoch}: train loss {last.train_loss:.4f}, "
         f"val loss {last.val_loss:.4f}")
    print(out_dir / "model_final.ckpt")
    return 0


def _cmd_eval(args) -> int:
    if args.threshold is not None and args.select_on is not None:
        raise ConfigurationError("--threshold and --select-on are mutually exclusive")
    select_on = args.select_on or "val"
    if select_on not in ("val", "test"):
        raise ConfigurationError(f"--select-on must be val or test, got {select_on!r}")

    model = load_checkpoint(args.model)
    ids, data = _load_dataset(args.manifest)
    if args.split:
        split = dataio.read_split(args.split)
        val_pairs = [data[i] for i in split.val_ids]
        test_pairs = [data[i] for i in split.test_ids]
    else:
        val_pairs, test_pairs = [], [data[i] for i in ids]
    if not test_pairs:
        raise ConfigurationError("no test samples to evaluate")

    threshold = args.threshold
    if threshold is None and select_on == "val":
        if not val_pairs:
            raise ConfigurationError(
                "--select-on val needs a split file with validation ids"
            )
        probs = [inference.segment_full(model, img) for img, _ in val_pairs]
        masks = [m for _, m in val_pairs]
        threshold, val_f1 = evaluation.best_f1_threshold(probs, masks)
        _log(f"selected threshold {threshold:.4f} on validation (F1 {val_f1:.4f})")

    report = evaluation.evaluate(model, test_pairs, threshold=threshold)
    sys.stdout.write(evaluation.report_text(report))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        evaluation.write_report_csv(report, out_dir / "report.csv")
        evaluation.write_curve_csv(report.roc, out_dir / "roc.csv", ("fpr", "tpr"))
        evaluation.write_curve_csv(report.pr, out_dir / "pr.csv", ("recall", "precision"))
        _log(f"wrote report.csv, roc.csv, pr.csv to {out_dir}")
    return 0


def _cmd_segment(args) -> int:
    model = load_checkpoint(args.model)
    image = dataio.load_image(args.input)
    policy = inference.TilingPolicy(tile_w=args.tile_size, tile_h=args.tile_size,
                                    overlap=args.tile_overlap)
    tiled = args.tiled
    if args.tiled:
        pmap = inference.segment_tiled(model, image, policy)
    else:
        try:
            pmap = inference.segment_full(model, image)
        except OutOfMemoryError as exc:
            _log(f"full pass failed ({exc}); retrying tiled")
            pmap = inference.segment_tiled(model, image, policy)
            tiled = True

    out = Path(args.output)
    inference.write_probability_png(pmap, out)
    mask_path = Path(args.mask_output) if args.mask_output else out.with_name(
        out.stem + "_mask.png")
    mask = inference.binarize(pmap, args.threshold)
    inference.write_mask_png(mask, mask_path)
    inference.write_sidecar(
        out.with_suffix(out.suffix + ".meta.txt"),
        source_id=image.id,
        checkpoint_id=model.checkpoint_id,
        threshold=args.threshold,
        forward_seconds=pmap.forward_seconds,
        tiled=tiled,
        version=__version__,
    )
    _log(f"{image.id}: {image.width}x{image.height} in "
         f"{pmap.forward_seconds:.3f}s forward; map -> {out}, mask -> {mask_path}")
    return 0


def _cmd_metrics(args) -> int:
    mask = dataio.load_mask(args.mask)
    roi = dataio.load_mask(args.roi).labels if args.roi else None
    metrics = vmetrics.compute_metrics(mask, roi=roi)
    line = vmetrics.metrics_csv_line(Path(args.mask).stem, metrics)
    print("id,vessel_density,fractal_dimension,fit_residual")
    print(line)
    if args.out:
        Path(args.out).write_text(
            "id,vessel_density,fractal_dimension,fit_residual\n" + line + "\n")
    return 0


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesselseg",
        description="U-Net vessel segmentation for infra-red SLO retinal images.",
    )
    parser.add_argument("--version", action="version", version=f"vesselseg {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{train,eval,segment,metrics}")

    p = sub.add_parser("train", help="train a model from a dataset manifest")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a configuration key (repeatable)")
    p.add_argument("--manifest", help="dataset manifest (image<TAB>mask per line)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--split", help="split file from a training run")
    p.add_argument("--threshold", type=float, help="fixed decision threshold")
    p.add_argument("--select-on", dest="select_on", choices=("val", "test"),
                   help="dataset used to pick the F1-optimal threshold (default val)")
    p.add_argument("--out", help="directory for report.csv / roc.csv / pr.csv")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("segment", help="segment one image with a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="input image (grayscale PNG/TIFF)")
    p.add_argument("--output", required=True, help="16-bit probability map PNG")
    p.add_argument("--mask-output", help="binary mask PNG (default <output>_mask.png)")
    p.add_argument("--threshold", type=float, default=0.45,
                   help="binarization threshold (default 0.45)")
    p.add_argument("--tiled", action="store_true",
                   help="force tiled inference instead of whole-image")
    p.add_argument("--tile-size", type=int, default=512)
    p.add_argument("--tile-overlap", type=int, default=64)
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("metrics", help="vascular metrics from a binary mask PNG")
    p.add_argument("--mask", required=True, help="binary vessel mask PNG")
    p.add_argument("--roi", help="optional region-of-interest mask PNG")
    p.add_argument("--out", help="optional CSV output path")
    p.set_defaults(func=_cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        _apply_thread_cap()
        return args.func(args)
    except VesselSegError as exc:
        _log(f"error: {exc}")
        return 1
    except OSError as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
