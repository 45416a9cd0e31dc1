"""Command-line surface: dataset generation, training, evaluation, inference,
and report/plot emission.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 I/O failure,
4 nonfinite-loss abort during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from transcc.config import RunConfig, apply_overrides, load_run_config, save_run_config
from transcc.data import read_split, read_tensor, write_tensor
from transcc.evaluation import evaluate_dataset
from transcc.report import (
    error_histogram_figure,
    format_stats_table,
    read_metrics,
    read_per_image_table,
    result_rows,
    table_rows_to_result,
    training_curve_figure,
    write_per_image_csv,
    write_stats_csv,
)
from transcc.trainer import (
    NonFiniteLossError,
    fit,
    infer,
    load_checkpoint,
    predictor_from_state,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NONFINITE = 4


# ---------------------------------------------------------------------------
# portable pixmap support (binary P6, 8- or 16-bit)


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 pixmap as a float32 HxWx3 image scaled to [0, 1]."""
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(blob):
            raise ValueError(f"{path}: truncated pixmap header")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            pos = blob.find(b"\n", pos)
            if pos < 0:
                raise ValueError(f"{path}: unterminated comment in pixmap header")
            continue
        if ch.isspace():
            pos += 1
            continue
        end = pos
        while end < len(blob) and not blob[end : end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary P6 pixmap (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not (0 < maxval < 65536):
        raise ValueError(f"{path}: pixmap maxval {maxval} out of range")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * 3
    if len(blob) - pos < count * dtype.itemsize:
        raise ValueError(f"{path}: truncated pixmap payload")
    raster = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    return (raster.reshape(height, width, 3).astype(np.float32) / maxval).astype(np.float32)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a [0, 1] HxWx3 image as a 16-bit binary P6 pixmap."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"pixmap image must be HxWx3, got {image.shape}")
    raster = np.round(np.clip(image, 0.0, 1.0) * 65535).astype(">u2")
    header = f"P6\n{image.shape[1]} {image.shape[0]}\n65535\n".encode()
    Path(path).write_bytes(header + raster.tobytes())


# ---------------------------------------------------------------------------
# commands (return exit codes; raise nothing user-facing)


def _resolve_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "override", None):
        config = apply_overrides(config, args.override)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed).validated()
    return config


def cmd_gen_data(config: RunConfig, out_dir, count: int, seed: int) -> int:
    from transcc.data import generate_dataset, write_dataset

    records, manifest = generate_dataset(
        seed,
        count,
        config.image_size,
        config.image_size,
        ratios=config.ratios(),
        mask_fraction=config.mask_fraction,
    )
    write_dataset(records, manifest, out_dir)
    save_run_config(config, Path(out_dir) / "run_config.json")
    sizes = {name: len(ids) for name, ids in manifest.splits.items()}
    print(
        f"wrote {manifest.sample_count} samples at {manifest.height}x{manifest.width} to {out_dir}"
    )
    print(f"splits: train {sizes['train']} / val {sizes['val']} / test {sizes['test']}")
    return EXIT_OK


def cmd_train(config: RunConfig, data_dir, out_dir, resume: bool = False) -> int:
    train_records = read_split(data_dir, "train")
    val_records = read_split(data_dir, "val")
    state, _ = fit(
        train_records,
        val_records,
        config.to_model_config(),
        config.to_train_config(),
        out_dir,
        resume=resume,
    )
    val_mae = state.best_val_mae
    print(f"trained {state.epoch} epochs ({state.step} steps); best validation MAE {val_mae:.4f} deg")
    return EXIT_OK


def cmd_eval(checkpoint, data_dir, split: str, out_dir=None) -> int:
    state = load_checkpoint(checkpoint)
    records = read_split(data_dir, split)
    if records and records[0].input.pixels.shape[0] != state.model_config.input_size:
        print(
            f"error: checkpoint expects {state.model_config.input_size}-pixel inputs but the "
            f"dataset holds {records[0].input.pixels.shape[0]}-pixel images",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    result = evaluate_dataset(predictor_from_state(state), records)
    print(f"{split} split: {len(records)} images, {result.failures} failures")
    print(format_stats_table(result_rows(result)))
    out_dir = Path(out_dir if out_dir is not None else Path(checkpoint).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / f"per_image_{split}.csv"
    write_per_image_csv(result.table, table_path)
    print(f"per-image table: {table_path}")
    return EXIT_OK


def cmd_infer(checkpoint, image_path, out_path) -> int:
    image_path = Path(image_path)
    if image_path.suffix in (".ppm", ".pnm"):
        image = read_ppm(image_path)
    else:
        image = read_tensor(image_path)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"{image_path}: expected an HxWx3 tensor, got shape {tuple(image.shape)}")
    state = load_checkpoint(checkpoint)
    size = state.model_config.input_size
    if image.shape[0] != size or image.shape[1] != size:
        print(
            f"error: image is {image.shape[0]}x{image.shape[1]} but the network takes "
            f"{size}x{size}; resize the image to a multiple-of-16 square matching the checkpoint",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    out = infer(state, image)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    wb = out.wb_image[0].permute(1, 2, 0).numpy()
    if out_path.suffix in (".ppm", ".pnm"):
        write_ppm(out_path, wb)
    else:
        write_tensor(out_path, wb)
    stem = out_path.with_suffix("")
    weight_path = stem.parent / (stem.name + "_weight.t")
    edge_path = stem.parent / (stem.name + "_edge.t")
    write_tensor(weight_path, out.weight_map[0, 0].numpy())
    write_tensor(edge_path, out.edge_map[0, 0].numpy())
    print(f"wrote {out_path}, {weight_path}, {edge_path}")
    return EXIT_OK


def cmd_report(input_path, out_dir) -> int:
    input_path = Path(input_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    head = input_path.read_text().splitlines()
    columns = head[0].split(",") if head else []
    if "kind" in columns:
        rows = read_metrics(input_path)
        figure = training_curve_figure(rows, out_dir / "training_curves.png")
        print(f"wrote {figure}")
        return EXIT_OK
    if "mae" in columns:
        rows = read_per_image_table(input_path)
        result = table_rows_to_result(rows)
        figure = error_histogram_figure(
            [row["mae"] for row in rows], out_dir / "error_histogram.png"
        )
        summary_path = out_dir / "summary.csv"
        write_stats_csv(result_rows(result), summary_path)
        print(format_stats_table(result_rows(result)))
        print(f"wrote {figure} and {summary_path}")
        return EXIT_OK
    raise ValueError(f"{input_path}: neither a metrics log nor a per-image table")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transcc",
        description="multi-illuminant color constancy: data, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        if seed:
            p.add_argument("--seed", type=int, help="overrides the config seed")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--count", type=int, help="number of samples (default from config)")

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    p.add_argument("data_dir", help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", action="store_true", help="continue from latest.ckpt")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="directory for the per-image table (default: checkpoint's)")

    p = sub.add_parser("infer", help="run the network on one image (.t or .ppm)")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--out", required=True, help="output image path (.t or .ppm)")

    p = sub.add_parser("report", help="render figures and summary tables")
    p.add_argument("input", help="metrics.csv or a per-image table")
    p.add_argument("--out", required=True, help="report output directory")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "gen-data":
            config = _resolve_config(args)
            count = args.count if args.count is not None else config.count
            return cmd_gen_data(config, args.out, count, config.seed)
        if args.command == "train":
            config = _resolve_config(args)
            return cmd_train(config, args.data_dir, args.out, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.data_dir, args.split, args.out)
        if args.command == "infer":
            return cmd_infer(args.checkpoint, args.image, args.out)
        if args.command == "report":
            return cmd_report(args.input, args.out)
        raise AssertionError(f"unhandled command {args.command}")
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
