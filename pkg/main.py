"""
Command line entry point.

    python main.py synth --count 8 --out runs/phantoms
    python main.py train --data runs/phantoms --config data/desk_train.cfg --out runs/desk
    python main.py evaluate --checkpoint runs/desk/checkpoint.pt --data runs/phantoms --out runs/eval
    python main.py register --checkpoint runs/desk/checkpoint.pt --fixed a.nii.gz --moving b.nii.gz
    python main.py gridsearch --data runs/phantoms --config data/gridsearch.cfg --out runs/grid

Exit codes: 0 success, 1 usage or configuration, 2 data, checkpoint or shape, 3 divergence.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import torch

from data import (
    DatasetError,
    Volume,
    discover_dataset,
    generate_phantom,
    load_volume,
    prepare_record,
    prepare_volume,
    save_mask,
    save_volume,
    synth_deformation,
)
from evaluate import (
    best_cell,
    evaluate_record,
    export_overlay,
    export_stage_overlays,
    grid_search,
    summarize_metrics,
    write_grid_csv,
    write_metrics_csv,
)
from helpers.config import ConfigError, RunConfig, env_defaults, load_config, with_overrides
from helpers.io_functions import FIELD_SUFFIX, VolumeFormatError, is_nifti
from helpers.manifest import RunManifest
from helpers.runtime import resolve_device, seed_everything
from network import count_parameters
from train import CheckpointError, TrainingDiverged, checkpoint_model, load_checkpoint, train
from warp import DeformationField, grid_sample

logger = logging.getLogger("refinereg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class Parser(argparse.ArgumentParser):
    """Usage errors exit with 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def prepared_records(run: RunConfig, data_dir: Path, target_shape, require_masks: bool):
    records = discover_dataset(data_dir, seed=run.seed, require_masks=require_masks)
    return [
        prepare_record(r, target_shape, run.data.window, run.data.preprocess, run.data.crop_margin)
        for r in records
    ]


def cmd_train(args, run: RunConfig, manifest: RunManifest) -> int:
    data_dir = Path(args.data)
    records = prepared_records(run, data_dir, run.train.network.in_shape, require_masks=False)
    pairs = [(r.fixed, r.moving) for r in records]
    manifest.inputs["data"] = str(data_dir)
    if args.resume:
        manifest.inputs["resume"] = str(args.resume)

    config = replace(run.train, progress=args.progress)
    print(f"Training on {len(pairs)} pairs, {config.total_steps} steps")
    result = train(config, pairs, out_dir=args.out, resume_from=args.resume)

    checkpoint_path = Path(args.out) / "checkpoint.pt"
    history_path = Path(args.out) / "loss_history.csv"
    manifest.outputs.update(checkpoint=str(checkpoint_path), loss_history=str(history_path))
    print(f"Parameters: {count_parameters(result.model)}")
    if result.history:
        print(f"Final loss: {result.history[-1]['total']:.6g}")
    print(f"Checkpoint saved to: {checkpoint_path}")
    return EXIT_OK


def cmd_register(args, run: RunConfig, manifest: RunManifest) -> int:
    device = resolve_device(run.train.device)
    model = checkpoint_model(load_checkpoint(args.checkpoint), device)
    shape = model.config.in_shape
    fixed = prepare_volume(load_volume(args.fixed), shape, run.data.window, run.data.preprocess)
    moving = prepare_volume(load_volume(args.moving), shape, run.data.window, run.data.preprocess)
    manifest.inputs.update(checkpoint=str(args.checkpoint), fixed=str(args.fixed), moving=str(args.moving))

    with torch.no_grad():
        outputs = model(fixed.to_tensor(device), moving.to_tensor(device))
    field = DeformationField(outputs.final_field[0].cpu())
    warped = Volume(outputs.warped[0, 0].cpu().numpy(), fixed.spacing, fixed.origin)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    field_path = out / f"field{FIELD_SUFFIX}"
    warped_path = out / ("warped.nii.gz" if is_nifti(Path(args.moving)) else "warped.raw")
    field.save(field_path)
    save_volume(warped, warped_path)
    manifest.outputs.update(field=str(field_path), warped=str(warped_path))

    if args.overlay:
        axis = args.axis
        index = shape[axis] // 2
        overlay = export_overlay(fixed, warped, [], axis, index, out / "overlay.png")
        stages = export_stage_overlays(outputs, axis, out / "stages.png", index)
        manifest.outputs.update(overlay=str(overlay), stages=str(stages))

    print(f"Field saved to: {field_path}")
    print(f"Warped volume saved to: {warped_path}")
    return EXIT_OK


def cmd_evaluate(args, run: RunConfig, manifest: RunManifest) -> int:
    device = resolve_device(run.train.device)
    model = checkpoint_model(load_checkpoint(args.checkpoint), device)
    records = prepared_records(run, Path(args.data), model.config.in_shape, require_masks=True)
    manifest.inputs.update(checkpoint=str(args.checkpoint), data=str(args.data))

    rows, reports = [], []
    out = Path(args.out)
    for record in records:
        report = evaluate_record(model, record, timing=not args.no_timing)
        reports.append(report)
        rows.append(report.as_row(record.fixed_id, record.moving_id))
        logger.info("%s <- %s: mean Dice %.4f", record.fixed_id, record.moving_id, report.dice_mean)
        if args.overlays:
            with torch.no_grad():
                outputs = model(record.fixed.to_tensor(device), record.moving.to_tensor(device))
            axis = args.axis
            export_overlay(
                record.fixed, outputs.warped, [record.mask_fixed], axis,
                record.fixed.shape[axis] // 2, out / "overlays" / f"{record.fixed_id}__{record.moving_id}.png",
            )

    csv_path = Path(args.csv) if args.csv else out / "metrics.csv"
    write_metrics_csv(rows, csv_path)
    manifest.outputs["metrics"] = str(csv_path)

    summary = summarize_metrics(reports)
    print(" ".join(f"{name}={value:.4f}" for name, value in summary.items()))
    print(f"Mean Dice: {summary['mean']:.4f}")
    print(f"Metrics saved to: {csv_path}")
    return EXIT_OK


def cmd_synth(args, run: RunConfig, manifest: RunManifest) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}", key="count")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    for k in range(args.count):
        cfg = replace(run.synth, seed=run.synth.seed + k)
        phantom, mask = generate_phantom(cfg)
        field = synth_deformation(cfg)
        deformed = grid_sample(phantom.to_tensor(), field.tensor)
        save_volume(phantom, out / f"phantom_{k}.raw")
        save_mask(mask, out / f"phantom_{k}_mask.raw")
        save_volume(Volume(deformed[0, 0].numpy()), out / f"deformed_{k}.raw")
        field.save(out / f"field_{k}{FIELD_SUFFIX}")
        logger.info("Wrote synthetic pair %d", k)

    manifest.outputs["dataset"] = str(out)
    print(f"Wrote {args.count} synthetic pairs to: {out}")
    return EXIT_OK


def cmd_gridsearch(args, run: RunConfig, manifest: RunManifest) -> int:
    records = prepared_records(run, Path(args.data), run.train.network.in_shape, require_masks=True)
    if len(records) < 2:
        raise DatasetError(f"Grid search needs at least 2 pairs, found {len(records)}")
    n_eval = min(len(records) - 1, max(1, round(run.grid.eval_fraction * len(records))))
    train_records, eval_records = records[:-n_eval], records[-n_eval:]
    manifest.inputs["data"] = str(args.data)

    cells = grid_search(
        run.grid.alpha, run.grid.beta,
        [(r.fixed, r.moving) for r in train_records], eval_records, run.train,
    )
    csv_path = Path(args.csv) if args.csv else Path(args.out) / "grid.csv"
    write_grid_csv(cells, csv_path)
    manifest.outputs["grid"] = str(csv_path)

    best = best_cell(cells)
    if best is None:
        print("Every grid cell diverged", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"Best cell: alpha={best.alpha:g} beta={best.beta:g} mean Dice={best.dice_mean:.4f}")
    print(f"Grid saved to: {csv_path}")
    return EXIT_OK


def add_common_flags(parser: argparse.ArgumentParser, command: str) -> None:
    parser.add_argument("--config", type=Path, default=None, help="section.key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="overrides REFINEREG_SEED and the config file")
    parser.add_argument("--out", type=Path, default=Path("runs") / command, help="output directory")
    parser.add_argument("--device", default=None, help="cpu or cuda; overrides REFINEREG_DEVICE")
    parser.add_argument("--log-level", default=None, help="overrides REFINEREG_LOG_LEVEL")


def add_ablation_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--no-refine-core", action="store_true", help="refine blocks see features only")
    parser.add_argument("--no-rigid", action="store_true", help="drop the rigid block")
    parser.add_argument("--no-range-loss", action="store_true", help="alpha = 0")
    parser.add_argument("--no-smooth-loss", action="store_true", help="beta = 0")


def build_parser() -> Parser:
    parser = Parser(prog="main.py", description="Coarse-to-fine unsupervised 3D registration")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    formatter = argparse.ArgumentDefaultsHelpFormatter

    p = commands.add_parser("train", help="train a model on a dataset directory", formatter_class=formatter)
    add_common_flags(p, "train")
    add_ablation_flags(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--progress", action="store_true", help="show a progress bar")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("register", help="register one pair with a trained model", formatter_class=formatter)
    add_common_flags(p, "register")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--overlay", action="store_true", help="also write overlay.png and stages.png")
    p.add_argument("--axis", type=int, default=0, choices=(0, 1, 2), help="slice axis for overlays")
    p.set_defaults(handler=cmd_register)

    p = commands.add_parser("evaluate", help="score a model on a dataset with masks", formatter_class=formatter)
    add_common_flags(p, "evaluate")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--csv", type=Path, default=None, help="metrics CSV (default <out>/metrics.csv)")
    p.add_argument("--no-timing", action="store_true", help="write nan for time_sec")
    p.add_argument("--overlays", action="store_true", help="write one overlay PNG per pair")
    p.add_argument("--axis", type=int, default=0, choices=(0, 1, 2), help="slice axis for overlays")
    p.set_defaults(handler=cmd_evaluate)

    p = commands.add_parser("synth", help="write phantoms with known deformations", formatter_class=formatter)
    add_common_flags(p, "synth")
    p.add_argument("--count", type=int, default=1, help="number of pairs")
    p.set_defaults(handler=cmd_synth)

    p = commands.add_parser("gridsearch", help="train and score every (alpha, beta) cell", formatter_class=formatter)
    add_common_flags(p, "gridsearch")
    add_ablation_flags(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--csv", type=Path, default=None, help="grid CSV (default <out>/grid.csv)")
    p.set_defaults(handler=cmd_gridsearch)

    return parser


def fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        env = env_defaults()
        logging.basicConfig(
            level=(args.log_level or env["log_level"]).upper(),
            format="%(asctime)s %(name)s %(levelname)s %(message)s",
        )
        run = with_overrides(
            load_config(args.config),
            seed=args.seed,
            device=args.device,
            no_refine_core=getattr(args, "no_refine_core", False),
            no_rigid=getattr(args, "no_rigid", False),
            no_range_loss=getattr(args, "no_range_loss", False),
            no_smooth_loss=getattr(args, "no_smooth_loss", False),
        )
    except (ConfigError, ValueError) as e:
        return fail(str(e), EXIT_USAGE)

    seed_everything(run.seed)
    manifest = RunManifest(command=args.command, config=run.to_dict(), seed=run.seed)
    if args.config:
        manifest.inputs["config"] = str(args.config)

    code, status = EXIT_OK, "ok"
    try:
        code = args.handler(args, run, manifest)
    except ConfigError as e:
        code, status = fail(str(e), EXIT_USAGE), "config error"
    except TrainingDiverged as e:
        code, status = fail(str(e), EXIT_DIVERGED), "diverged"
    except (DatasetError, VolumeFormatError, CheckpointError, FileNotFoundError, OSError, ValueError) as e:
        code, status = fail(str(e), EXIT_DATA), "data error"

    if code != EXIT_OK and status == "ok":
        status = f"exit {code}"
    manifest.finish(status)
    try:
        manifest.write(args.out)
    except OSError as e:
        logger.warning("Cannot write run manifest: %s", e)
    return code


if __name__ == "__main__":
    sys.exit(main())
