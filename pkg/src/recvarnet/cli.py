"""Command-line entry points: generate-data, train, reconstruct, evaluate.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 for runtime or data errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import config as cfgmod
from .data import SliceDataset, Volume, derive_seed, generate_dataset, load_manifest, read_volume, write_volume
from .evaluation import (
    EvaluationReport,
    evaluate_dataset,
    model_reconstructor,
    nmse,
    psnr,
    ssim,
    zero_filled_recon,
    zero_filled_reconstructor,
)
from .model import RecurrentVarNet
from .operators import apply_mask, ifft2c, rss
from .plotting import comparison_panel, training_curve
from .sampling import build_mask
from .training import METRICS_LOG, load_checkpoint, model_from_checkpoint, train_loop

logger = logging.getLogger("recvarnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML config file with dotted or nested keys.")
    parser.add_argument("--seed", type=int, help="Seed; overrides the config value.")
    parser.add_argument("--out", type=Path, help="Output location.")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="Override any config key."
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="recvarnet", description="Recurrent variational network for multi-coil MRI reconstruction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate-data", help="Simulate a synthetic multi-coil dataset.")
    _common(gen)

    train = sub.add_parser("train", help="Train a model on a dataset manifest.")
    _common(train)
    train.add_argument("--manifest", type=Path, help="Dataset manifest or directory (default: data.root).")
    train.add_argument("--resume", action="store_true", help="Resume from <out>/latest.ckpt.")
    train.add_argument("--total-iters", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--no-ser", action="store_true", help="Disable the sensitivity refinement network.")
    train.add_argument("--no-rsi", action="store_true", help="Initialize the hidden state with zeros.")
    train.add_argument("--share-weights", action="store_true", help="Share recurrent-unit weights over time steps.")
    train.add_argument("--time-steps", type=int)
    train.add_argument("--recurrent-layers", type=int)
    train.add_argument("--hidden-channels", type=int)

    rec = sub.add_parser("reconstruct", help="Reconstruct a volume from retrospectively sub-sampled k-space.")
    _common(rec)
    rec.add_argument("--checkpoint", type=Path, required=True)
    rec.add_argument("--input", type=Path, required=True, help="Fully-sampled k-space volume.")
    rec.add_argument("--acceleration", type=float, required=True)
    rec.add_argument("--png-dir", type=Path, help="Write comparison panels here.")

    ev = sub.add_parser("evaluate", help="Evaluate a model, the zero-filled baseline or a reconstructed volume.")
    _common(ev)
    ev.add_argument("--method", default="zero-filled", help="'zero-filled', 'model' or 'volume'.")
    ev.add_argument("--checkpoint", type=Path, help="Checkpoint for --method model.")
    ev.add_argument("--manifest", type=Path, help="Dataset manifest or directory (default: data.root).")
    ev.add_argument("--split", default="test")
    ev.add_argument("--accelerations", type=float, nargs="+", help="Default: train.acceleration_list.")
    ev.add_argument("--recon", type=Path, help="Reconstructed volume for --method volume.")
    ev.add_argument("--input", type=Path, help="Reference k-space volume for --method volume.")
    ev.add_argument("--figures", action="store_true", help="Write comparison panels for the first slice of each volume.")
    return parser


def _resolve(args, extra: Optional[dict] = None) -> dict:
    overrides = dict(cfgmod.parse_override(o) for o in args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    config = cfgmod.load_config(args.config, overrides)
    print("# resolved config")
    print(cfgmod.dump_config(config), end="", flush=True)
    return config


def cmd_generate_data(args) -> int:
    config = _resolve(args)
    out = args.out or Path(config["data.root"])
    manifest = generate_dataset(
        out,
        seed=int(config["seed"]),
        shape=tuple(config["data.shape"]),
        n_coils=int(config["data.n_coils"]),
        slices_per_volume=int(config["data.slices_per_volume"]),
        n_train=int(config["data.n_train"]),
        n_val=int(config["data.n_val"]),
        n_test=int(config["data.n_test"]),
        sigma=float(config["data.sigma"]),
    )
    counts = {split: sum(v["split"] == split for v in manifest["volumes"]) for split in ("train", "val", "test")}
    n_slices = sum(v["slices"] for v in manifest["volumes"])
    print(
        f"volumes: {len(manifest['volumes'])} (train {counts['train']}, val {counts['val']}, test {counts['test']}); "
        f"slices: {n_slices}; coils: {config['data.n_coils']}; sigma: {config['data.sigma']}; out: {out}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    extra = {
        "train.total_iters": args.total_iters,
        "train.batch_size": args.batch_size,
        "model.time_steps": args.time_steps,
        "model.recurrent_layers": args.recurrent_layers,
        "model.hidden_channels": args.hidden_channels,
    }
    if args.no_ser:
        extra["model.use_ser"] = False
    if args.no_rsi:
        extra["model.use_rsi"] = False
    if args.share_weights:
        extra["model.share_weights"] = True
    config = _resolve(args, extra)
    model_cfg, train_cfg = cfgmod.model_config(config), cfgmod.train_config(config)
    manifest = args.manifest or Path(config["data.root"])
    out = args.out or Path("runs/default")

    torch.manual_seed(train_cfg.seed)
    model = RecurrentVarNet(model_cfg)
    train_set = SliceDataset(manifest, "train")
    val_set = SliceDataset(manifest, "val")
    record = train_loop(model, train_set, train_cfg, out, val_set=val_set, resume=args.resume)
    if (out / METRICS_LOG).exists() and len((out / METRICS_LOG).read_text().splitlines()) > 1:
        training_curve(out / METRICS_LOG, out / "training_curve.png")
    print(f"finished at iteration {record.iteration}; best validation SSIM: {record.best_val_ssim}; out: {out}")
    return EXIT_OK


def _slice_mask(config: dict, shape, acceleration: float, seed: int, volume_index: int, slice_index: int):
    return build_mask(
        config["mask.type"],
        shape,
        acceleration,
        derive_seed(seed, volume_index, slice_index, int(acceleration)),
        config["mask.acs_fraction"],
        config["mask.center_radius"],
    )


def cmd_reconstruct(args) -> int:
    config = _resolve(args)
    seed = int(config["seed"])
    model = model_from_checkpoint(args.checkpoint)
    reconstruct = model_reconstructor(model)
    volume = read_volume(args.input)
    out = args.out or args.input.with_suffix(".recon.kspv")

    images = []
    for s, kspace in enumerate(volume.data):
        kspace = torch.from_numpy(np.ascontiguousarray(kspace))
        mask = _slice_mask(config, tuple(kspace.shape[-2:]), args.acceleration, seed, 0, s)
        masked = apply_mask(kspace, mask.mask_tensor())
        image = reconstruct(masked, mask)
        images.append(image)
        if args.png_dir:
            comparison_panel(
                {
                    "reference": rss(ifft2c(kspace)).numpy(),
                    "zero-filled": zero_filled_recon(masked).numpy(),
                    "model": image,
                },
                args.png_dir / f"slice_{s:03d}_R{args.acceleration:g}.png",
                title=f"slice {s}, R = {args.acceleration:g}",
            )
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(out, Volume(np.stack(images).astype(np.float32), sigma=volume.sigma, seed=seed))
    print(f"wrote {len(images)} slices to {out}")
    return EXIT_OK


def _evaluate_volume_file(args, config) -> EvaluationReport:
    if args.recon is None or args.input is None:
        raise UsageError("--method volume requires --recon and --input.")
    predictions = read_volume(args.recon).data
    reference_kspace = read_volume(args.input).data
    if predictions.shape[0] != reference_kspace.shape[0]:
        raise ValueError(f"Slice count mismatch: {predictions.shape[0]} vs {reference_kspace.shape[0]}.")
    acceleration = (args.accelerations or [float("nan")])[0]
    report = EvaluationReport(method="volume")
    for s, (prediction, kspace) in enumerate(zip(predictions, reference_kspace)):
        reference = rss(ifft2c(torch.from_numpy(np.ascontiguousarray(kspace)))).numpy()
        report.slices.append(
            {
                "volume": args.input.name,
                "slice": s,
                "acceleration": acceleration,
                "ssim": ssim(reference, prediction),
                "psnr": psnr(reference, prediction),
                "nmse": nmse(reference, prediction),
            }
        )
    summary = {"acceleration": acceleration, "n_slices": len(report.slices)}
    summary.update({m: float(np.mean([r[m] for r in report.slices])) for m in ("ssim", "psnr", "nmse")})
    report.volumes.append({"volume": args.input.name, **summary})
    report.summary.append(summary)
    return report


def cmd_evaluate(args) -> int:
    config = _resolve(args)
    seed = int(config["seed"])
    out = args.out or Path("reports")
    accelerations = args.accelerations or list(config["train.acceleration_list"])

    if args.method == "volume":
        report = _evaluate_volume_file(args, config)
    else:
        if args.method == "zero-filled":
            reconstructor = zero_filled_reconstructor
        elif args.method == "model":
            if args.checkpoint is None:
                raise UsageError("--method model requires --checkpoint.")
            reconstructor = model_reconstructor(model_from_checkpoint(args.checkpoint))
        else:
            raise UsageError(f"Unknown method {args.method!r}; expected 'zero-filled', 'model' or 'volume'.")

        manifest, root = load_manifest(args.manifest or Path(config["data.root"]))
        entries = [e for e in manifest["volumes"] if e["split"] == args.split]
        if not entries:
            raise ValueError(f"No volumes in split {args.split!r}.")

        def volumes():
            for entry in entries:
                path = root / entry["path"]
                try:
                    data = read_volume(path).data
                except (OSError, ValueError) as exc:
                    logger.error("Cannot read %s: %s", path, exc)
                    data = None
                yield entry["path"], data

        seen = set()

        def on_slice(record, reference, zero_filled, prediction):
            key = (record["volume"], record["acceleration"])
            if not args.figures or key in seen:
                return
            seen.add(key)
            comparison_panel(
                {"reference": reference, "zero-filled": zero_filled, args.method: prediction},
                out / "figures" / f"{Path(record['volume']).stem}_R{record['acceleration']:g}.png",
                title=f"{record['volume']} slice {record['slice']}, R = {record['acceleration']:g}",
            )

        report = evaluate_dataset(
            volumes(),
            reconstructor,
            accelerations,
            method=args.method,
            mask_type=config["mask.type"],
            seed=seed,
            acs_fraction=config["mask.acs_fraction"],
            center_radius=config["mask.center_radius"],
            on_slice=on_slice,
        )
    jsonl, table = report.write(out)
    print(report.to_table(), end="")
    print(f"wrote {jsonl} and {table}")
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (cfgmod.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
