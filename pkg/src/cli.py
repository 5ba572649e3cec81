#!/usr/bin/env python3
"""
Command-line entry point: dataset generation, encoder pretraining, training, harmonization and evaluation.

Run as ``python -m src.cli <command> ...``; ``--help`` on any command lists its flags.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from src.anatomy_mapper import export_beta
from src.config import experiment_from_dict, load_config, save_config
from src.errors import HarmonizationError
from src.evaluation import (compare_matrices, cross_contrast_matrix, identity_baseline, run_ablation,
                            write_matrix, write_summary)
from src.losses import read_loss_log
from src.metadata import AcquisitionParams
from src.phantom import Manifest, build_dataset, read_image, write_image
from src.style_encoders import image_style_consistency, load_encoders, pretrain_clip, retrieval_accuracy
from src.trainer import Guidance, Harmonizer, Trainer, load_checkpoint
from src.visualizer import Visualizer

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Overrides every seed in the config")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    return common


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="python -m src.cli",
                                     description="Contrast harmonization of MR slices guided by an image or metadata")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    p = commands.add_parser("gen-data", parents=[common], help="Render the synthetic paired phantom dataset")
    p.add_argument("--config", help="Experiment JSON config (phantom section is used)")
    p.add_argument("--out", required=True, help="Dataset directory")
    p.add_argument("--workers", type=int, default=None, help="Render processes (default DISTH_NUM_WORKERS)")

    p = commands.add_parser("pretrain-clip", parents=[common], help="Contrastively pretrain the style encoders")
    p.add_argument("--data", required=True, help="Dataset directory")
    p.add_argument("--out", required=True, help="Encoder checkpoint file")
    p.add_argument("--config", help="Experiment JSON config (clip section is used)")

    p = commands.add_parser("clip-eval", parents=[common], help="Prompt retrieval accuracy of pretrained encoders")
    p.add_argument("--clip", required=True, help="Encoder checkpoint file")
    p.add_argument("--data", required=True, help="Dataset directory")
    p.add_argument("--out", required=True, help="JSON report file")
    p.add_argument("--split", default="test")

    p = commands.add_parser("train", parents=[common], help="Train the harmonization model")
    p.add_argument("--data", required=True, help="Dataset directory")
    p.add_argument("--clip", help="Encoder checkpoint file; the encoders come from the checkpoint with --resume")
    p.add_argument("--config", help="Experiment JSON config; with --resume it replaces the stored one")
    p.add_argument("--out", required=True, help="Run directory; the final checkpoint is <out>/final.pt")
    p.add_argument("--resume", help="Checkpoint to continue from")

    p = commands.add_parser("harmonize", parents=[common], help="Harmonize one slice")
    p.add_argument("--checkpoint", required=True, help="Checkpoint file or run directory")
    p.add_argument("--input", required=True, help="Source PNG")
    guidance = p.add_mutually_exclusive_group(required=True)
    guidance.add_argument("--target", help="Target image PNG (image guidance)")
    guidance.add_argument("--metadata", help="Target acquisition JSON sidecar (metadata guidance)")
    p.add_argument("--out", required=True, help="Output PNG")
    p.add_argument("--figure", help="Also write a source/target/harmonized comparison PNG")

    p = commands.add_parser("eval-matrix", parents=[common], help="Source x target contrast PSNR/SSIM matrices")
    p.add_argument("--checkpoint", required=True, help="Checkpoint file or run directory")
    p.add_argument("--data", required=True, help="Dataset directory")
    p.add_argument("--guidance", required=True, choices=["image", "text"])
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--split", default="test")

    p = commands.add_parser("ablate", parents=[common], help="Train and score the five ablation variants")
    p.add_argument("--data", required=True, help="Dataset directory")
    p.add_argument("--config", help="Experiment JSON config shared by all variants")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--clip", help="Encoder checkpoint; pretrained into <out>/clip.pt when omitted")

    p = commands.add_parser("export-beta", parents=[common], help="Export the anatomy map of one slice")
    p.add_argument("--checkpoint", required=True, help="Checkpoint file or run directory")
    p.add_argument("--input", required=True, help="Source PNG")
    p.add_argument("--out", required=True, help="Output directory")
    return parser


def apply_seed(config, seed):
    if seed is not None:
        config.phantom.seed = seed
        config.clip.seed = seed
        config.train.seed = seed
    return config


def load_experiment(args):
    return apply_seed(load_config(getattr(args, "config", None)), args.seed)


def _seed_everything(seed):
    if seed is None:
        return
    np.random.seed(seed)
    torch.manual_seed(seed)


def cmd_gen_data(args):
    config = load_experiment(args)
    manifest = build_dataset(config.phantom, args.out, args.workers)
    save_config(config.phantom, args.out, "phantom_config.json")
    print("Wrote {} samples to {}".format(len(manifest.samples), args.out))


def cmd_pretrain_clip(args):
    config = load_experiment(args)
    manifest = Manifest.load(args.data)
    out = Path(args.out)
    pretrain_clip(manifest, config.clip, out)
    save_config(config.clip, out.parent, out.stem + "_config.json")


def cmd_clip_eval(args):
    pair = load_encoders(args.clip)
    report = retrieval_accuracy(pair, Manifest.load(args.data), args.split)
    report["image_style_consistency"] = image_style_consistency(pair, seed=10000 + (args.seed or 0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump(report, f, indent=2)
    print("Top-1 prompt retrieval: {:.3f} over {} images".format(report["top1"], report["n"]))


def cmd_train(args):
    manifest = Manifest.load(args.data)
    if args.resume:
        config = None
        if args.config:
            config = load_experiment(args)
        elif args.seed is not None:
            config = apply_seed(experiment_from_dict(load_checkpoint(args.resume)["config"]), args.seed)
        trainer = Trainer.from_checkpoint(args.resume, config)
    else:
        trainer = Trainer(load_experiment(args), load_encoders(args.clip))
    final = trainer.fit(manifest, args.out)
    rows = read_loss_log(Path(args.out) / "losses.csv")
    if rows:
        Visualizer().save_loss_curves(rows, Path(args.out) / "losses.png")
    print("Final checkpoint: {}".format(final))


def cmd_harmonize(args):
    # guidance is validated before the checkpoint is touched
    if args.target:
        target = read_image(args.target)
        guidance = Guidance(image=target)
    else:
        target = None
        guidance = Guidance(metadata=AcquisitionParams.from_json(args.metadata))
    source = read_image(args.input)
    harmonizer = Harmonizer.from_checkpoint(args.checkpoint)
    output = harmonizer.harmonize(source, guidance)
    write_image(args.out, output)
    if args.figure:
        images = [source, output] if target is None else [source, target, output]
        titles = ["source", "harmonized"] if target is None else ["source", "target", "harmonized"]
        Visualizer().save_comparison(images, args.figure, titles)
    print("Wrote {}".format(args.out))


def cmd_eval_matrix(args):
    manifest = Manifest.load(args.data)
    harmonizer = Harmonizer.from_checkpoint(args.checkpoint)
    matrix = cross_contrast_matrix(harmonizer, manifest, args.guidance, args.split)
    baseline = identity_baseline(manifest, args.split)
    visualizer = Visualizer()
    out = Path(args.out)
    write_matrix(matrix, out, visualizer, "{}-guided".format(args.guidance))
    write_matrix(baseline, out / "baseline", visualizer, "identity")
    write_summary({
        "guidance": args.guidance,
        "split": args.split,
        "pairs": int(matrix.counts.sum()),
        "mean_psnr": matrix.overall("psnr"),
        "mean_ssim": matrix.overall("ssim"),
        "baseline_psnr": baseline.overall("psnr"),
        "baseline_ssim": baseline.overall("ssim"),
        "improvement": compare_matrices(matrix, baseline),
    }, out / "summary.json")
    print("Mean PSNR {:.2f} dB, mean SSIM {:.4f} ({} pairs)".format(
        matrix.overall("psnr"), matrix.overall("ssim"), int(matrix.counts.sum())))


def cmd_ablate(args):
    config = load_experiment(args)
    manifest = Manifest.load(args.data)
    out = Path(args.out)
    save_config(config, out)
    if args.clip:
        encoders = load_encoders(args.clip)
    elif (out / "clip.pt").exists():
        encoders = load_encoders(out / "clip.pt")
    else:
        encoders = pretrain_clip(manifest, config.clip, out / "clip.pt")
    rows = run_ablation(manifest, config, encoders, out)
    for row in rows:
        print("{:<46} PSNR {:.2f}/{:.2f}  SSIM {:.4f}/{:.4f}  {}".format(
            row["variant"], row["psnr_image"], row["psnr_text"], row["ssim_image"], row["ssim_text"], row["status"]))


def cmd_export_beta(args):
    harmonizer = Harmonizer.from_checkpoint(args.checkpoint)
    beta = harmonizer.beta(read_image(args.input))
    export_beta(beta, args.out, Visualizer())
    print("Exported beta {} to {}".format(tuple(beta.shape), args.out))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-clip": cmd_pretrain_clip,
    "clip-eval": cmd_clip_eval,
    "train": cmd_train,
    "harmonize": cmd_harmonize,
    "eval-matrix": cmd_eval_matrix,
    "ablate": cmd_ablate,
    "export-beta": cmd_export_beta,
}


def dispatch(argv=None):
    """Run one command; returns 0 on success, 1 on a runtime error and 2 on a usage error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train" and not (args.clip or args.resume):
            parser.error("train needs --clip unless --resume is given")
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    _seed_everything(args.seed)
    try:
        COMMANDS[args.command](args)
    except (HarmonizationError, OSError) as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print("error: {}".format(e), file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
