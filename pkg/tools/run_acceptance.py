#!/usr/bin/env python3
"""
End-to-end acceptance run: build the desk dataset, pretrain the style encoders,
train, evaluate both guidance modes against the identity baseline and run the
ablation. Writes acceptance.json with one entry per check.

    python tools/run_acceptance.py --config configs/desk.json --work runs/acceptance
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.cli import dispatch  # noqa: E402
from src.evaluation import (ADAIN_LABEL, FULL_MODEL_LABEL, IMAGE_ONLY_LABEL, METADATA_ONLY_LABEL,  # noqa: E402
                            beta_consistency, cross_contrast_matrix, identity_baseline, run_ablation,
                            self_reconstruction)
from src.config import load_config  # noqa: E402
from src.phantom import Manifest  # noqa: E402
from src.style_encoders import load_encoders  # noqa: E402
from src.trainer import ConditioningSampler, Harmonizer  # noqa: E402

logger = logging.getLogger("acceptance")

RETRIEVAL_GATE = 0.80
PSNR_MARGIN_DB = 3.0
SSIM_MARGIN = 0.05
PARITY_DB = 2.0


def run(argv, name):
    code = dispatch(argv)
    if code != 0:
        raise RuntimeError("{} exited with code {}".format(name, code))


def conditioning_check(p=0.5, draws=10000, seed=0):
    sampler = ConditioningSampler(p, seed)
    for _ in range(draws):
        sampler.draw(1)
    rate = sampler.image_fraction
    return {"rate": rate, "passed": 0.48 <= rate <= 0.52}


@torch.no_grad()
def affine_check(harmonizer, manifest, limit=8):
    """Largest relative change of beta under a*I + b over a few test slices."""
    worst = 0.0
    for record in manifest.records("test")[:limit]:
        image = torch.from_numpy(manifest.load_sample(record).image.astype(np.float32))
        base = harmonizer.net.beta(image)
        for a in (0.5, 2.0):
            moved = harmonizer.net.beta(a * image + 0.1)
            worst = max(worst, float((moved - base).norm() / base.norm()))
    return {"max_relative_error": worst, "passed": worst < 1e-4}


def matrix_checks(image, text, baseline):
    cells = {}
    beats_baseline = parity = True
    for s, t in image.populated():
        gain_psnr = image.mean(s, t, "psnr") - baseline.mean(s, t, "psnr")
        gain_ssim = image.mean(s, t, "ssim") - baseline.mean(s, t, "ssim")
        gap = abs(image.mean(s, t, "psnr") - text.mean(s, t, "psnr"))
        cells["{}->{}".format(s, t)] = {"psnr_gain": gain_psnr, "ssim_gain": gain_ssim, "text_gap_db": gap}
        beats_baseline &= gain_psnr >= PSNR_MARGIN_DB and gain_ssim >= SSIM_MARGIN
        parity &= gap < PARITY_DB
    return {"cells": cells, "beats_baseline": beats_baseline, "bimodal_parity": parity}


def ablation_checks(rows):
    by_label = {row["variant"]: row for row in rows}
    full = by_label[FULL_MODEL_LABEL]
    adain = by_label[ADAIN_LABEL]
    image_only = by_label[IMAGE_ONLY_LABEL]
    metadata_only = by_label[METADATA_ONLY_LABEL]
    return {
        "full_beats_adain": full["psnr_image"] > adain["psnr_image"] and full["ssim_image"] > adain["ssim_image"],
        "image_only_text_le_image": image_only["psnr_text"] <= image_only["psnr_image"],
        "metadata_only_image_le_full": metadata_only["psnr_image"] <= full["psnr_image"],
        "failures": [row["variant"] for row in rows if row["status"] != "ok"],
    }


def main():
    parser = argparse.ArgumentParser(description="Run the desk-scale acceptance experiments")
    parser.add_argument("--config", default="configs/desk.json")
    parser.add_argument("--work", default="runs/acceptance")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--skip-ablation", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

    work = Path(args.work)
    data, clip, run_dir = work / "data", work / "clip.pt", work / "train"
    seed = ["--seed", str(args.seed)]
    report = {"config": args.config, "conditioning": conditioning_check()}
    time_start = time.time()

    run(["gen-data", "--config", args.config, "--out", str(data)] + seed, "gen-data")
    run(["pretrain-clip", "--data", str(data), "--config", args.config, "--out", str(clip)] + seed, "pretrain-clip")
    run(["clip-eval", "--clip", str(clip), "--data", str(data), "--out", str(work / "clip_eval.json")], "clip-eval")
    with open(work / "clip_eval.json") as f:
        retrieval = json.load(f)
    report["retrieval"] = {"top1": retrieval["top1"], "passed": retrieval["top1"] >= RETRIEVAL_GATE}

    if report["retrieval"]["passed"]:
        run(["train", "--data", str(data), "--clip", str(clip), "--config", args.config,
             "--out", str(run_dir)] + seed, "train")
        for mode in ("image", "text"):
            run(["eval-matrix", "--checkpoint", str(run_dir), "--data", str(data), "--guidance", mode,
                 "--out", str(work / "eval_{}".format(mode))], "eval-matrix")
        manifest = Manifest.load(data)
        harmonizer = Harmonizer.from_checkpoint(run_dir)
        report["affine_invariance"] = affine_check(harmonizer, manifest)
        image_matrix = cross_contrast_matrix(harmonizer, manifest, "image")
        report["matrix"] = matrix_checks(image_matrix, cross_contrast_matrix(harmonizer, manifest, "text"),
                                         identity_baseline(manifest))
        report["beta_consistency"] = beta_consistency(harmonizer, manifest)
        report["self_reconstruction"] = self_reconstruction(harmonizer, manifest, matrix=image_matrix)
        if not args.skip_ablation:
            config = load_config(args.config)
            config.train.seed = args.seed
            rows = run_ablation(manifest, config, load_encoders(clip), work / "ablation")
            report["ablation"] = ablation_checks(rows)
    else:
        logger.warning("Prompt retrieval %.3f is below the %.2f gate; skipping training checks",
                       retrieval["top1"], RETRIEVAL_GATE)

    report["minutes"] = (time.time() - time_start) / 60.0
    with open(work / "acceptance.json", "w") as f:
        json.dump(report, f, indent=2)
    print("Wrote {}".format(work / "acceptance.json"))


if __name__ == "__main__":
    main()
