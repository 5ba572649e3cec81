"""Image-quality metrics, source x target contrast matrices and the ablation harness.

Matrix cells are slice-level means over every ordered test pair of the cell.
"""
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from src.anatomy_mapper import extract_beta
from src.config import replace_section
from src.errors import ArgumentError, HarmonizationError
from src.losses import patch_vectors
from src.metadata import build_prompt
from src.phantom import CONTRASTS
from src.trainer import Harmonizer, Trainer

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
GUIDANCE_MODES = ("image", "text")
ABSENT = "-"

ADAIN_LABEL = "AdaIN instead of AST blocks"
NO_MAPPER_LABEL = r"No $\beta$ disentanglement (no Anatomy Mapper)"
METADATA_ONLY_LABEL = "Trained with only metadata guidance"
IMAGE_ONLY_LABEL = "Trained with only image guidance"
FULL_MODEL_LABEL = "Full model"

# (row label, config section changes)
ABLATION_VARIANTS = (
    (ADAIN_LABEL, {"model": {"ast_variant": "adain"}}),
    (NO_MAPPER_LABEL, {"model": {"use_anatomy_mapper": False}}),
    (METADATA_ONLY_LABEL, {"train": {"p_image": 0.0}}),
    (IMAGE_ONLY_LABEL, {"train": {"p_image": 1.0}}),
    (FULL_MODEL_LABEL, {}),
)
ABLATION_COLUMNS = ("variant", "psnr_image", "psnr_text", "ssim_image", "ssim_text", "status")


def _as_array(image):
    if torch.is_tensor(image):
        image = image.detach().cpu().numpy()
    return np.asarray(image, dtype=np.float64)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; identical images give 100 dB."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ArgumentError("psnr needs equal shapes, got {} and {}".format(a.shape, b.shape))
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a, b, window=SSIM_WINDOW):
    """Mean SSIM over all valid ``window`` x ``window`` uniform windows (dynamic range 1)."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ArgumentError("ssim needs equal shapes, got {} and {}".format(a.shape, b.shape))
    if a.ndim != 2:
        raise ArgumentError("ssim expects 2D images, got shape {}".format(a.shape))
    if min(a.shape) < window:
        raise ArgumentError("image {} is smaller than the {}x{} SSIM window".format(a.shape, window, window))
    x = torch.from_numpy(a)[None, None]
    y = torch.from_numpy(b)[None, None]

    def local_mean(t):
        return F.avg_pool2d(t, window, stride=1)

    mu_x, mu_y = local_mean(x), local_mean(y)
    var_x = local_mean(x * x) - mu_x ** 2
    var_y = local_mean(y * y) - mu_y ** 2
    cov = local_mean(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2))
    return float(ssim_map.mean())


@dataclass
class MetricsMatrix:
    """Per-cell PSNR/SSIM samples of a source x target contrast evaluation.

    Attributes:
        contrasts (list): Row/column order
        cells (dict): (source, target) -> {"psnr": [...], "ssim": [...]}
    """
    contrasts: List[str]
    cells: Dict[Tuple[str, str], Dict[str, List[float]]] = field(default_factory=dict)

    def add(self, source, target, psnr_db, ssim_score):
        cell = self.cells.setdefault((source, target), {"psnr": [], "ssim": []})
        cell["psnr"].append(float(psnr_db))
        cell["ssim"].append(float(ssim_score))

    def count(self, source, target):
        return len(self.cells.get((source, target), {"psnr": []})["psnr"])

    def mean(self, source, target, metric):
        """Cell mean, or NaN for a cell with no pairs."""
        values = self.cells.get((source, target), {}).get(metric)
        return float(np.mean(values)) if values else float("nan")

    def matrix(self, metric):
        return np.array([[self.mean(s, t, metric) for t in self.contrasts] for s in self.contrasts])

    @property
    def psnr(self):
        return self.matrix("psnr")

    @property
    def ssim(self):
        return self.matrix("ssim")

    @property
    def counts(self):
        return np.array([[self.count(s, t) for t in self.contrasts] for s in self.contrasts], dtype=int)

    def populated(self):
        return [(s, t) for s in self.contrasts for t in self.contrasts if self.count(s, t)]

    def overall(self, metric):
        """Mean over all evaluated pairs."""
        values = [v for cell in self.cells.values() for v in cell[metric]]
        return float(np.mean(values)) if values else float("nan")

    def cell_rows(self):
        for s, t in self.populated():
            yield {"source": s, "target": t, "count": self.count(s, t),
                   "psnr": self.mean(s, t, "psnr"), "ssim": self.mean(s, t, "ssim")}

    def write_cells_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["source", "target", "count", "psnr", "ssim"])
            for row in self.cell_rows():
                writer.writerow([row["source"], row["target"], row["count"],
                                 "{:.4f}".format(row["psnr"]), "{:.4f}".format(row["ssim"])])
        return Path(path)

    def write_matrix_csv(self, path, metric):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["source\\target"] + list(self.contrasts))
            for s in self.contrasts:
                row = [s]
                for t in self.contrasts:
                    row.append("{:.4f}".format(self.mean(s, t, metric)) if self.count(s, t) else ABSENT)
                writer.writerow(row)
        return Path(path)


def _sample_cache(manifest):
    cache = {}

    def load(record):
        if record["image"] not in cache:
            cache[record["image"]] = manifest.load_sample(record)
        return cache[record["image"]]
    return load


def _test_pairs(manifest, split):
    pairs = manifest.pairs(split)
    if not pairs:
        raise ArgumentError("split {!r} has no cross-contrast pairs to evaluate".format(split))
    return pairs


def cross_contrast_matrix(harmonizer, manifest, guidance_mode="image", split="test", batch_size=32):
    """Harmonize every ordered test pair and score it against the ground-truth target.

    Args:
        harmonizer (Harmonizer or path): Trained model or its checkpoint
        manifest (Manifest): Dataset
        guidance_mode (str): "image" or "text"
        split (str): Split to evaluate
        batch_size (int): Pairs decoded per forward pass

    Return:
        MetricsMatrix
    """
    if guidance_mode not in GUIDANCE_MODES:
        raise ArgumentError("guidance mode must be one of {}, got {!r}".format(GUIDANCE_MODES, guidance_mode))
    if not isinstance(harmonizer, Harmonizer):
        harmonizer = Harmonizer.from_checkpoint(harmonizer)
    pairs = _test_pairs(manifest, split)
    load = _sample_cache(manifest)
    result = MetricsMatrix([c for c in CONTRASTS if c in manifest.contrasts])
    encoders = harmonizer.encoders
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        sources = [load(src) for src, _ in chunk]
        targets = [load(tgt) for _, tgt in chunk]
        src_images = torch.from_numpy(np.stack([s.image for s in sources]).astype(np.float32))
        with torch.no_grad():
            if guidance_mode == "image":
                theta = encoders.encode_image(np.stack([t.image for t in targets]).astype(np.float32))
            else:
                tokens = torch.stack([encoders.tokenize(build_prompt(t.acq)) for t in targets])
                theta = encoders.encode_metadata(tokens)
        outputs = harmonizer.decode(src_images, theta).numpy()
        for output, source, target in zip(outputs, sources, targets):
            result.add(source.contrast, target.contrast, psnr(output, target.image), ssim(output, target.image))
    logger.info("%s-guided matrix over %d pairs: mean PSNR %.2f dB, mean SSIM %.4f", guidance_mode,
                len(pairs), result.overall("psnr"), result.overall("ssim"))
    return result


def identity_baseline(manifest, split="test"):
    """Scores of the unharmonized source against the target for every ordered pair."""
    load = _sample_cache(manifest)
    result = MetricsMatrix([c for c in CONTRASTS if c in manifest.contrasts])
    for src, tgt in _test_pairs(manifest, split):
        source, target = load(src), load(tgt)
        result.add(source.contrast, target.contrast, psnr(source.image, target.image), ssim(source.image, target.image))
    return result


def patchwise_cosine(beta_a, beta_b, patch_size=1, stride=1):
    """Mean cosine similarity between co-located patches of two [C, H, W] anatomy maps."""
    a = torch.as_tensor(beta_a, dtype=torch.float64)
    b = torch.as_tensor(beta_b, dtype=torch.float64)
    if a.shape != b.shape or a.dim() != 3:
        raise ArgumentError("patchwise_cosine needs two [C, H, W] maps of one shape, got {} and {}".format(
            tuple(a.shape), tuple(b.shape)))
    za = patch_vectors(a, patch_size, stride)
    zb = patch_vectors(b, patch_size, stride)
    return float(F.cosine_similarity(za, zb, dim=-1, eps=1e-8).mean())


def _mapper_of(model):
    if isinstance(model, Harmonizer):
        if model.net.mapper is None:
            raise ArgumentError("model was trained without an anatomy mapper")
        return model.net.mapper
    return model


def beta_consistency(mapper, manifest, split="test"):
    """Anatomy-map agreement across contrasts of one phantom versus across phantoms of one contrast.

    Same-anatomy scores cover every contrast pair of each phantom; cross-anatomy
    scores compare neighbouring phantoms (by id) rendered in the same contrast.

    Args:
        mapper (AnatomyMapper or Harmonizer): Model whose anatomy maps are compared
        manifest (Manifest): Dataset
        split (str): Split to evaluate

    Return:
        dict with same_anatomy, different_anatomy (mean patchwise cosines), pair counts and passed
    """
    mapper = _mapper_of(mapper)
    load = _sample_cache(manifest)
    betas = {}

    def beta(record):
        if record["image"] not in betas:
            betas[record["image"]] = extract_beta(mapper, load(record).image)
        return betas[record["image"]]

    same, different, by_contrast = [], [], {}
    for anatomy_id, records in sorted(manifest.by_anatomy(split).items()):
        for i, a in enumerate(records):
            by_contrast.setdefault(a["contrast"], []).append(a)
            same.extend(patchwise_cosine(beta(a), beta(b)) for b in records[i + 1:])
    for contrast, records in sorted(by_contrast.items()):
        different.extend(patchwise_cosine(beta(a), beta(b)) for a, b in zip(records, records[1:]))
    if not same or not different:
        raise ArgumentError("split {!r} needs two contrasts of one anatomy and two anatomies of one contrast".format(
            split))
    result = {
        "same_anatomy": float(np.mean(same)),
        "different_anatomy": float(np.mean(different)),
        "same_pairs": len(same),
        "different_pairs": len(different),
    }
    result["passed"] = result["same_anatomy"] > result["different_anatomy"]
    logger.info("beta cosine: same anatomy %.4f (%d pairs), different anatomy %.4f (%d pairs)",
                result["same_anatomy"], len(same), result["different_anatomy"], len(different))
    return result


def self_reconstruction(harmonizer, manifest, split="test", matrix=None, batch_size=32):
    """PSNR of every slice harmonized toward itself under image guidance, against the best cross-contrast cell.

    Args:
        harmonizer (Harmonizer or path): Trained model or its checkpoint
        manifest (Manifest): Dataset
        split (str): Split to evaluate
        matrix (MetricsMatrix): Image-guided matrix of the same model; computed when omitted
        batch_size (int): Slices decoded per forward pass

    Return:
        dict with self_psnr, max_cross_psnr, n and passed
    """
    if not isinstance(harmonizer, Harmonizer):
        harmonizer = Harmonizer.from_checkpoint(harmonizer)
    records = manifest.records(split)
    if not records:
        raise ArgumentError("split {!r} has no slices".format(split))
    load = _sample_cache(manifest)
    scores = []
    for start in range(0, len(records), batch_size):
        samples = [load(r) for r in records[start:start + batch_size]]
        images = np.stack([s.image for s in samples]).astype(np.float32)
        with torch.no_grad():
            theta = harmonizer.encoders.encode_image(images)
        outputs = harmonizer.decode(torch.from_numpy(images), theta).numpy()
        scores.extend(psnr(output, sample.image) for output, sample in zip(outputs, samples))
    if matrix is None:
        matrix = cross_contrast_matrix(harmonizer, manifest, "image", split)
    result = {
        "self_psnr": float(np.mean(scores)),
        "max_cross_psnr": max(matrix.mean(s, t, "psnr") for s, t in matrix.populated()),
        "n": len(scores),
    }
    result["passed"] = result["self_psnr"] > result["max_cross_psnr"]
    return result


def compare_matrices(model, baseline):
    """Per populated cell, model minus baseline for both metrics."""
    return {
        "{}->{}".format(s, t): {
            "psnr": model.mean(s, t, "psnr") - baseline.mean(s, t, "psnr"),
            "ssim": model.mean(s, t, "ssim") - baseline.mean(s, t, "ssim"),
        }
        for s, t in model.populated()
    }


def write_matrix(matrix, out_dir, visualizer=None, title=""):
    """Write metrics.csv, matrix_psnr.csv, matrix_ssim.csv and, with a visualizer, heatmap PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": matrix.write_cells_csv(out_dir / "metrics.csv"),
        "psnr": matrix.write_matrix_csv(out_dir / "matrix_psnr.csv", "psnr"),
        "ssim": matrix.write_matrix_csv(out_dir / "matrix_ssim.csv", "ssim"),
    }
    if visualizer is not None:
        paths["psnr_png"] = visualizer.save_heatmap(matrix.psnr, matrix.contrasts, out_dir / "heatmap_psnr.png",
                                                    "{} PSNR (dB)".format(title).strip())
        paths["ssim_png"] = visualizer.save_heatmap(matrix.ssim, matrix.contrasts, out_dir / "heatmap_ssim.png",
                                                    "{} SSIM".format(title).strip(), fmt="{:.3f}")
    return paths


def variant_config(base_config, changes):
    config = base_config
    for section, values in changes.items():
        config = replace_section(config, section, **values)
    return config.validate()


def run_ablation(manifest, base_config, encoders, out_dir, variants=ABLATION_VARIANTS, split="test"):
    """Train and score every ablation variant with the same seed and step limit.

    A variant that fails is reported with NaN metrics and its error in ``status``.

    Return:
        list of row dicts with ABLATION_COLUMNS keys
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, (label, changes) in enumerate(variants, start=1):
        logger.info("Ablation variant %d/%d: %s", index, len(variants), label)
        row = {"variant": label, "psnr_image": float("nan"), "psnr_text": float("nan"),
               "ssim_image": float("nan"), "ssim_text": float("nan"), "status": "ok"}
        try:
            config = variant_config(base_config, changes)
            trainer = Trainer(config, encoders)
            trainer.fit(manifest, out_dir / "variant_{}".format(index))
            harmonizer = Harmonizer.from_trainer(trainer)
            for mode in GUIDANCE_MODES:
                matrix = cross_contrast_matrix(harmonizer, manifest, mode, split)
                row["psnr_" + mode] = matrix.overall("psnr")
                row["ssim_" + mode] = matrix.overall("ssim")
        except HarmonizationError as e:
            logger.error("Ablation variant %r failed: %s", label, e)
            row["status"] = "failed: {}".format(e)
        rows.append(row)
    write_ablation(rows, out_dir / "ablation.csv")
    return rows


def write_ablation(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("{:.4f}".format(v) if isinstance(v, float) else v) for k, v in row.items()})
    return Path(path)


def write_summary(payload, path):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
    return Path(path)
