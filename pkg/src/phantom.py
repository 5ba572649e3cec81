"""Synthetic tissue phantoms rendered under parameterized MR acquisitions.

A phantom is a set of proton-density / T1 / T2 maps. Rendering the same
phantom under several acquisitions gives exactly paired cross-contrast slices,
which is what the harmonization model trains and is scored on.
"""
import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from src.config import ACQUISITION_RANGES, num_workers, ranges_table
from src.errors import ArgumentError, DatasetError
from src.metadata import AcquisitionParams, build_prompt, determine_plane, tokenize_prompt

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

PD_RANGE = (0.0, 1.0)
T1_RANGE = (0.2, 5.0)
T2_RANGE = (0.01, 3.0)

# (PD, T1 [s], T2 [s]) per tissue class
TISSUES = {
    "csf": (1.0, 4.0, 2.0),
    "gm": (0.8, 1.3, 0.11),
    "wm": (0.7, 0.8, 0.08),
}
TISSUE_ORDER = ("csf", "gm", "wm")
BACKGROUND_T1 = 1.0
BACKGROUND_T2 = 0.1

SCANNERS = (
    ("GE", "Signa_HDxt", 1.5),
    ("GE", "SIGNA_HDx", 1.5),
    ("Siemens", "Aera", 1.5),
    ("Siemens", "Avanto", 1.5),
    ("Philips", "Ingenia", 3.0),
)
VARIANTS = {"GE": "SK", "Siemens": "SK_SP_OSP", "Philips": None}
PLANE_WORDS = {
    "GE": {"axial": "Ax", "coronal": "Cor", "sagittal": "Sag"},
    "Siemens": {"axial": "tra", "coronal": "cor", "sagittal": "sag"},
    "Philips": {"axial": "TRA", "coronal": "COR", "sagittal": "SAG"},
}
DESCRIPTIONS = {
    "T1w": {"GE": "{p} T1", "Siemens": "t1_se_{p}", "Philips": "T1W_SE_{p}"},
    "T2w": {"GE": "{p} T2", "Siemens": "t2_tse_{p}_384_p2", "Philips": "T2W_TSE_{p}"},
    "PDw": {"GE": "{p} PD", "Siemens": "pd_tse_{p}", "Philips": "PDW_TSE_{p}"},
    "FLAIR": {"GE": "{p} T2 FLAIR", "Siemens": "t2_tirm_{p}_dark-fluid", "Philips": "FLAIR_longTR_{p}"},
}
# voxel spacings (mm) drawn per anatomy; isotropic dominates
SPACINGS = ((1.0, 1.0, 1.0), (1.0, 1.0, 1.0), (1.0, 1.0, 1.0),
            (0.5, 0.5, 5.0), (0.9, 0.9, 3.0), (5.0, 0.5, 0.5), (0.5, 4.0, 0.5))


class ContrastClass(Enum):
    T1W = "T1w"
    T2W = "T2w"
    PDW = "PDw"
    FLAIR = "FLAIR"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise ArgumentError("unknown contrast class {!r}".format(value))


CONTRASTS = tuple(c.value for c in ContrastClass)


@dataclass
class TissuePhantom:
    """Proton density and relaxation maps of one synthetic anatomy.

    Attributes:
        pd_map (ndarray): Proton density in [0, 1], zero outside the brain
        t1_map (ndarray): T1 in seconds
        t2_map (ndarray): T2 in seconds
        anatomy_id (str): Identifier shared by every render of this phantom
    """
    pd_map: np.ndarray
    t1_map: np.ndarray
    t2_map: np.ndarray
    anatomy_id: str

    def __post_init__(self):
        if not (self.pd_map.shape == self.t1_map.shape == self.t2_map.shape):
            raise ArgumentError("phantom maps must share one shape")

    @property
    def shape(self):
        return self.pd_map.shape

    @property
    def brain_mask(self):
        return self.pd_map > 0


@dataclass
class Sample:
    """One rendered slice with its acquisition and anatomy."""
    image: np.ndarray
    acq: AcquisitionParams
    anatomy_id: str
    contrast: str


def _soft_ellipse(xx, yy, center, radii, angle, softness):
    """Weight in [0, 1] that is ~1 inside the ellipse and falls off smoothly at its rim."""
    dx, dy = xx - center[0], yy - center[1]
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    u = (dx * cos_a + dy * sin_a) / radii[0]
    v = (-dx * sin_a + dy * cos_a) / radii[1]
    r = np.sqrt(u ** 2 + v ** 2)
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) / softness, -60.0, 60.0))), r


def synth_tissue_maps(seed, shape, n_structures, anatomy_id=None):
    """Generate a skull-free brain phantom from overlapping smooth ellipses.

    The brain region is white-matter-like with a grey-matter rim; each of the
    ``n_structures`` ellipses inside it gets a CSF-, GM- or WM-like parameter
    triple with small jitter (the first three cycle through all classes).

    Args:
        seed (int): Seed for every random draw
        shape (tuple): (H, W), both >= 16
        n_structures (int): Number of inner structures, >= 1
        anatomy_id (str): Identifier, defaults to ``phantom_<seed>``

    Return:
        TissuePhantom
    """
    if len(shape) != 2 or min(shape) < 16:
        raise ArgumentError("phantom shape must be (H, W) with H, W >= 16, got {}".format(shape))
    if n_structures < 1:
        raise ArgumentError("n_structures must be >= 1, got {}".format(n_structures))
    rng = np.random.default_rng(seed)
    height, width = int(shape[0]), int(shape[1])
    yy, xx = np.meshgrid(np.linspace(-1.0, 1.0, height), np.linspace(-1.0, 1.0, width), indexing="ij")

    brain_center = rng.uniform(-0.05, 0.05, size=2)
    brain_radii = (rng.uniform(0.70, 0.85), rng.uniform(0.80, 0.92))
    brain_angle = rng.uniform(-0.2, 0.2)
    _, brain_r = _soft_ellipse(xx, yy, brain_center, brain_radii, brain_angle, 0.05)
    mask = brain_r <= 1.0

    pd, t1, t2 = (np.full(shape, v, dtype=np.float64) for v in TISSUES["wm"])
    rim = 1.0 / (1.0 + np.exp(np.clip(-(brain_r - 0.85) / 0.03, -60.0, 60.0)))
    for arr, value in zip((pd, t1, t2), TISSUES["gm"]):
        arr += rim * (value - arr)

    for i in range(n_structures):
        tissue = TISSUE_ORDER[i] if i < len(TISSUE_ORDER) else TISSUE_ORDER[rng.integers(len(TISSUE_ORDER))]
        offset = rng.uniform(-0.5, 0.5, size=2) * np.asarray(brain_radii)
        radii = rng.uniform(0.08, 0.3, size=2)
        angle = rng.uniform(0.0, np.pi)
        weight, _ = _soft_ellipse(xx, yy, brain_center + offset, radii, angle, 0.08)
        jitter = 1.0 + rng.normal(0.0, 0.05, size=3)
        for arr, value, j in zip((pd, t1, t2), TISSUES[tissue], jitter):
            arr += weight * (value * j - arr)

    pd = np.where(mask, np.clip(pd, *PD_RANGE), 0.0)
    t1 = np.clip(np.where(mask, t1, BACKGROUND_T1), *T1_RANGE)
    t2 = np.clip(np.where(mask, t2, BACKGROUND_T2), *T2_RANGE)
    return TissuePhantom(pd, t1, t2, anatomy_id or "phantom_{}".format(seed))


def signal_intensity(pd, t1, t2, acq):
    """Unnormalized spin-echo or inversion-recovery signal.

    Spin echo: PD (1 - e^(-TR/T1)) e^(-TE/T2).
    Inversion recovery: PD |1 - 2 e^(-TI/T1) + e^(-TR/T1)| e^(-TE/T2).
    The flip angle is not part of either model.
    """
    if acq.te_s < 0 or acq.tr_s <= 0:
        raise ArgumentError("render needs te_s >= 0 and tr_s > 0")
    if acq.is_inversion_recovery and acq.ti_s is None:
        raise ArgumentError("inversion-recovery acquisition without an inversion time")
    pd, t1, t2 = (np.asarray(a, dtype=np.float64) for a in (pd, t1, t2))
    recovery = np.exp(-acq.tr_s / t1)
    decay = np.exp(-acq.te_s / t2)
    if acq.ti_s is not None:
        return pd * np.abs(1.0 - 2.0 * np.exp(-acq.ti_s / t1) + recovery) * decay
    return pd * (1.0 - recovery) * decay


def render_slice(phantom, acq, noise_sigma=0.0, noise_seed=0):
    """Render a phantom under an acquisition, max-normalized to [0, 1].

    Args:
        phantom (TissuePhantom):
        acq (AcquisitionParams):
        noise_sigma (float): Std of additive Gaussian noise applied after normalization
        noise_seed (int): Seed for the noise draw

    Return:
        ndarray of float64 in [0, 1]
    """
    signal = signal_intensity(phantom.pd_map, phantom.t1_map, phantom.t2_map, acq)
    peak = signal.max()
    image = signal / peak if peak > 0 else signal
    if noise_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        image = image + rng.normal(0.0, noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def sample_acquisition(seed, contrast, plane="axial"):
    """Draw acquisition parameters for a contrast class.

    The scanner is drawn first, so one seed gives the same scanner for every
    contrast; echo/repetition/inversion times come from ACQUISITION_RANGES.
    """
    contrast = ContrastClass.parse(contrast).value
    ranges = ACQUISITION_RANGES[contrast]
    rng = np.random.default_rng(seed)
    manufacturer, model, field_t = SCANNERS[rng.integers(len(SCANNERS))]
    te = round(float(rng.uniform(*ranges["te_s"])), 3)
    tr = round(float(rng.uniform(*ranges["tr_s"])), 1)
    ti = None
    if ranges["ti_s"] is not None:
        ti = round(float(rng.uniform(*ranges["ti_s"])), 1)
    flip_lo, flip_hi = ranges["flip_deg"]
    flip = flip_hi if manufacturer == "Siemens" else flip_lo
    description = DESCRIPTIONS[contrast][manufacturer].format(p=PLANE_WORDS[manufacturer][plane])
    return AcquisitionParams(
        te_s=te, tr_s=tr, ti_s=ti, flip_deg=float(flip),
        manufacturer=manufacturer, model=model, field_T=field_t,
        sequence="SE_IR" if ti is not None else "SE",
        variant=VARIANTS[manufacturer], description=description, plane=plane,
    )


def write_image(path, image):
    """Write a [0, 1] image as a 16-bit grayscale PNG (value = round(65535 * intensity))."""
    data = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 65535.0).astype(np.uint16)
    try:
        Image.fromarray(data).save(path, format="PNG")
    except OSError as e:
        raise DatasetError("could not write image: {}".format(e), path)


def read_image(path):
    """Read an 8- or 16-bit grayscale PNG into a float64 array in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("I;16", "I;16B", "I", "L"):
                img = img.convert("L")
            data = np.array(img)
    except FileNotFoundError:
        raise DatasetError("image not found", path)
    except OSError as e:
        raise DatasetError("could not read image: {}".format(e), path)
    scale = 255.0 if data.dtype == np.uint8 else 65535.0
    return data.astype(np.float64) / scale


def derive_seeds(base_seed, index):
    """Independent (phantom, acquisition, noise) seeds for one anatomy."""
    state = np.random.SeedSequence([int(base_seed), int(index)]).generate_state(3)
    return {"phantom": int(state[0]), "acquisition": int(state[1]), "noise": int(state[2])}


def _render_anatomy(job):
    """Render every requested contrast of one anatomy and write images + sidecars."""
    index, anatomy_id, seeds, config, out_dir = job
    phantom = synth_tissue_maps(seeds["phantom"], tuple(config.shape), config.n_structures, anatomy_id)
    plane = determine_plane(SPACINGS[seeds["acquisition"] % len(SPACINGS)])
    anatomy_dir = Path(out_dir) / anatomy_id
    try:
        anatomy_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError("could not create anatomy directory: {}".format(e), anatomy_dir)
    records = []
    for k, contrast in enumerate(config.contrasts):
        acq = sample_acquisition(seeds["acquisition"], contrast, plane)
        image = render_slice(phantom, acq, config.noise_sigma, seeds["noise"] + k)
        write_image(anatomy_dir / "{}.png".format(contrast), image)
        acq.to_json(anatomy_dir / "{}.json".format(contrast))
        records.append({
            "anatomy_id": anatomy_id,
            "contrast": contrast,
            "image": "{}/{}.png".format(anatomy_id, contrast),
            "metadata": "{}/{}.json".format(anatomy_id, contrast),
        })
    logger.debug("Rendered %s (%d contrasts, plane %s)", anatomy_id, len(records), plane)
    return records


def split_anatomies(anatomy_ids, fractions, seed):
    """Disjoint train/val/test split over anatomy ids."""
    order = np.random.default_rng(seed).permutation(len(anatomy_ids))
    shuffled = [anatomy_ids[i] for i in order]
    n = len(shuffled)
    n_test = int(round(n * fractions[2]))
    n_val = int(round(n * fractions[1]))
    n_train = max(n - n_val - n_test, 1 if n else 0)
    n_val = min(n_val, n - n_train)
    n_test = n - n_train - n_val
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:n_train + n_val + n_test]),
    }


def build_dataset(config, out_dir, workers=None):
    """Render the paired phantom dataset and write its manifest.

    Layout: ``<out_dir>/<anatomy_id>/<contrast>.png`` + ``<contrast>.json`` sidecars
    and ``<out_dir>/manifest.json`` with the split by anatomy id.

    Args:
        config (PhantomConfig): Dataset settings
        out_dir (str or Path): Output directory, created if missing
        workers (int): Process count; defaults to DISTH_NUM_WORKERS (0 = in-process)

    Return:
        Manifest
    """
    config.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError("could not create dataset directory: {}".format(e), out_dir)
    workers = num_workers(0) if workers is None else workers

    time_start = time.time()
    anatomy_ids = ["anat_{:04d}".format(i) for i in range(config.n_anatomies)]
    seeds = {aid: derive_seeds(config.seed, i) for i, aid in enumerate(anatomy_ids)}
    jobs = [(i, aid, seeds[aid], config, str(out_dir)) for i, aid in enumerate(anatomy_ids)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(_render_anatomy, jobs))
    else:
        rendered = [_render_anatomy(job) for job in jobs]

    splits = split_anatomies(anatomy_ids, config.split, config.seed)
    split_of = {aid: name for name, ids in splits.items() for aid in ids}
    samples = []
    for records in rendered:
        for record in records:
            record["split"] = split_of[record["anatomy_id"]]
            samples.append(record)

    payload = {
        "version": MANIFEST_VERSION,
        "config": dataclasses.asdict(config),
        "acquisition_ranges": ranges_table(),
        "seeds": seeds,
        "splits": splits,
        "samples": samples,
    }
    path = out_dir / MANIFEST_NAME
    try:
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)
    except OSError as e:
        raise DatasetError("could not write manifest: {}".format(e), path)
    logger.info("Rendered %d samples for %d anatomies into %s", len(samples), len(anatomy_ids), out_dir)
    logger.info("Execution time for dataset build: %.4f", time.time() - time_start)
    return Manifest.from_payload(out_dir, payload)


@dataclass
class Manifest:
    """In-memory view of ``manifest.json``.

    Attributes:
        root (Path): Dataset directory; record paths are relative to it
        samples (list): Records with anatomy_id, contrast, image, metadata, split
        splits (dict): Split name -> sorted anatomy ids
        config (dict): Echo of the PhantomConfig used to build the dataset
    """
    root: Path
    samples: List[dict]
    splits: Dict[str, List[str]]
    config: dict

    @classmethod
    def from_payload(cls, root, payload):
        return cls(Path(root), payload["samples"], payload["splits"], payload.get("config", {}))

    @classmethod
    def load(cls, root):
        root = Path(root)
        path = root / MANIFEST_NAME
        try:
            with open(path) as f:
                payload = json.load(f)
        except FileNotFoundError:
            raise DatasetError("manifest not found", path)
        except json.JSONDecodeError as e:
            raise DatasetError("manifest is not valid JSON: {}".format(e), path)
        if payload.get("version") != MANIFEST_VERSION:
            raise DatasetError("unsupported manifest version {!r}".format(payload.get("version")), path)
        return cls.from_payload(root, payload)

    @property
    def contrasts(self):
        present = {s["contrast"] for s in self.samples}
        return [c for c in CONTRASTS if c in present]

    def records(self, split=None):
        if split is None:
            return list(self.samples)
        if split not in self.splits:
            raise ArgumentError("unknown split {!r}".format(split))
        return [s for s in self.samples if s["split"] == split]

    def by_anatomy(self, split=None):
        grouped = {}
        for record in self.records(split):
            grouped.setdefault(record["anatomy_id"], []).append(record)
        return grouped

    def pairs(self, split):
        """Ordered (source, target) records of one anatomy with different contrasts."""
        pairs = []
        for anatomy_id, records in sorted(self.by_anatomy(split).items()):
            for src in records:
                for tgt in records:
                    if src["contrast"] != tgt["contrast"]:
                        pairs.append((src, tgt))
        return pairs

    def load_acquisition(self, record):
        return AcquisitionParams.from_json(self.root / record["metadata"])

    def load_sample(self, record):
        return Sample(
            image=read_image(self.root / record["image"]),
            acq=self.load_acquisition(record),
            anatomy_id=record["anatomy_id"],
            contrast=record["contrast"],
        )

    def prompts(self, split=None):
        return [build_prompt(self.load_acquisition(r)) for r in self.records(split)]


def _image_tensor(image):
    return torch.from_numpy(np.asarray(image, dtype=np.float32)).unsqueeze(0)


class SampleCache(object):
    """Loads each record's image and prompt tokens once."""

    def __init__(self, manifest, vocab, max_len):
        self.manifest = manifest
        self.vocab = vocab
        self.max_len = max_len
        self._cache = {}

    def get(self, record):
        key = record["image"]
        if key not in self._cache:
            sample = self.manifest.load_sample(record)
            tokens = tokenize_prompt(build_prompt(sample.acq), self.vocab, self.max_len)
            self._cache[key] = (_image_tensor(sample.image), torch.tensor(tokens, dtype=torch.long))
        return self._cache[key]


class PairedSliceDataset(Dataset):
    """Ordered same-anatomy cross-contrast pairs of one split."""

    def __init__(self, manifest, split, vocab, max_len=96):
        self.pairs = manifest.pairs(split)
        self.cache = SampleCache(manifest, vocab, max_len)
        for src, _ in self.pairs:
            self.cache.get(src)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, index):
        src, tgt = self.pairs[index]
        src_image, src_tokens = self.cache.get(src)
        tgt_image, tgt_tokens = self.cache.get(tgt)
        return {
            "src": src_image, "tgt": tgt_image,
            "src_tokens": src_tokens, "tgt_tokens": tgt_tokens,
            "src_anatomy": src["anatomy_id"], "tgt_anatomy": tgt["anatomy_id"],
            "src_contrast": src["contrast"], "tgt_contrast": tgt["contrast"],
        }


class ImagePromptDataset(Dataset):
    """(image, prompt tokens, contrast index) triples for encoder pretraining."""

    def __init__(self, manifest, split, vocab, max_len=96):
        self.records = manifest.records(split)
        self.cache = SampleCache(manifest, vocab, max_len)
        for record in self.records:
            self.cache.get(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, index):
        record = self.records[index]
        image, tokens = self.cache.get(record)
        return image, tokens, CONTRASTS.index(record["contrast"])
