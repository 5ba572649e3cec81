"""Dataclass configuration for data generation, models, pretraining and training.

Configs are plain dataclasses so they can be echoed to JSON next to every
artifact. ``load_config`` reads one JSON file holding any subset of the
sections ``phantom``, ``model``, ``clip`` and ``train``; missing sections take
their defaults and unknown keys are rejected.
"""
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from src.errors import ConfigError

logger = logging.getLogger(__name__)

NUM_WORKERS_ENV = "DISTH_NUM_WORKERS"

# Per-contrast acquisition ranges in seconds (flip angle in degrees). Chosen so
# the four classes are visually distinct under the spin-echo / IR renderer:
# every T1w echo time sits below every T2w echo time, FLAIR nulls CSF.
ACQUISITION_RANGES = {
    "T1w": {"te_s": (0.008, 0.020), "tr_s": (0.4, 0.7), "ti_s": None, "flip_deg": (90, 90)},
    "T2w": {"te_s": (0.080, 0.120), "tr_s": (3.0, 6.0), "ti_s": None, "flip_deg": (90, 150)},
    "PDw": {"te_s": (0.010, 0.030), "tr_s": (2.5, 6.0), "ti_s": None, "flip_deg": (90, 150)},
    "FLAIR": {"te_s": (0.080, 0.140), "tr_s": (8.0, 11.0), "ti_s": (2.0, 2.6), "flip_deg": (90, 90)},
}


@dataclass
class PhantomConfig:
    """Synthetic dataset settings.

    Attributes:
        n_anatomies (int): Number of distinct phantoms (one per anatomy id)
        contrasts (list): Contrast classes rendered for every anatomy
        shape (tuple): Slice shape (H, W)
        n_structures (int): Ellipses painted inside each brain region
        seed (int): Base seed every per-anatomy seed is derived from
        noise_sigma (float): Std of the additive Gaussian noise after normalization
        split (tuple): Train/val/test fractions over anatomy ids
    """
    n_anatomies: int = 10
    contrasts: List[str] = field(default_factory=lambda: ["T1w", "T2w", "PDw", "FLAIR"])
    shape: Tuple[int, int] = (64, 64)
    n_structures: int = 6
    seed: int = 0
    noise_sigma: float = 0.01
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    def validate(self):
        if self.n_anatomies < 1:
            raise ConfigError("n_anatomies must be positive, got {}".format(self.n_anatomies))
        if not self.contrasts:
            raise ConfigError("at least one contrast is required")
        unknown = [c for c in self.contrasts if c not in ACQUISITION_RANGES]
        if unknown:
            raise ConfigError("unknown contrast classes: {}".format(unknown))
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-6:
            raise ConfigError("split must be three non-negative fractions summing to 1, got {}".format(self.split))
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass
class ModelConfig:
    """Anatomy Mapper / Style Fusion Decoder architecture.

    The decoder base width is always twice ``mapper_base``.
    """
    image_size: int = 64
    mapper_base: int = 32
    depth: int = 3
    beta_channels: int = 16
    embed_dim: int = 512
    bottleneck_heads: int = 8
    upsample_heads: int = 4
    attn_dim: int = 128
    spatial_map_size: int = 8
    ast_variant: str = "ast"
    use_anatomy_mapper: bool = True
    # normalization for mapper layers after the first one: "none" or "instance"
    mapper_norm: str = "none"
    first_norm_eps: float = 1e-8
    disc_base: int = 32
    disc_layers: int = 3

    @property
    def decoder_base(self):
        return 2 * self.mapper_base

    def validate(self):
        if self.ast_variant not in ("ast", "adain"):
            raise ConfigError("ast_variant must be 'ast' or 'adain', got {!r}".format(self.ast_variant))
        if self.mapper_norm not in ("none", "instance"):
            raise ConfigError("mapper_norm must be 'none' or 'instance', got {!r}".format(self.mapper_norm))
        if self.image_size % (2 ** self.depth):
            raise ConfigError("image_size {} is not divisible by 2**depth".format(self.image_size))
        if self.attn_dim % self.bottleneck_heads or self.attn_dim % self.upsample_heads:
            raise ConfigError("attention heads must divide attn_dim={}".format(self.attn_dim))


@dataclass
class ClipConfig:
    """Contrastive pretraining of the image/metadata encoder pair."""
    image_size: int = 64
    embed_dim: int = 512
    token_dim: int = 128
    text_layers: int = 2
    text_heads: int = 4
    max_len: int = 96
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    init_temperature: float = 0.07
    seed: int = 0

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("contrastive pretraining needs batch_size >= 2")
        if self.init_temperature <= 0:
            raise ConfigError("init_temperature must be > 0")


@dataclass
class LossWeights:
    """The lambda coefficients of the weighted total loss."""
    beta: float = 0.1
    rec: float = 10.0
    perc: float = 1.0
    adv: float = 1.0
    global_clip: float = 1.0
    direction: float = 1.0

    def as_dict(self):
        """Weights keyed by loss component name."""
        return {"beta": self.beta, "rec": self.rec, "perc": self.perc, "adv": self.adv,
                "global": self.global_clip, "dir": self.direction}

    def validate(self):
        negative = {k: v for k, v in self.as_dict().items() if v < 0}
        if negative:
            raise ConfigError("loss weights must be >= 0: {}".format(negative))


@dataclass
class PatchConfig:
    """Patch sampling for the anatomy contrastive loss."""
    patch_size: int = 1
    stride: int = 2
    tau: float = 0.07
    symmetric: bool = False

    def validate(self):
        if self.tau <= 0:
            raise ConfigError("tau must be > 0, got {}".format(self.tau))
        if self.patch_size < 1 or self.stride < 1:
            raise ConfigError("patch_size and stride must be >= 1")


@dataclass
class TrainConfig:
    """Harmonization training settings (desk-scale defaults).

    Attributes:
        lr (float): Adam learning rate for generator and discriminator
        batch_size (int): Pairs per step
        epochs (int): Passes over all ordered cross-contrast train pairs
        p_image (float): Probability of conditioning on the image embedding
        per_sample_conditioning (bool): Draw the conditioning per sample instead of per batch
        max_steps (int): Optional hard cap on optimizer steps
        checkpoint_every (int): Steps between periodic checkpoints
        log_every (int): Steps between INFO log lines
        perc_taps (tuple): Perceptual network tap depths
        num_workers (int): Data loading workers, overridden by DISTH_NUM_WORKERS
    """
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 15
    p_image: float = 0.5
    per_sample_conditioning: bool = False
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    patch: PatchConfig = field(default_factory=PatchConfig)
    max_steps: Optional[int] = None
    checkpoint_every: int = 500
    log_every: int = 50
    perc_taps: Tuple[int, ...] = (2, 4)
    num_workers: int = 0

    def validate(self):
        if not 0.0 <= self.p_image <= 1.0:
            raise ConfigError("p_image must lie in [0, 1], got {}".format(self.p_image))
        if self.lr <= 0:
            raise ConfigError("lr must be > 0, got {}".format(self.lr))
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        self.weights.validate()
        self.patch.validate()


@dataclass
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    clip: ClipConfig = field(default_factory=ClipConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.phantom.validate()
        self.model.validate()
        self.clip.validate()
        self.train.validate()
        if self.clip.embed_dim != self.model.embed_dim:
            raise ConfigError("clip.embed_dim and model.embed_dim must match")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


_NESTED = {
    ExperimentConfig: {"phantom": PhantomConfig, "model": ModelConfig, "clip": ClipConfig, "train": TrainConfig},
    TrainConfig: {"weights": LossWeights, "patch": PatchConfig},
}


def from_dict(cls, data):
    """Build dataclass ``cls`` from a (possibly partial) dict, recursing into nested sections.

    Args:
        cls: The dataclass type to build
        data (dict): Field values; absent fields keep their defaults

    Return:
        An instance of ``cls``
    """
    if not isinstance(data, dict):
        raise ConfigError("section for {} must be a JSON object".format(cls.__name__))
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError("unknown keys for {}: {}".format(cls.__name__, unknown))
    kwargs = {}
    for key, value in data.items():
        nested = _NESTED.get(cls, {}).get(key)
        if nested is not None:
            kwargs[key] = from_dict(nested, value)
        elif isinstance(value, list) and key in ("shape", "split", "perc_taps"):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path=None):
    """Load and validate an ExperimentConfig from a JSON file (defaults when path is None)."""
    if path is None:
        config = ExperimentConfig()
    else:
        path = Path(path)
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError("config file not found: {}".format(path))
        except json.JSONDecodeError as e:
            raise ConfigError("config file {} is not valid JSON: {}".format(path, e))
        config = from_dict(ExperimentConfig, data)
    config.train.num_workers = num_workers(config.train.num_workers)
    return config.validate()


def save_config(config, out_dir, name="config.json"):
    """Echo a config dataclass as JSON into ``out_dir`` for provenance."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with open(path, "w") as f:
        json.dump(dataclasses.asdict(config), f, indent=2)
    return path


def num_workers(default=0):
    """Worker count for data loading, taken from DISTH_NUM_WORKERS when set."""
    raw = os.environ.get(NUM_WORKERS_ENV)
    if raw is None or raw == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError("{} must be an integer, got {!r}".format(NUM_WORKERS_ENV, raw))
    if value < 0:
        raise ConfigError("{} must be >= 0".format(NUM_WORKERS_ENV))
    logger.debug("Using %d data loading workers from %s", value, NUM_WORKERS_ENV)
    return value


def experiment_from_dict(data):
    return from_dict(ExperimentConfig, data).validate()


def replace_section(config, section, **changes):
    """Copy of ``config`` with fields of one section replaced (used by the ablation harness)."""
    updated = dataclasses.replace(getattr(config, section), **changes)
    return dataclasses.replace(config, **{section: updated})


def ranges_table() -> Dict[str, dict]:
    """JSON-friendly copy of ACQUISITION_RANGES."""
    return {c: {k: (list(v) if v is not None else None) for k, v in r.items()}
            for c, r in ACQUISITION_RANGES.items()}
