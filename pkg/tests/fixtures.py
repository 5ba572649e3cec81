"""Tiny configurations and datasets shared by the unit tests."""
import json

import torch

from src.config import ClipConfig, ExperimentConfig, ModelConfig, PhantomConfig, TrainConfig
from src.metadata import Vocabulary
from src.phantom import build_dataset
from src.style_encoders import EncoderPair

TINY_SIZE = 16


def tiny_phantom(**changes):
    values = dict(n_anatomies=4, contrasts=["T1w", "T2w", "FLAIR"], shape=(TINY_SIZE, TINY_SIZE),
                  n_structures=3, split=(0.5, 0.25, 0.25))
    values.update(changes)
    return PhantomConfig(**values)


def tiny_model(**changes):
    values = dict(image_size=TINY_SIZE, mapper_base=4, depth=2, beta_channels=4, embed_dim=32,
                  bottleneck_heads=8, upsample_heads=4, attn_dim=16, spatial_map_size=4,
                  disc_base=4, disc_layers=2)
    values.update(changes)
    return ModelConfig(**values)


def tiny_clip(**changes):
    values = dict(image_size=TINY_SIZE, embed_dim=32, token_dim=16, text_layers=1, text_heads=2,
                  epochs=1, batch_size=4)
    values.update(changes)
    return ClipConfig(**values)


def tiny_config(**train_changes):
    values = dict(batch_size=4, epochs=1, checkpoint_every=2, log_every=1)
    values.update(train_changes)
    config = ExperimentConfig(phantom=tiny_phantom(), model=tiny_model(), clip=tiny_clip(),
                              train=TrainConfig(**values))
    return config.validate()


def tiny_config_dict():
    """The tiny experiment as a JSON-ready dict (for CLI tests)."""
    return {
        "phantom": {"n_anatomies": 4, "contrasts": ["T1w", "T2w", "FLAIR"], "shape": [TINY_SIZE, TINY_SIZE],
                    "n_structures": 3, "split": [0.5, 0.25, 0.25]},
        "model": {"image_size": TINY_SIZE, "mapper_base": 4, "depth": 2, "beta_channels": 4, "embed_dim": 32,
                  "attn_dim": 16, "spatial_map_size": 4, "disc_base": 4, "disc_layers": 2},
        "clip": {"image_size": TINY_SIZE, "embed_dim": 32, "token_dim": 16, "text_layers": 1, "text_heads": 2,
                 "epochs": 1, "batch_size": 4},
        "train": {"batch_size": 4, "epochs": 1, "max_steps": 2, "checkpoint_every": 2, "log_every": 1},
    }


def write_config(path, data=None):
    with open(path, "w") as f:
        json.dump(data or tiny_config_dict(), f)
    return path


def tiny_dataset(out_dir, config=None):
    return build_dataset(config or tiny_phantom(), out_dir, workers=0)


def tiny_encoders(manifest, clip_config=None, seed=0):
    """Untrained but deterministic encoder pair with a vocabulary over every prompt of the dataset."""
    torch.manual_seed(seed)
    return EncoderPair(Vocabulary.build(manifest.prompts()), clip_config or tiny_clip()).eval()
