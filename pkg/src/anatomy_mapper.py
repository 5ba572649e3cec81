"""Anatomy Mapper: a U-Net that maps a slice to a contrast-invariant anatomy map (beta)."""
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ArgumentError

logger = logging.getLogger(__name__)


def conv_block(in_ch, out_ch, norm="none", stride=1):
    layers = [nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)]
    if norm == "instance":
        layers.append(nn.InstanceNorm2d(out_ch, affine=True))
    layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


class AnatomyMapper(nn.Module):
    """U-Net whose first convolution is immediately instance-normalized.

    The first convolution uses replicate padding, so a positive affine map of
    the input intensities (a*I + b) shifts and scales its output uniformly and
    the instance norm cancels it exactly. Everything downstream sees only the
    normalized activation, which makes beta invariant to such maps.

    Attributes:
        image_size (int): Expected input height and width
        depth (int): Number of down/up levels
        out_channels (int): Channels of the anatomy map
    """

    def __init__(self, image_size=64, base=32, depth=3, out_channels=16, norm="none", first_norm_eps=1e-8):
        super().__init__()
        self.image_size = image_size
        self.depth = depth
        self.out_channels = out_channels
        self.first = nn.Conv2d(1, base, 3, padding=1, padding_mode="replicate")
        self.first_norm = nn.InstanceNorm2d(base, affine=True, eps=first_norm_eps)
        self.stem = conv_block(base, base, norm)
        widths = [base * 2 ** i for i in range(depth + 1)]
        self.down = nn.ModuleList([
            nn.Sequential(conv_block(widths[i], widths[i + 1], norm, stride=2),
                          conv_block(widths[i + 1], widths[i + 1], norm))
            for i in range(depth)
        ])
        self.up = nn.ModuleList([conv_block(widths[i + 1], widths[i], norm) for i in reversed(range(depth))])
        self.merge = nn.ModuleList([conv_block(2 * widths[i], widths[i], norm) for i in reversed(range(depth))])
        self.out = nn.Conv2d(base, out_channels, 1)

    def check_input(self, image):
        if image.dim() == 2:
            image = image[None, None]
        elif image.dim() == 3:
            image = image[:, None]
        if image.shape[1] != 1 or tuple(image.shape[-2:]) != (self.image_size, self.image_size):
            raise ArgumentError("anatomy mapper expects 1x{0}x{0} images, got {1}".format(
                self.image_size, tuple(image.shape)))
        return image

    def forward(self, image):
        x = self.check_input(image)
        h = F.leaky_relu(self.first_norm(self.first(x)), 0.2)
        h = self.stem(h)
        skips = [h]
        for block in self.down:
            h = block(h)
            skips.append(h)
        skips.pop()
        for up, merge in zip(self.up, self.merge):
            skip = skips.pop()
            h = up(F.interpolate(h, size=skip.shape[-2:], mode="nearest"))
            h = merge(torch.cat([h, skip], dim=1))
        return self.out(h)


def extract_beta(mapper, image):
    """Anatomy map of a single 2D image as a [C, H, W] tensor (no gradient)."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image.astype(np.float32))
    param = next(mapper.parameters())
    with torch.no_grad():
        return mapper(image.to(param.dtype))[0]


def export_beta(beta, out_dir, visualizer=None):
    """Write beta as ``beta.f32`` (little-endian float32), ``beta.json`` and a PNG grid.

    Args:
        beta (Tensor or ndarray): [C, H, W] anatomy map
        out_dir (str or Path): Output directory
        visualizer (Visualizer): Draws ``beta_grid.png`` when given

    Return:
        dict of written paths
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = beta.detach().cpu().numpy() if torch.is_tensor(beta) else np.asarray(beta)
    if data.ndim != 3:
        raise ArgumentError("beta must be [C, H, W], got shape {}".format(data.shape))
    blob = out_dir / "beta.f32"
    data.astype("<f4").tofile(blob)
    descriptor = out_dir / "beta.json"
    with open(descriptor, "w") as f:
        json.dump({"shape": list(data.shape), "dtype": "float32", "byteorder": "little"}, f, indent=2)
    paths = {"blob": blob, "descriptor": descriptor}
    if visualizer is not None:
        paths["grid"] = visualizer.save_beta_grid(data, out_dir / "beta_grid.png")
    logger.info("Exported beta %s to %s", data.shape, out_dir)
    return paths


def load_beta(out_dir):
    """Read back a beta exported by export_beta."""
    out_dir = Path(out_dir)
    with open(out_dir / "beta.json") as f:
        descriptor = json.load(f)
    return np.fromfile(out_dir / "beta.f32", dtype="<f4").reshape(descriptor["shape"])
