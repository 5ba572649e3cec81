"""Training losses, the patch discriminator and the per-step loss log."""
import csv
import logging
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config import LossWeights, PatchConfig
from src.errors import ArgumentError, ConfigError, TrainingError

logger = logging.getLogger(__name__)

# component keys match LossWeights.as_dict()
COMPONENTS = ("beta", "rec", "perc", "adv", "global", "dir")
LOSS_NAMES = ("L_beta", "L_rec", "L_perc", "L_adv", "L_global", "L_dir")
CSV_HEADER = ("step", "L_beta", "L_rec", "L_perc", "L_adv_g", "L_adv_d", "L_global", "L_dir", "total")
DEGENERATE_NORM = 1e-8


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ArgumentError("{} needs equal shapes, got {} and {}".format(what, tuple(a.shape), tuple(b.shape)))


def patch_vectors(beta, patch_size=1, stride=2):
    """Flattened patches of a [B, C, H, W] map on a strided grid -> [B, P, C*k*k]."""
    if beta.dim() == 3:
        beta = beta[None]
    return F.unfold(beta, kernel_size=patch_size, stride=stride).transpose(1, 2)


def patch_nce(z_src, z_tgt, tau):
    """InfoNCE of each source patch against all target patches, positive on the diagonal.

    Args:
        z_src (Tensor): [B, P, D] patch vectors
        z_tgt (Tensor): [B, P, D]
        tau (float): Temperature

    Return:
        Mean loss over every patch of every sample
    """
    patches = z_src.shape[1]
    if patches < 2:
        raise ArgumentError("patch grid has {} patch(es); at least 2 are needed for negatives".format(patches))
    logits = F.normalize(z_src, dim=-1) @ F.normalize(z_tgt, dim=-1).transpose(1, 2) / tau
    labels = torch.arange(patches, device=logits.device).repeat(z_src.shape[0])
    return F.cross_entropy(logits.reshape(-1, patches), labels)


def loss_beta(beta_src, beta_tgt, cfg=None):
    """Patch-wise contrastive alignment of two anatomy maps of one anatomy."""
    cfg = cfg or PatchConfig()
    _same_shape(beta_src, beta_tgt, "loss_beta")
    z_src = patch_vectors(beta_src, cfg.patch_size, cfg.stride)
    z_tgt = patch_vectors(beta_tgt, cfg.patch_size, cfg.stride)
    loss = patch_nce(z_src, z_tgt, cfg.tau)
    if cfg.symmetric:
        loss = 0.5 * (loss + patch_nce(z_tgt, z_src, cfg.tau))
    return loss


def loss_rec(target, output):
    _same_shape(target, output, "loss_rec")
    return (target - output).abs().mean()


class PerceptualNet(nn.Module):
    """Fixed random conv feature extractor standing in for a pretrained network.

    Weights are drawn from their own seeded generator at construction and never
    trained, so every instance built with the same seed is identical.

    Attributes:
        taps (tuple): 1-based indices of the conv layers whose activations are compared
    """

    def __init__(self, taps=(2, 4), width=16, seed=0):
        super().__init__()
        taps = tuple(sorted(set(taps)))
        if not taps:
            raise ConfigError("perceptual network needs at least one tap layer")
        if taps[0] < 1:
            raise ConfigError("tap layers are 1-based, got {}".format(taps))
        self.taps = taps
        layers = []
        in_ch = 1
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for i in range(taps[-1]):
                out_ch = width * 2 ** (i // 2)
                layers.append(nn.Conv2d(in_ch, out_ch, 3, stride=2 if i % 2 else 1, padding=1))
                in_ch = out_ch
            self.layers = nn.ModuleList(layers)
            for layer in self.layers:
                nn.init.kaiming_normal_(layer.weight, a=0.2, nonlinearity="leaky_relu")
                nn.init.zeros_(layer.bias)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def train(self, mode=True):
        # stays in eval mode
        return super().train(False)

    def forward(self, image):
        if image.dim() == 3:
            image = image[:, None]
        features = []
        h = image
        for i, layer in enumerate(self.layers, start=1):
            h = F.leaky_relu(layer(h), 0.2)
            if i in self.taps:
                features.append(h)
        return features


def loss_perc(target, output, net):
    """Sum over tap layers of the mean absolute feature difference."""
    if net is None or not getattr(net, "taps", None):
        raise ConfigError("loss_perc needs a perceptual network with tap layers")
    _same_shape(target, output, "loss_perc")
    total = 0.0
    for a, b in zip(net(target), net(output)):
        total = total + (a - b).abs().mean()
    return total


class PatchDiscriminator(nn.Module):
    """Conv patch discriminator emitting a grid of real/fake logits."""

    def __init__(self, in_channels=1, base=32, layers=3):
        super().__init__()
        if layers < 1:
            raise ConfigError("discriminator needs at least one downsampling layer")
        blocks = [nn.Conv2d(in_channels, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        width = base
        for i in range(1, layers):
            out = base * 2 ** i
            blocks += [nn.Conv2d(width, out, 4, stride=2, padding=1), nn.InstanceNorm2d(out, affine=True),
                       nn.LeakyReLU(0.2)]
            width = out
        blocks.append(nn.Conv2d(width, 1, 3, stride=1, padding=1))
        self.model = nn.Sequential(*blocks)

    def forward(self, image):
        if image.dim() == 3:
            image = image[:, None]
        return self.model(image)


def generator_adv_loss(fake_logits):
    """Non-saturating generator loss -E[log sigmoid(D(fake))]."""
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))


def discriminator_adv_loss(real_logits, fake_logits):
    real = F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
    fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return real + fake


def loss_adv(disc, real, fake):
    """(generator loss, discriminator loss); the discriminator term sees a detached fake."""
    _same_shape(real, fake, "loss_adv")
    gen = generator_adv_loss(disc(fake))
    dis = discriminator_adv_loss(disc(real), disc(fake.detach()))
    return gen, dis


def _check_nonzero(vectors, name):
    if (vectors.norm(dim=-1) < DEGENERATE_NORM).any():
        raise ArgumentError("{} contains a zero vector".format(name))


def loss_global(e_rec, theta_i, theta_m):
    """Mean of 1/2(1 - cos(e_rec, theta_i)) + 1/2(1 - cos(e_rec, theta_m))."""
    _same_shape(e_rec, theta_i, "loss_global")
    _same_shape(e_rec, theta_m, "loss_global")
    for vectors, name in ((e_rec, "e_rec"), (theta_i, "theta_i"), (theta_m, "theta_m")):
        _check_nonzero(vectors, name)
    cos_i = F.cosine_similarity(e_rec, theta_i, dim=-1)
    cos_m = F.cosine_similarity(e_rec, theta_m, dim=-1)
    return (0.5 * (1.0 - cos_i) + 0.5 * (1.0 - cos_m)).mean()


def loss_dir(e_rec, e_src, m_tgt, m_src):
    """1 - cos(e_rec - e_src, m_tgt - m_src), averaged over the batch.

    Pairs where either displacement has norm below 1e-8 contribute 0.
    """
    delta_i = e_rec - e_src
    delta_m = m_tgt - m_src
    _same_shape(delta_i, delta_m, "loss_dir")
    if delta_i.dim() == 1:
        delta_i, delta_m = delta_i[None], delta_m[None]
    norm_i = delta_i.norm(dim=-1)
    norm_m = delta_m.norm(dim=-1)
    valid = (norm_i >= DEGENERATE_NORM) & (norm_m >= DEGENERATE_NORM)
    if not bool(valid.all()):
        logger.warning("loss_dir: %d of %d pairs have no style displacement; counted as 0",
                       int((~valid).sum()), valid.numel())
    safe_i = torch.where(valid, norm_i, torch.ones_like(norm_i))
    safe_m = torch.where(valid, norm_m, torch.ones_like(norm_m))
    cos = (delta_i * delta_m).sum(dim=-1) / (safe_i * safe_m)
    per_pair = torch.where(valid, 1.0 - cos, torch.zeros_like(cos))
    return per_pair.mean()


def loss_total(components, weights=None):
    """Weighted sum of the six loss components.

    Args:
        components (dict): Component key (see COMPONENTS) -> scalar tensor or float
        weights (LossWeights): Coefficients

    Return:
        The weighted total; raises TrainingError naming the first non-finite component
    """
    weights = weights or LossWeights()
    missing = [k for k in COMPONENTS if k not in components]
    if missing:
        raise ArgumentError("missing loss components: {}".format(missing))
    total = 0.0
    for key, weight in weights.as_dict().items():
        value = components[key]
        if not math.isfinite(float(value)):
            raise TrainingError("loss component {} is not finite ({})".format(key, float(value)), component=key)
        total = total + weight * value
    return total


class LossLogger(object):
    """Appends one CSV row of loss components per training step."""

    def __init__(self, path, append=False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        exists = append and self.path.exists()
        self._file = open(self.path, "a" if exists else "w", newline="")
        self._writer = csv.writer(self._file)
        if not exists:
            self._writer.writerow(CSV_HEADER)

    def log(self, step, record):
        self._writer.writerow([step] + ["{:.6g}".format(record[name]) for name in CSV_HEADER[1:]])
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_loss_log(path):
    """Rows of a loss CSV as dicts of floats (step as int)."""
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]
