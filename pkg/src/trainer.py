"""Harmonization training with bi-modal style conditioning, checkpoints and inference.

The generator is the Anatomy Mapper followed by the Style Fusion Decoder. Each
step decodes the source anatomy under either the target image's style
embedding or the target metadata's, then alternates one generator and one
discriminator update. The style encoders stay frozen throughout.
"""
import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader

from src.anatomy_mapper import AnatomyMapper
from src.config import experiment_from_dict, save_config
from src.errors import ArgumentError, CheckpointError, ConfigError, DataError, TrainingError
from src.losses import (PatchDiscriminator, PerceptualNet, LossLogger, discriminator_adv_loss,
                        generator_adv_loss, loss_beta, loss_dir, loss_global, loss_perc, loss_rec, loss_total)
from src.metadata import AcquisitionParams, Prompt, build_prompt
from src.phantom import PairedSliceDataset
from src.style_encoders import encoder_state, encoders_from_state, freeze, weights_digest
from src.style_fusion import StyleFusionDecoder

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "harmonizer-v1"


@dataclass(frozen=True, eq=False)
class Guidance:
    """Exactly one of a target image or target metadata.

    Attributes:
        image (ndarray): Target image in [0, 1]
        metadata (AcquisitionParams, Prompt or str): Target acquisition
    """
    image: Optional[np.ndarray] = None
    metadata: Optional[Union[AcquisitionParams, Prompt, str]] = None

    def __post_init__(self):
        if (self.image is None) == (self.metadata is None):
            raise ArgumentError("guidance needs exactly one of a target image or target metadata")

    @property
    def mode(self):
        return "image" if self.image is not None else "text"

    def prompt(self):
        if isinstance(self.metadata, AcquisitionParams):
            return build_prompt(self.metadata)
        return Prompt(str(self.metadata))


class ConditioningSampler(object):
    """Bernoulli(p) choice between image (True) and metadata (False) conditioning.

    Attributes:
        p (float): Probability of image conditioning
        per_sample (bool): One draw per sample instead of one per batch
        image_draws (int): Draws that chose the image embedding
        total_draws (int): All draws so far
    """

    def __init__(self, p=0.5, seed=0, per_sample=False):
        if not 0.0 <= p <= 1.0:
            raise ArgumentError("conditioning probability must lie in [0, 1], got {}".format(p))
        self.p = p
        self.per_sample = per_sample
        self.rng = np.random.default_rng(seed)
        self.image_draws = 0
        self.total_draws = 0

    def draw(self, batch_size):
        """Boolean mask [batch_size]; True selects the image embedding."""
        if self.per_sample:
            choice = self.rng.random(batch_size) < self.p
        else:
            choice = np.full(batch_size, self.rng.random() < self.p)
        self.image_draws += int(choice[0]) if not self.per_sample else int(choice.sum())
        self.total_draws += 1 if not self.per_sample else batch_size
        return torch.from_numpy(choice)

    @property
    def image_fraction(self):
        return self.image_draws / self.total_draws if self.total_draws else 0.0

    def state(self):
        return {"rng": self.rng.bit_generator.state, "image_draws": self.image_draws, "total_draws": self.total_draws}

    def load_state(self, state):
        self.rng.bit_generator.state = state["rng"]
        self.image_draws = state["image_draws"]
        self.total_draws = state["total_draws"]


class HarmonizationNet(nn.Module):
    """Anatomy Mapper + Style Fusion Decoder.

    With ``use_anatomy_mapper`` off the decoder reads the source image directly.
    """

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        if config.use_anatomy_mapper:
            self.mapper = AnatomyMapper(config.image_size, config.mapper_base, config.depth, config.beta_channels,
                                        config.mapper_norm, config.first_norm_eps)
            in_channels = config.beta_channels
        else:
            self.mapper = None
            in_channels = 1
        self.decoder = StyleFusionDecoder(in_channels, config.decoder_base, config.depth, config.embed_dim,
                                          config.ast_variant, config.bottleneck_heads, config.upsample_heads,
                                          config.attn_dim, config.spatial_map_size)

    @property
    def ast_count(self):
        return self.decoder.ast_count

    def beta(self, image):
        if self.mapper is not None:
            return self.mapper(image)
        if image.dim() == 2:
            image = image[None, None]
        elif image.dim() == 3:
            image = image[:, None]
        size = self.config.image_size
        if image.shape[1] != 1 or tuple(image.shape[-2:]) != (size, size):
            raise ArgumentError("expected 1x{0}x{0} images, got {1}".format(size, tuple(image.shape)))
        return image

    def forward(self, image, theta):
        return self.decoder(self.beta(image), theta)


def set_requires_grad(nets, requires_grad):
    if not isinstance(nets, (list, tuple)):
        nets = [nets]
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(requires_grad)


@dataclass
class LossRecord:
    step: int
    L_beta: float
    L_rec: float
    L_perc: float
    L_adv_g: float
    L_adv_d: float
    L_global: float
    L_dir: float
    total: float
    image_conditioned: float

    def __getitem__(self, name):
        return getattr(self, name)

    def as_dict(self):
        return dataclasses.asdict(self)


def _images(batch, key):
    images = batch[key]
    return images if images.dim() == 4 else images[:, None]


class Trainer(object):
    """Owns the generator, discriminator, optimizers and training position.

    Attributes:
        config (ExperimentConfig):
        encoders (EncoderPair): Frozen style encoders
        net (HarmonizationNet): Generator
        disc (PatchDiscriminator):
        sampler (ConditioningSampler):
        step (int): Optimizer steps taken
        epoch (int): Current epoch (0-based)
        batch_index (int): Next batch within the current epoch
        pairs_per_epoch (list): Pairs consumed by each completed epoch
    """

    def __init__(self, config, encoders):
        config.validate()
        if encoders.config.embed_dim != config.model.embed_dim:
            raise ConfigError("style encoders embed {} dims but the model expects {}".format(
                encoders.config.embed_dim, config.model.embed_dim))
        self.config = config
        self.encoders = freeze(encoders)
        train = config.train
        torch.manual_seed(train.seed)
        self.net = HarmonizationNet(config.model)
        self.disc = PatchDiscriminator(1, config.model.disc_base, config.model.disc_layers)
        self.perceptual = PerceptualNet(train.perc_taps, seed=train.seed)
        self.opt_g = torch.optim.Adam(self.net.parameters(), lr=train.lr, betas=(0.5, 0.999))
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=train.lr, betas=(0.5, 0.999))
        self.sampler = ConditioningSampler(train.p_image, train.seed, train.per_sample_conditioning)
        self.step = 0
        self.epoch = 0
        self.batch_index = 0
        self.pairs_per_epoch = []
        self.history = []
        self.last_checkpoint = None

    @torch.no_grad()
    def embed(self, batch):
        """Frozen style embeddings of a batch: theta_i, theta_m, e_src, m_src."""
        enc = self.encoders
        return {
            "theta_i": enc.encode_image(_images(batch, "tgt")),
            "theta_m": enc.encode_metadata(batch["tgt_tokens"]),
            "e_src": enc.encode_image(_images(batch, "src")),
            "m_src": enc.encode_metadata(batch["src_tokens"]),
        }

    def compute_losses(self, batch, use_image):
        """Generator-side loss components for one batch.

        Args:
            batch (dict): Collated PairedSliceDataset items
            use_image (Tensor): Boolean [B]; True conditions on theta_i

        Return:
            (components dict, reconstructed images)
        """
        src, tgt = _images(batch, "src"), _images(batch, "tgt")
        emb = self.embed(batch)
        beta_src = self.net.beta(src)
        theta = torch.where(use_image[:, None], emb["theta_i"], emb["theta_m"])
        rec = self.net.decoder(beta_src, theta)
        e_rec = self.encoders.encode_image(rec)
        if self.net.mapper is not None:
            l_beta = loss_beta(beta_src, self.net.beta(tgt), self.config.train.patch)
        else:
            l_beta = rec.new_zeros(())
        components = {
            "beta": l_beta,
            "rec": loss_rec(tgt, rec),
            "perc": loss_perc(tgt, rec, self.perceptual),
            "adv": generator_adv_loss(self.disc(rec)),
            "global": loss_global(e_rec, emb["theta_i"], emb["theta_m"]),
            "dir": loss_dir(e_rec, emb["e_src"], emb["theta_m"], emb["m_src"]),
        }
        return components, rec

    def _check_pairs(self, batch):
        if list(batch["src_anatomy"]) != list(batch["tgt_anatomy"]):
            raise DataError("batch pairs images of different anatomies: {} vs {}".format(
                list(batch["src_anatomy"]), list(batch["tgt_anatomy"])))

    def _generator_backward(self, batch, use_image):
        """Generator losses and their gradients; the generator optimizer is not stepped here."""
        set_requires_grad(self.disc, False)
        self.net.train()
        self.opt_g.zero_grad()
        try:
            components, rec = self.compute_losses(batch, use_image)
            total = loss_total(components, self.config.train.weights)
            total.backward()
        finally:
            set_requires_grad(self.disc, True)
        return components, total, rec.detach()

    def _discriminator_backward(self, batch, fake):
        self.opt_d.zero_grad()
        d_loss = discriminator_adv_loss(self.disc(_images(batch, "tgt")), self.disc(fake))
        if not torch.isfinite(d_loss):
            raise TrainingError("discriminator loss is not finite", component="adv_d")
        d_loss.backward()
        return d_loss

    def train_step(self, batch):
        """One generator update followed by one discriminator update.

        Both losses are computed and checked before either optimizer steps, so a
        failing step leaves every weight at its pre-step value.

        Return:
            LossRecord of the step
        """
        self._check_pairs(batch)
        use_image = self.sampler.draw(batch["src"].shape[0])
        components, total, fake = self._generator_backward(batch, use_image)
        d_loss = self._discriminator_backward(batch, fake)
        self.opt_g.step()
        self.opt_d.step()
        self.step += 1
        return LossRecord(
            step=self.step,
            L_beta=float(components["beta"]), L_rec=float(components["rec"]),
            L_perc=float(components["perc"]), L_adv_g=float(components["adv"]),
            L_adv_d=float(d_loss), L_global=float(components["global"]), L_dir=float(components["dir"]),
            total=float(total), image_conditioned=float(use_image.float().mean()),
        )

    def gradient_norms(self, batch, use_image=None):
        """Generator gradient norm contributed by each weighted loss term, without updating anything."""
        if use_image is None:
            use_image = torch.ones(batch["src"].shape[0], dtype=torch.bool)
        set_requires_grad(self.disc, False)
        weights = self.config.train.weights.as_dict()
        components, _ = self.compute_losses(batch, use_image)
        norms = {}
        params = [p for p in self.net.parameters() if p.requires_grad]
        for key, weight in weights.items():
            if weight <= 0:
                continue
            if not components[key].requires_grad:
                norms[key] = 0.0
                continue
            grads = torch.autograd.grad(weight * components[key], params, retain_graph=True, allow_unused=True)
            norms[key] = float(torch.sqrt(sum(((g ** 2).sum() for g in grads if g is not None), torch.tensor(0.0))))
        set_requires_grad(self.disc, True)
        return norms

    def epoch_batches(self, n_pairs, epoch):
        order = np.random.default_rng([self.config.train.seed, epoch]).permutation(n_pairs)
        size = self.config.train.batch_size
        return [order[i:i + size].tolist() for i in range(0, n_pairs, size)]

    def fit(self, manifest, out_dir):
        """Train over all ordered cross-contrast pairs of the train split.

        Args:
            manifest (Manifest): Dataset
            out_dir (str or Path): Receives checkpoints, losses.csv and config.json

        Return:
            Path of the final checkpoint
        """
        train = self.config.train
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(self.config, out_dir)
        dataset = PairedSliceDataset(manifest, "train", self.encoders.vocab, self.encoders.config.max_len)
        if len(dataset) == 0:
            raise ConfigError("train split has no cross-contrast pairs")
        digest = weights_digest(self.encoders)
        print("\nTraining on {} ordered pairs for {} epochs...".format(len(dataset), train.epochs))
        time_start = time.time()
        resumed = self.step > 0
        with LossLogger(out_dir / "losses.csv", append=resumed) as loss_log:
            while self.epoch < train.epochs and not self._done():
                batches = self.epoch_batches(len(dataset), self.epoch)
                loader = DataLoader(dataset, batch_sampler=batches[self.batch_index:], num_workers=train.num_workers)
                consumed = sum(len(b) for b in batches[:self.batch_index])
                for batch in loader:
                    record = self._guarded_step(batch, out_dir)
                    consumed += batch["src"].shape[0]
                    self.batch_index += 1
                    self.history.append(record)
                    loss_log.log(record.step, record)
                    if self.step % train.log_every == 0:
                        logger.info("step %d epoch %d total %.4f image conditioning %.3f", self.step,
                                    self.epoch + 1, record.total, self.sampler.image_fraction)
                    if self.step % train.checkpoint_every == 0:
                        self.save(out_dir / "step_{:06d}.pt".format(self.step))
                    if self._done():
                        break
                if self.batch_index >= len(batches):
                    self.pairs_per_epoch.append(consumed)
                    self.epoch += 1
                    self.batch_index = 0
        if weights_digest(self.encoders) != digest:
            raise TrainingError("style encoder weights changed during training")
        print("Execution time for training: {:.4f}".format(time.time() - time_start))
        return self.save(out_dir / "final.pt")

    def _done(self):
        return self.config.train.max_steps is not None and self.step >= self.config.train.max_steps

    def _guarded_step(self, batch, out_dir):
        try:
            return self.train_step(batch)
        except TrainingError as e:
            if self.last_checkpoint is None:
                # a failing step raises before either optimizer steps, so the weights are still good
                self.save(out_dir / "last_good.pt")
            logger.error("Training aborted at step %d: %s (last good checkpoint %s)",
                         self.step + 1, e, self.last_checkpoint)
            raise TrainingError(str(e), component=e.component, checkpoint=str(self.last_checkpoint))

    def state(self):
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "model": self.net.state_dict(),
            "discriminator": self.disc.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng": {"torch": torch.get_rng_state(), "sampler": self.sampler.state()},
            "position": {"step": self.step, "epoch": self.epoch, "batch_index": self.batch_index,
                         "pairs_per_epoch": list(self.pairs_per_epoch)},
            "ast_count": self.net.ast_count,
            "widths": list(self.net.decoder.widths),
            "encoders": encoder_state(self.encoders),
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state(), path)
        self.last_checkpoint = path
        logger.debug("Saved checkpoint %s at step %d", path, self.step)
        return path

    @classmethod
    def from_checkpoint(cls, path, config=None):
        """Rebuild a trainer mid-run; ``config`` may override the stored one (e.g. more epochs)."""
        state = load_checkpoint(path)
        config = config or experiment_from_dict(state["config"])
        trainer = cls(config, encoders_from_state(state["encoders"], path))
        _load_model(trainer.net, state, path)
        trainer.disc.load_state_dict(state["discriminator"])
        trainer.opt_g.load_state_dict(state["opt_g"])
        trainer.opt_d.load_state_dict(state["opt_d"])
        torch.set_rng_state(state["rng"]["torch"])
        trainer.sampler.load_state(state["rng"]["sampler"])
        position = state["position"]
        trainer.step = position["step"]
        trainer.epoch = position["epoch"]
        trainer.batch_index = position["batch_index"]
        trainer.pairs_per_epoch = list(position["pairs_per_epoch"])
        trainer.last_checkpoint = Path(path)
        return trainer


def load_checkpoint(path):
    """Read a checkpoint archive; a run directory resolves to its final.pt."""
    path = Path(path)
    if path.is_dir():
        path = path / "final.pt"
    if not path.exists():
        raise CheckpointError("checkpoint not found", path)
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError("checkpoint could not be read: {}".format(e), path)
    if not isinstance(state, dict) or state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("not a harmonization checkpoint", path)
    return state


def _load_model(net, state, path):
    if state["ast_count"] != net.ast_count:
        raise CheckpointError("checkpoint records {} style blocks but the model has {}".format(
            state["ast_count"], net.ast_count), path)
    net.load_state_dict(state["model"])


def fit(manifest, config, encoders, out_dir):
    """Train a fresh model; returns the final checkpoint path."""
    return Trainer(config, encoders).fit(manifest, out_dir)


class Harmonizer(object):
    """Read-only inference wrapper around a trained generator and its style encoders.

    Attributes:
        net (HarmonizationNet):
        encoders (EncoderPair):
        config (ExperimentConfig):
    """

    def __init__(self, net, encoders, config):
        self.net = net.eval()
        self.encoders = freeze(encoders)
        self.config = config

    @classmethod
    def from_checkpoint(cls, path):
        state = load_checkpoint(path)
        config = experiment_from_dict(state["config"])
        net = HarmonizationNet(config.model)
        _load_model(net, state, path)
        return cls(net, encoders_from_state(state["encoders"], path), config)

    @classmethod
    def from_trainer(cls, trainer):
        return cls(trainer.net, trainer.encoders, trainer.config)

    @staticmethod
    def _tensor(image):
        if isinstance(image, np.ndarray):
            image = torch.from_numpy(image.astype(np.float32))
        return image.float()

    @torch.no_grad()
    def style(self, guidance):
        """Style embedding [1, D] for a guidance."""
        if guidance.mode == "image":
            return self.encoders.encode_image(self._tensor(guidance.image))
        return self.encoders.encode_metadata(self.encoders.tokenize(guidance.prompt()))

    @torch.no_grad()
    def beta(self, source):
        """Anatomy map [C, H, W] of one source image."""
        return self.net.beta(self._tensor(source))[0].numpy()

    @torch.no_grad()
    def decode(self, sources, thetas):
        """Batched harmonization: sources [B, H, W] or [B, 1, H, W], thetas [B, D] -> [B, H, W]."""
        return self.net(self._tensor(sources), thetas)[:, 0]

    def harmonize(self, source, guidance):
        """Harmonize one [H, W] source image; returns an [H, W] float array in [0, 1]."""
        theta = self.style(guidance)
        return self.decode(self._tensor(source)[None], theta)[0].numpy()


def harmonize(source, guidance, checkpoint):
    """Harmonize ``source`` toward ``guidance`` with a checkpoint path or a loaded Harmonizer."""
    if not isinstance(guidance, Guidance):
        raise ArgumentError("guidance must be a Guidance, got {}".format(type(guidance).__name__))
    harmonizer = checkpoint if isinstance(checkpoint, Harmonizer) else Harmonizer.from_checkpoint(checkpoint)
    return harmonizer.harmonize(source, guidance)
