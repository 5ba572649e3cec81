"""Joint contrast embedding space: an image encoder and a metadata encoder.

Both encoders end in L2 normalization, so cosine similarity between a style
embedding from an image and one from a prompt is a plain dot product. The pair
is contrastively pretrained on the phantom corpus and then frozen.
"""
import dataclasses
import hashlib
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader

from src.config import ClipConfig
from src.errors import ArgumentError, CheckpointError
from src.metadata import Vocabulary, build_prompt, tokenize_prompt
from src.phantom import CONTRASTS, ImagePromptDataset, render_slice, sample_acquisition, synth_tissue_maps

logger = logging.getLogger(__name__)

CLIP_VERSION = "style-encoders-v1"
MAX_LOGIT_SCALE = 100.0


class ImageEncoder(nn.Module):
    """Strided conv stack -> global pooling -> unit-norm embedding."""

    def __init__(self, image_size=64, embed_dim=512, widths=(32, 64, 128, 256)):
        super().__init__()
        self.image_size = image_size
        layers = []
        in_ch = 1
        for width in widths:
            layers += [nn.Conv2d(in_ch, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            in_ch = width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Sequential(nn.Linear(in_ch * 2, embed_dim), nn.LeakyReLU(0.2), nn.Linear(embed_dim, embed_dim))

    def forward(self, images):
        if images.dim() == 2:
            images = images[None, None]
        elif images.dim() == 3:
            images = images[:, None]
        if tuple(images.shape[-2:]) != (self.image_size, self.image_size) or images.shape[1] != 1:
            raise ArgumentError("image encoder expects 1x{0}x{0} inputs, got {1}".format(
                self.image_size, tuple(images.shape)))
        h = self.features(images)
        # mean and max pooling keep both global level and bright-structure cues
        pooled = torch.cat([self.pool(h).flatten(1), F.adaptive_max_pool2d(h, 1).flatten(1)], dim=1)
        return F.normalize(self.head(pooled), dim=-1)


class MetadataEncoder(nn.Module):
    """Token embedding + small transformer + masked mean pooling -> unit-norm embedding."""

    def __init__(self, vocab_size, embed_dim=512, token_dim=128, layers=2, heads=4, max_len=96):
        super().__init__()
        self.max_len = max_len
        self.tokens = nn.Embedding(vocab_size, token_dim, padding_idx=Vocabulary.pad_id)
        self.positions = nn.Parameter(torch.zeros(1, max_len, token_dim))
        nn.init.normal_(self.positions, std=0.02)
        layer = nn.TransformerEncoderLayer(token_dim, heads, dim_feedforward=2 * token_dim,
                                           dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.head = nn.Linear(token_dim, embed_dim)

    def forward(self, tokens):
        if tokens.dim() == 1:
            tokens = tokens[None]
        if tokens.shape[1] != self.max_len:
            raise ArgumentError("metadata encoder expects {} tokens, got {}".format(self.max_len, tokens.shape[1]))
        padding = tokens == Vocabulary.pad_id
        # an all-padding row would mask every key; let it attend to its padding instead
        attend_mask = padding & ~padding.all(dim=1, keepdim=True)
        h = self.tokens(tokens) + self.positions
        h = self.encoder(h, src_key_padding_mask=attend_mask)
        keep = (~attend_mask).unsqueeze(-1).to(h.dtype)
        pooled = (h * keep).sum(dim=1) / keep.sum(dim=1).clamp_min(1.0)
        return F.normalize(self.head(pooled), dim=-1)


class EncoderPair(nn.Module):
    """Image encoder, metadata encoder, learned temperature and the frozen vocabulary.

    Attributes:
        image (ImageEncoder):
        text (MetadataEncoder):
        vocab (Vocabulary):
        config (ClipConfig):
        history (list): Per-epoch mean pretraining loss
    """

    def __init__(self, vocab, config):
        super().__init__()
        self.vocab = vocab
        self.config = config
        self.image = ImageEncoder(config.image_size, config.embed_dim)
        self.text = MetadataEncoder(len(vocab), config.embed_dim, config.token_dim,
                                    config.text_layers, config.text_heads, config.max_len)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / config.init_temperature)))
        self.history = []

    def encode_image(self, images):
        """Style embedding of image(s): [H, W], [B, H, W] or [B, 1, H, W] -> [B, D]."""
        if isinstance(images, np.ndarray):
            images = torch.from_numpy(images.astype(np.float32))
        return self.image(images.to(self.logit_scale.dtype))

    def encode_metadata(self, tokens):
        """Style embedding of token id sequence(s): [L] or [B, L] -> [B, D]."""
        if not torch.is_tensor(tokens):
            tokens = torch.tensor(tokens, dtype=torch.long)
        return self.text(tokens)

    def tokenize(self, prompt):
        return torch.tensor(tokenize_prompt(prompt, self.vocab, self.config.max_len), dtype=torch.long)

    def encode_acquisition(self, acq):
        return self.encode_metadata(self.tokenize(build_prompt(acq)))

    def scale(self):
        return self.logit_scale.exp().clamp(max=MAX_LOGIT_SCALE)


def freeze(module):
    """Switch a module to eval mode and stop gradient updates to its weights."""
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def weights_digest(module):
    """SHA-256 over a module's state dict, for frozen-weight checks."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def clip_loss(image_embeddings, text_embeddings, logit_scale):
    """Symmetric InfoNCE over in-batch pairs.

    Args:
        image_embeddings (Tensor): [B, D], row i pairs with text row i
        text_embeddings (Tensor): [B, D]
        logit_scale (float or Tensor): Inverse temperature 1/tau

    Return:
        Mean of the image->text and text->image cross-entropies
    """
    batch = image_embeddings.shape[0]
    if batch < 2:
        raise ArgumentError("contrastive loss needs at least 2 pairs, got {}".format(batch))
    logits = logit_scale * image_embeddings @ text_embeddings.t()
    labels = torch.arange(batch, device=logits.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels))


def pretrain_clip(manifest, config=None, out_path=None, split="train"):
    """Contrastively pretrain the encoder pair on (image, prompt) pairs.

    Args:
        manifest (Manifest): Phantom dataset
        config (ClipConfig): Pretraining settings
        out_path (str or Path): Where to save the checkpoint, optional
        split (str): Split used for training; the vocabulary is built from it

    Return:
        EncoderPair in eval mode
    """
    config = config or ClipConfig()
    config.validate()
    torch.manual_seed(config.seed)
    vocab = Vocabulary.build(manifest.prompts(split))
    pair = EncoderPair(vocab, config)
    dataset = ImagePromptDataset(manifest, split, vocab, config.max_len)
    if len(dataset) < 2:
        raise ArgumentError("pretraining needs at least 2 image/prompt pairs, got {}".format(len(dataset)))
    generator = torch.Generator().manual_seed(config.seed)
    loader = DataLoader(dataset, batch_size=config.batch_size, shuffle=True, generator=generator, drop_last=True)
    if len(loader) == 0:
        loader = DataLoader(dataset, batch_size=len(dataset), shuffle=True, generator=generator)
    optimizer = torch.optim.Adam(pair.parameters(), lr=config.lr)

    print("\nPretraining style encoders on {} image/prompt pairs...".format(len(dataset)))
    time_start = time.time()
    pair.train()
    for epoch in range(config.epochs):
        losses = []
        for images, tokens, _ in loader:
            loss = clip_loss(pair.encode_image(images), pair.encode_metadata(tokens), pair.scale())
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        pair.history.append(float(np.mean(losses)))
        logger.info("clip epoch %d/%d loss %.4f temperature %.4f", epoch + 1, config.epochs,
                    pair.history[-1], 1.0 / pair.scale().item())
    print("Execution time for pretraining: {:.4f}".format(time.time() - time_start))
    pair.eval()
    if out_path is not None:
        save_encoders(pair, out_path)
    return pair


def encoder_state(pair):
    return {
        "version": CLIP_VERSION,
        "config": dataclasses.asdict(pair.config),
        "vocab": pair.vocab.to_dict(),
        "weights": pair.state_dict(),
        "history": list(pair.history),
    }


def encoders_from_state(state, source="<memory>"):
    if state.get("version") != CLIP_VERSION:
        raise CheckpointError("unexpected encoder checkpoint version {!r}".format(state.get("version")), source)
    pair = EncoderPair(Vocabulary.from_dict(state["vocab"]), ClipConfig(**state["config"]))
    pair.load_state_dict(state["weights"])
    pair.history = list(state.get("history", []))
    return pair.eval()


def save_encoders(pair, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(encoder_state(pair), path)
    logger.info("Saved style encoders to %s", path)
    return path


def load_encoders(path):
    """Load an encoder pair checkpoint (eval mode, weights trainable until frozen)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError("encoder checkpoint not found", path)
    return encoders_from_state(torch.load(path, map_location="cpu"), path)


@torch.no_grad()
def retrieval_accuracy(pair, manifest, split="test"):
    """Top-1 prompt retrieval among the contrasts of the same anatomy.

    For every image the candidates are the prompts of all contrasts rendered
    for its anatomy (same scanner); a hit is when its own prompt scores highest.
    Also reports how often cos(image, own prompt) beats cos(image, any other
    contrast's prompt).

    Return:
        dict with top1, paired_vs_mismatched, n
    """
    pair.eval()
    hits, wins, total = 0, 0, 0
    per_contrast = {}
    for anatomy_id, records in sorted(manifest.by_anatomy(split).items()):
        if len(records) < 2:
            continue
        samples = [manifest.load_sample(r) for r in records]
        images = torch.stack([torch.from_numpy(s.image.astype(np.float32)) for s in samples])
        tokens = torch.stack([pair.tokenize(build_prompt(s.acq)) for s in samples])
        sims = pair.encode_image(images) @ pair.encode_metadata(tokens).t()
        for i, sample in enumerate(samples):
            own = sims[i, i]
            others = torch.cat([sims[i, :i], sims[i, i + 1:]])
            hit = int(torch.argmax(sims[i]).item() == i)
            hits += hit
            wins += int(bool((own > others).all()))
            total += 1
            counts = per_contrast.setdefault(sample.contrast, [0, 0])
            counts[0] += hit
            counts[1] += 1
    if total == 0:
        raise ArgumentError("split {!r} has no anatomy with two or more contrasts".format(split))
    return {
        "top1": hits / total,
        "paired_vs_mismatched": wins / total,
        "n": total,
        "per_contrast": {c: per_contrast[c][0] / per_contrast[c][1] for c in CONTRASTS if c in per_contrast},
    }


@torch.no_grad()
def image_style_consistency(pair, n_triples=50, shape=None, seed=1000, n_structures=6):
    """Fraction of triples where two phantoms under one acquisition embed closer
    to each other than to the first phantom under any other contrast.

    Phantoms are generated from seeds outside the dataset range so they are
    never seen in pretraining.
    """
    size = pair.config.image_size
    shape = shape or (size, size)
    pair.eval()
    wins = 0
    for t in range(n_triples):
        first = synth_tissue_maps(seed + 2 * t, shape, n_structures)
        second = synth_tissue_maps(seed + 2 * t + 1, shape, n_structures)
        contrast = CONTRASTS[t % len(CONTRASTS)]
        acq = sample_acquisition(seed + t, contrast)
        others = [sample_acquisition(seed + t, c) for c in CONTRASTS if c != contrast]
        images = [render_slice(first, acq), render_slice(second, acq)] + [render_slice(first, a) for a in others]
        emb = pair.encode_image(np.stack(images).astype(np.float32))
        sims = emb[0] @ emb[1:].t()
        wins += int(bool((sims[0] > sims[1:]).all()))
    return wins / n_triples
