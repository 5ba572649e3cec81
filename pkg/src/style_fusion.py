"""Style Fusion Decoder: rebuilds an image from an anatomy map and a style embedding.

Style enters through Adaptive Style Transfer (AST) blocks. Each block turns
the style embedding into one query token, attends over the flattened feature
map, and converts the resulting context vector into spatial AdaIN parameters.
"""
import logging
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ArgumentError

logger = logging.getLogger(__name__)

ADAIN_EPS = 1e-5


def spatial_adain(features, gamma, delta, spatial_map=None, eps=ADAIN_EPS):
    """Instance-normalize ``features`` then apply x_hat * (gamma * (1 + map)) + delta.

    Args:
        features (Tensor): [B, C, H, W]
        gamma (Tensor): [B, C] per-channel scale
        delta (Tensor): [B, C] per-channel shift
        spatial_map (Tensor): [B, 1, H, W], [B, H, W] or [H, W]; None means zero
        eps (float): Variance stabilizer

    Return:
        Tensor shaped like ``features``
    """
    if features.dim() != 4:
        raise ArgumentError("spatial AdaIN expects [B, C, H, W] features, got {}".format(tuple(features.shape)))
    b, c, h, w = features.shape
    if tuple(gamma.shape) != (b, c) or tuple(delta.shape) != (b, c):
        raise ArgumentError("gamma/delta must be [{}, {}], got {} and {}".format(
            b, c, tuple(gamma.shape), tuple(delta.shape)))
    mean = features.mean(dim=(2, 3), keepdim=True)
    var = features.var(dim=(2, 3), keepdim=True, unbiased=False)
    normalized = (features - mean) / torch.sqrt(var + eps)
    scale = gamma[:, :, None, None]
    if spatial_map is not None:
        if spatial_map.dim() == 2:
            spatial_map = spatial_map[None, None]
        elif spatial_map.dim() == 3:
            spatial_map = spatial_map[:, None]
        if tuple(spatial_map.shape[-2:]) != (h, w) or spatial_map.shape[1] != 1:
            raise ArgumentError("spatial map must be {}x{}, got {}".format(h, w, tuple(spatial_map.shape)))
        scale = scale * (1.0 + spatial_map)
    return normalized * scale + delta[:, :, None, None]


class StyleAttention(nn.Module):
    """Single-query multi-head attention over flattened feature positions.

    Keys and values are linear projections of the per-position feature
    vectors; the output is projected back to ``attn_dim``.
    """

    def __init__(self, channels, attn_dim=128, heads=8):
        super().__init__()
        if attn_dim % heads:
            raise ArgumentError("heads ({}) must divide attn_dim ({})".format(heads, attn_dim))
        self.channels = channels
        self.heads = heads
        self.head_dim = attn_dim // heads
        self.keys = nn.Linear(channels, attn_dim)
        self.values = nn.Linear(channels, attn_dim)
        self.proj = nn.Linear(attn_dim, attn_dim)

    def forward(self, query, features):
        """query [B, attn_dim], features [B, C, H, W] -> [B, attn_dim]"""
        b, c = features.shape[:2]
        if c != self.channels:
            raise ArgumentError("attention expects {} channels, got {}".format(self.channels, c))
        tokens = features.flatten(2).transpose(1, 2)
        k = self.keys(tokens).view(b, -1, self.heads, self.head_dim).transpose(1, 2)
        v = self.values(tokens).view(b, -1, self.heads, self.head_dim).transpose(1, 2)
        q = query.view(b, self.heads, self.head_dim)
        return self.proj(self.attend(q, k, v).reshape(b, -1))

    def attend(self, q, k, v):
        raise NotImplementedError


class SoftmaxStyleAttention(StyleAttention):
    def attend(self, q, k, v):
        # q [B, h, d]; k, v [B, h, N, d]
        scores = torch.einsum("bhd,bhnd->bhn", q, k) / math.sqrt(self.head_dim)
        return torch.einsum("bhn,bhnd->bhd", scores.softmax(dim=-1), v)


class LinearStyleAttention(StyleAttention):
    """Kernelized attention with feature map elu(x) + 1."""

    def attend(self, q, k, v):
        q = F.elu(q) + 1.0
        k = F.elu(k) + 1.0
        kv = torch.einsum("bhnd,bhne->bhde", k, v)
        normalizer = torch.einsum("bhd,bhd->bh", q, k.sum(dim=2)).clamp_min(1e-6)
        return torch.einsum("bhd,bhde->bhe", q, kv) / normalizer[..., None]


ATTENTION_KINDS = {"softmax": SoftmaxStyleAttention, "linear": LinearStyleAttention}


def _check_theta(theta, embed_dim, batch):
    if theta.dim() == 1:
        theta = theta[None]
    if theta.shape[-1] != embed_dim:
        raise ArgumentError("style embedding must have {} dims, got {}".format(embed_dim, theta.shape[-1]))
    if theta.shape[0] == 1 and batch > 1:
        theta = theta.expand(batch, -1)
    elif theta.shape[0] != batch:
        raise ArgumentError("style batch {} does not match feature batch {}".format(theta.shape[0], batch))
    return theta


class ASTBlock(nn.Module):
    """Adaptive Style Transfer block.

    The modulation head is zero-initialized, so a fresh block applies
    gamma=1, delta=0 and a zero spatial map whatever the style.

    Attributes:
        channels (int): Feature width this block modulates
        embed_dim (int): Style embedding size
        map_size (int): Side of the low-resolution spatial modulation map
    """

    def __init__(self, channels, embed_dim=512, attention="softmax", heads=8, attn_dim=128, map_size=8):
        super().__init__()
        if attention not in ATTENTION_KINDS:
            raise ArgumentError("unknown attention kind {!r}".format(attention))
        self.channels = channels
        self.embed_dim = embed_dim
        self.map_size = map_size
        self.attention_kind = attention
        self.query = nn.Sequential(nn.Linear(embed_dim, attn_dim), nn.LeakyReLU(0.2), nn.Linear(attn_dim, attn_dim))
        self.attention = ATTENTION_KINDS[attention](channels, attn_dim, heads)
        self.modulation = nn.Linear(attn_dim, 2 * channels + map_size * map_size)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, features, theta):
        if features.dim() != 4 or features.shape[1] != self.channels:
            raise ArgumentError("AST block expects {} channels, got {}".format(self.channels, tuple(features.shape)))
        theta = _check_theta(theta, self.embed_dim, features.shape[0])
        query = self.query(theta)
        context = query + self.attention(query, features)
        params = self.modulation(context)
        c = self.channels
        gamma = 1.0 + params[:, :c]
        delta = params[:, c:2 * c]
        low_res = params[:, 2 * c:].view(-1, 1, self.map_size, self.map_size)
        spatial_map = F.interpolate(low_res, size=features.shape[-2:], mode="bilinear", align_corners=False)
        return spatial_adain(features, gamma, delta, spatial_map)


class AdaINBlock(nn.Module):
    """Global AdaIN: an MLP maps the style to per-channel gamma/delta, no attention."""

    def __init__(self, channels, embed_dim=512, hidden=128):
        super().__init__()
        self.channels = channels
        self.embed_dim = embed_dim
        self.mlp = nn.Sequential(nn.Linear(embed_dim, hidden), nn.LeakyReLU(0.2))
        self.modulation = nn.Linear(hidden, 2 * channels)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, features, theta):
        if features.dim() != 4 or features.shape[1] != self.channels:
            raise ArgumentError("AdaIN block expects {} channels, got {}".format(self.channels, tuple(features.shape)))
        theta = _check_theta(theta, self.embed_dim, features.shape[0])
        params = self.modulation(self.mlp(theta))
        return spatial_adain(features, 1.0 + params[:, :self.channels], params[:, self.channels:])


def _conv(in_ch, out_ch, stride=1):
    return nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1), nn.LeakyReLU(0.2))


class StyleFusionDecoder(nn.Module):
    """U-Net over the anatomy map with a style block at the bottleneck and after every upsampling stage.

    Attributes:
        in_channels (int): Channels of the anatomy map
        widths (list): Feature width per level, finest first
        style_blocks (ModuleList): Bottleneck block first, then one per upsampling stage
    """

    def __init__(self, in_channels=16, base=64, depth=3, embed_dim=512, variant="ast",
                 bottleneck_heads=8, upsample_heads=4, attn_dim=128, map_size=8):
        super().__init__()
        if variant not in ("ast", "adain"):
            raise ArgumentError("decoder variant must be 'ast' or 'adain', got {!r}".format(variant))
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.variant = variant
        self.widths = [base * 2 ** i for i in range(depth + 1)]
        self.stem = _conv(in_channels, base)
        self.down = nn.ModuleList([
            nn.Sequential(_conv(self.widths[i], self.widths[i + 1], stride=2),
                          _conv(self.widths[i + 1], self.widths[i + 1]))
            for i in range(depth)
        ])
        self.up = nn.ModuleList([_conv(self.widths[i + 1], self.widths[i]) for i in reversed(range(depth))])
        self.merge = nn.ModuleList([_conv(2 * self.widths[i], self.widths[i]) for i in reversed(range(depth))])

        def style_block(channels, attention, heads):
            if variant == "adain":
                return AdaINBlock(channels, embed_dim, attn_dim)
            return ASTBlock(channels, embed_dim, attention, heads, attn_dim, map_size)

        blocks = [style_block(self.widths[depth], "softmax", bottleneck_heads)]
        blocks += [style_block(self.widths[i], "linear", upsample_heads) for i in reversed(range(depth))]
        self.style_blocks = nn.ModuleList(blocks)
        self.out = nn.Conv2d(base, 1, 1)

    @property
    def ast_count(self):
        return len(self.style_blocks)

    def forward(self, beta, theta):
        if beta.dim() == 3:
            beta = beta[None]
        if beta.dim() != 4 or beta.shape[1] != self.in_channels:
            raise ArgumentError("decoder expects a [B, {}, H, W] anatomy map, got {}".format(
                self.in_channels, tuple(beta.shape)))
        h = self.stem(beta)
        skips = [h]
        for block in self.down:
            h = block(h)
            skips.append(h)
        skips.pop()
        h = self.style_blocks[0](h, theta)
        for up, merge, style in zip(self.up, self.merge, self.style_blocks[1:]):
            skip = skips.pop()
            h = up(F.interpolate(h, size=skip.shape[-2:], mode="nearest"))
            h = style(merge(torch.cat([h, skip], dim=1)), theta)
        return torch.sigmoid(self.out(h))
