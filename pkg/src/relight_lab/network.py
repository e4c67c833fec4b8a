"""Conditional UNet predicting the noise component of the diffused target.

The 9 input channels are [x_t, input portrait, LDR env]; the first
convolution's weights over the 6 condition channels start at exactly zero so
an untrained model ignores the conditions. Timestep information enters through
a sinusoidal embedding; discrete attribute labels are embedded per vocabulary
(with a dedicated learned null row for the dropped state) and summed into the
timestep embedding inside every residual block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import PackedInput
from .errors import InvalidConfig, LabelOutOfRange, ShapeMismatch

_GROUPS = 8


@dataclass
class UNetConfig:
    in_channels: int = 9
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    attention_at_lowest: bool = True
    label_vocab_sizes: tuple = (10, 4)
    embed_dim: int = 128
    resolution: int = 64

    def validate(self):
        if self.in_channels != 9:
            raise InvalidConfig(f"in_channels must be 9, got {self.in_channels}")
        levels = len(self.channel_mults)
        if levels < 1:
            raise InvalidConfig("channel_mults must be nonempty")
        down = 2 ** (levels - 1)
        if self.resolution % down != 0:
            raise InvalidConfig(
                f"resolution {self.resolution} not divisible by {down}"
            )
        if self.base_channels % _GROUPS != 0:
            raise InvalidConfig(f"base_channels must be a multiple of {_GROUPS}")
        if self.embed_dim % 2 != 0:
            raise InvalidConfig("embed_dim must be even")
        if not self.label_vocab_sizes:
            raise InvalidConfig("label_vocab_sizes must be nonempty")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "attention_at_lowest": self.attention_at_lowest,
            "label_vocab_sizes": list(self.label_vocab_sizes),
            "embed_dim": self.embed_dim,
            "resolution": self.resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(
            in_channels=d["in_channels"],
            base_channels=d["base_channels"],
            channel_mults=tuple(d["channel_mults"]),
            attention_at_lowest=d["attention_at_lowest"],
            label_vocab_sizes=tuple(d["label_vocab_sizes"]),
            embed_dim=d["embed_dim"],
            resolution=d["resolution"],
        )


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(t.device)
    args = t.double()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, embed_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_GROUPS, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(embed_dim, cout)
        self.norm2 = nn.GroupNorm(_GROUPS, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_GROUPS, channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class ConditionalUNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        e = config.embed_dim
        dims = [config.base_channels * m for m in config.channel_mults]
        levels = len(dims)

        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        # one extra row per vocabulary: the learned null (dropped-label) state
        self.label_embs = nn.ModuleList(
            [nn.Embedding(v + 1, e) for v in config.label_vocab_sizes]
        )

        self.stem = nn.Conv2d(config.in_channels, dims[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        cin = dims[0]
        for i, d in enumerate(dims):
            self.down_blocks.append(nn.ModuleList([ResBlock(cin, d, e), ResBlock(d, d, e)]))
            cin = d
            if i < levels - 1:
                self.downsamples.append(nn.Conv2d(d, d, 3, stride=2, padding=1))

        self.mid1 = ResBlock(dims[-1], dims[-1], e)
        self.mid_attn = SelfAttention(dims[-1]) if config.attention_at_lowest else None
        self.mid2 = ResBlock(dims[-1], dims[-1], e)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        cur = dims[-1]
        for i in reversed(range(levels)):
            self.up_blocks.append(nn.ModuleList([
                ResBlock(cur + dims[i], dims[i], e), ResBlock(dims[i], dims[i], e)
            ]))
            cur = dims[i]
            if i > 0:
                self.upsamples.append(nn.Conv2d(dims[i], dims[i - 1], 3, padding=1))
                cur = dims[i - 1]

        self.out_norm = nn.GroupNorm(_GROUPS, dims[0])
        self.out_conv = nn.Conv2d(dims[0], 3, 3, padding=1)

        with torch.no_grad():
            self.stem.weight[:, 3:, :, :].zero_()

    def _label_embedding(self, label: torch.Tensor, dropped) -> torch.Tensor:
        if label.dim() != 2 or label.shape[1] != len(self.label_embs):
            raise ShapeMismatch(
                f"label shape {tuple(label.shape)} != (B, {len(self.label_embs)})"
            )
        total = 0.0
        dropped = torch.as_tensor(dropped, dtype=torch.bool)
        if dropped.dim() == 0:
            dropped = dropped.expand(label.shape[0])
        for i, emb in enumerate(self.label_embs):
            vocab = emb.num_embeddings - 1
            idx = label[:, i]
            if torch.any(idx < 0) or torch.any(idx >= vocab):
                raise LabelOutOfRange(f"label column {i} outside [0, {vocab})")
            idx = torch.where(dropped, torch.full_like(idx, vocab), idx)
            total = total + emb(idx)
        return total

    def forward(self, packed: PackedInput, t: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        x = packed.channels
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatch(
                f"packed channels {tuple(x.shape)} != (B, {self.config.in_channels}, H, W)"
            )
        if x.shape[2] != self.config.resolution or x.shape[3] != self.config.resolution:
            raise ShapeMismatch(
                f"spatial size {x.shape[2:]} != config resolution {self.config.resolution}"
            )
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        emb = self.time_mlp(sinusoidal_embedding(t, self.config.embed_dim).to(x.dtype))
        emb = emb + self._label_embedding(label, packed.drop_flags.label_dropped).to(x.dtype)

        h = self.stem(x)
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            for blk in blocks:
                h = blk(h, emb)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)

        h = self.mid1(h, emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid2(h, emb)

        for i, blocks in enumerate(self.up_blocks):
            skip = skips[len(skips) - 1 - i]
            h = torch.cat([h, skip], dim=1)
            for blk in blocks:
                h = blk(h, emb)
            if i < len(self.upsamples):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[i](h)

        return self.out_conv(F.silu(self.out_norm(h)))


def init_model(config: UNetConfig, seed: int) -> ConditionalUNet:
    """Deterministic initialization; condition-channel stem weights are zero."""
    torch.manual_seed(seed)
    return ConditionalUNet(config)


def condition_channel_weights(model: ConditionalUNet) -> torch.Tensor:
    """First-layer weight slice over the 6 condition channels."""
    return model.stem.weight[:, 3:, :, :].detach()


def expected_param_count(config: UNetConfig) -> int:
    """Closed-form parameter count for the architecture above.

    conv k*k: k*k*cin*cout + cout; GroupNorm: 2c; Linear: cin*cout + cout;
    Embedding: rows*dim. Guards against silent architecture drift.
    """
    config.validate()
    e = config.embed_dim
    dims = [config.base_channels * m for m in config.channel_mults]
    levels = len(dims)

    def conv(k, cin, cout):
        return k * k * cin * cout + cout

    def gn(c):
        return 2 * c

    def linear(cin, cout):
        return cin * cout + cout

    def res(cin, cout):
        n = gn(cin) + conv(3, cin, cout) + linear(e, cout) + gn(cout) + conv(3, cout, cout)
        if cin != cout:
            n += conv(1, cin, cout)
        return n

    total = 2 * linear(e, e)                      # time MLP
    total += sum((v + 1) * e for v in config.label_vocab_sizes)
    total += conv(3, config.in_channels, dims[0])  # stem

    cin = dims[0]
    for i, d in enumerate(dims):
        total += res(cin, d) + res(d, d)
        cin = d
        if i < levels - 1:
            total += conv(3, d, d)                # downsample

    total += 2 * res(dims[-1], dims[-1])          # middle
    if config.attention_at_lowest:
        c = dims[-1]
        total += gn(c) + conv(1, c, 3 * c) + conv(1, c, c)

    cur = dims[-1]
    for i in reversed(range(levels)):
        total += res(cur + dims[i], dims[i]) + res(dims[i], dims[i])
        cur = dims[i]
        if i > 0:
            total += conv(3, dims[i], dims[i - 1])  # upsample conv
            cur = dims[i - 1]

    total += gn(dims[0]) + conv(3, dims[0], 3)    # output head
    return total
