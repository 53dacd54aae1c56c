"""
Multi-scale encoder-decoder denoiser with timestep conditioning,
self-attention, and skip connections, plus the head swap that turns a
1-channel noise predictor into an N-channel landmark-heatmap predictor.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict, replace
from typing import Optional

import torch
import torch.nn as nn

GROUP_NORM_GROUPS = 8


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 256
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 4, 8)
    res_blocks_per_level: int = 4
    attention_resolution: int = 32
    attention_heads: int = 4
    timestep_conditioning: bool = True

    def validate(self) -> None:
        levels = len(self.channel_multipliers)
        if levels == 0:
            raise ValueError("channel_multipliers must be non-empty")
        if self.image_size % (2 ** (levels - 1)) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by "
                f"2^{levels - 1} for {levels} levels"
            )
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if self.base_channels % GROUP_NORM_GROUPS != 0:
            raise ValueError(
                f"base_channels must be a multiple of {GROUP_NORM_GROUPS}"
            )
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.attention_heads != 0:
                raise ValueError(
                    "channel width must be divisible by attention_heads"
                )
        if self.res_blocks_per_level < 1:
            raise ValueError("res_blocks_per_level must be >= 1")

    @property
    def time_embed_dim(self) -> int:
        return 4 * self.base_channels

    def to_json(self) -> str:
        d = asdict(self)
        d["channel_multipliers"] = list(d["channel_multipliers"])
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(s: str) -> "NetworkConfig":
        d = json.loads(s)
        d["channel_multipliers"] = tuple(d["channel_multipliers"])
        return NetworkConfig(**d)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal position embedding of the timestep, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    ).to(t.device)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(GROUP_NORM_GROUPS, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        # two-layer projection of the shared sinusoidal embedding
        self.time_proj = nn.Sequential(
            nn.Linear(time_dim, out_ch),
            nn.SiLU(),
            nn.Linear(out_ch, out_ch),
        )
        self.norm2 = nn.GroupNorm(GROUP_NORM_GROUPS, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.act = nn.SiLU()
        self.skip = (
            nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        )

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(emb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Multi-head self-attention over spatial positions, with residual."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(GROUP_NORM_GROUPS, channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x))
        q, k, v = qkv.reshape(b, 3, self.heads, c // self.heads, h * w).unbind(1)
        scale = (c // self.heads) ** -0.5
        attn = torch.softmax(q.transpose(-2, -1) @ k * scale, dim=-1)
        out = (v @ attn.transpose(-2, -1)).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class DenoisingUNet(nn.Module):
    """U-Net predicting per-pixel outputs at the input resolution.

    Self-attention is inserted once per level whose feature-map side
    equals `attention_resolution`, on both the down and up paths. When
    `timestep_conditioning` is off the conditioning signal is the
    all-zeros embedding vector, making the forward pass independent of
    any supplied timestep.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        levels = len(config.channel_multipliers)
        widths = [config.base_channels * m for m in config.channel_multipliers]
        sides = [config.image_size // (2 ** i) for i in range(levels)]
        time_dim = config.time_embed_dim

        self.in_conv = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = widths[0]
        skip_chs = [ch]
        for i in range(levels):
            blocks = nn.ModuleList()
            for _ in range(config.res_blocks_per_level):
                blocks.append(ResidualBlock(ch, widths[i], time_dim))
                ch = widths[i]
                skip_chs.append(ch)
            self.down_blocks.append(blocks)
            self.down_attn.append(
                AttentionBlock(ch, config.attention_heads)
                if sides[i] == config.attention_resolution
                else nn.Identity()
            )
            if i < levels - 1:
                self.downsamples.append(Downsample(ch))
                skip_chs.append(ch)
            else:
                self.downsamples.append(nn.Identity())

        self.mid_block1 = ResidualBlock(ch, ch, time_dim)
        self.mid_block2 = ResidualBlock(ch, ch, time_dim)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(levels)):
            blocks = nn.ModuleList()
            for _ in range(config.res_blocks_per_level + 1):
                blocks.append(ResidualBlock(ch + skip_chs.pop(), widths[i], time_dim))
                ch = widths[i]
            self.up_blocks.append(blocks)
            self.up_attn.append(
                AttentionBlock(ch, config.attention_heads)
                if sides[i] == config.attention_resolution
                else nn.Identity()
            )
            self.upsamples.append(Upsample(ch) if i > 0 else nn.Identity())

        self.out_norm = nn.GroupNorm(GROUP_NORM_GROUPS, widths[0])
        self.out_act = nn.SiLU()
        self.out_conv = nn.Conv2d(widths[0], config.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: Optional[torch.Tensor] = None) -> torch.Tensor:
        cfg = self.config
        if x.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(
                f"expected {cfg.image_size}x{cfg.image_size} input, "
                f"got {tuple(x.shape[-2:])}"
            )
        if cfg.timestep_conditioning:
            if t is None:
                raise ValueError("timestep required when conditioning is enabled")
            if isinstance(t, int):
                t = torch.full((x.shape[0],), t, dtype=torch.long)
            emb = sinusoidal_embedding(t, cfg.time_embed_dim).to(x.dtype)
        else:
            emb = torch.zeros(x.shape[0], cfg.time_embed_dim, dtype=x.dtype)

        h = self.in_conv(x)
        skips = [h]
        for blocks, attn, down in zip(self.down_blocks, self.down_attn, self.downsamples):
            for block in blocks:
                h = block(h, emb)
                skips.append(h)
            h = attn(h)
            skips[-1] = h
            if not isinstance(down, nn.Identity):
                h = down(h)
                skips.append(h)

        h = self.mid_block1(h, emb)
        h = self.mid_block2(h, emb)

        for blocks, attn, up in zip(self.up_blocks, self.up_attn, self.upsamples):
            for block in blocks:
                h = block(torch.cat([h, skips.pop()], dim=1), emb)
            h = attn(h)
            if not isinstance(up, nn.Identity):
                h = up(h)

        return self.out_conv(self.out_act(self.out_norm(h)))


def build_network(config: NetworkConfig) -> DenoisingUNet:
    config.validate()
    return DenoisingUNet(config)


FINAL_LAYER_PREFIX = "out_conv."


def convert_to_detector(
    net: DenoisingUNet, num_landmarks: int, generator: Optional[torch.Generator] = None
) -> DenoisingUNet:
    """Head swap: copy every weight except the final conv, which is
    reinitialized with `num_landmarks` output channels (normal, std 1e-3,
    zero bias). The returned network runs in null-timestep mode.
    """
    if net.config.out_channels != 1:
        raise ValueError(
            f"source network must be a 1-channel denoiser, "
            f"has out_channels={net.config.out_channels}"
        )
    if num_landmarks < 1:
        raise ValueError("num_landmarks must be >= 1")
    det_config = replace(
        net.config, out_channels=num_landmarks, timestep_conditioning=False
    )
    detector = DenoisingUNet(det_config)
    state = {
        k: v.clone()
        for k, v in net.state_dict().items()
        if not k.startswith(FINAL_LAYER_PREFIX)
    }
    missing = detector.load_state_dict(state, strict=False)
    unexpected = [k for k in missing.missing_keys if not k.startswith(FINAL_LAYER_PREFIX)]
    if unexpected or missing.unexpected_keys:
        raise ValueError(f"incompatible source weights: {unexpected + missing.unexpected_keys}")
    with torch.no_grad():
        detector.out_conv.weight.normal_(0.0, 1e-3, generator=generator)
        detector.out_conv.bias.zero_()
    return detector


def parameter_count(config: NetworkConfig) -> int:
    return sum(p.numel() for p in DenoisingUNet(config).parameters())
