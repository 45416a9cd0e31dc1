"""The multi-task white-balance network.

A shared convolutional encoder feeds a transformer middle block; three
decoders with skip connections produce the white-balanced image, the
achromatic weight map, and the edge map; a per-location MLP projection head
turns bottleneck feature maps into contrastive embeddings.

Tensor layout is channel-first with a batch dimension (B x C x H x W), the
torch convention. `to_network_input` converts the channel-last numpy images
used elsewhere in the package.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


def _scaled(count: int, multiplier: float) -> int:
    return max(1, int(round(count * multiplier)))


def _norm_groups(channels: int) -> int:
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs. width_multiplier rescales every channel count
    (including the projection head) for desk-scale runs."""

    input_size: int = 256
    base_channels: int = 64
    stage_channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    attention_heads: int = 8
    middle_blocks: int = 1
    projection_dim: int = 512
    width_multiplier: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if self.input_size < 16 or self.input_size % 16 != 0:
            raise ValueError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if len(self.stage_channels) != 4:
            raise ValueError(f"stage_channels must list 4 stages, got {len(self.stage_channels)}")
        if self.base_channels < 1 or any(c < 1 for c in self.stage_channels):
            raise ValueError("channel counts must be positive")
        if self.middle_blocks < 1:
            raise ValueError(f"middle_blocks must be at least 1, got {self.middle_blocks}")
        if self.projection_dim < 1:
            raise ValueError(f"projection_dim must be positive, got {self.projection_dim}")
        if not (self.width_multiplier > 0 and math.isfinite(self.width_multiplier)):
            raise ValueError(f"width_multiplier must be a positive real, got {self.width_multiplier}")
        if self.attention_heads < 1:
            raise ValueError(f"attention_heads must be at least 1, got {self.attention_heads}")
        bottleneck = self.scaled_stage_channels[3]
        if bottleneck % self.attention_heads != 0:
            raise ValueError(
                f"bottleneck width {bottleneck} is not divisible by {self.attention_heads} attention heads"
            )

    @property
    def scaled_base_channels(self) -> int:
        return _scaled(self.base_channels, self.width_multiplier)

    @property
    def scaled_stage_channels(self) -> tuple[int, int, int, int]:
        return tuple(_scaled(c, self.width_multiplier) for c in self.stage_channels)

    @property
    def scaled_projection_dim(self) -> int:
        return _scaled(self.projection_dim, self.width_multiplier)

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 16


@dataclass
class NetworkOutputs:
    """Forward-pass outputs, batch-first.

    wb_image: B x 3 x H x W in [0,1]; weight_map, edge_map: B x 1 x H x W in
    [0,1]; bottleneck_features: B x C x H/16 x W/16 (pre-projection).
    """

    wb_image: torch.Tensor
    weight_map: torch.Tensor
    edge_map: torch.Tensor
    bottleneck_features: torch.Tensor


class ResidualBlock(nn.Module):
    """Two 3x3 conv + group-norm layers with a (projected) skip, SiLU output."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(_norm_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(_norm_groups(out_channels), out_channels)
        self.act = nn.SiLU()
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(y + self.skip(x))


class SpatialSelfAttention(nn.Module):
    """Multi-head self-attention over flattened spatial tokens.

    Query/key/value maps come from depthwise 3x3 convolutions on the
    normalized feature map (convolutional token projection); the attended
    tokens are mixed back through a 1x1 convolution and added residually.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.to_q = nn.Conv2d(channels, channels, 3, padding=1, groups=channels, bias=False)
        self.to_k = nn.Conv2d(channels, channels, 3, padding=1, groups=channels, bias=False)
        self.to_v = nn.Conv2d(channels, channels, 3, padding=1, groups=channels, bias=False)
        self.to_out = nn.Conv2d(channels, channels, 1)
        # when set (by Network.attention_capture) each forward appends its
        # B x heads x tokens x tokens softmax weights here
        self.capture: list | None = None

    def forward(self, x):
        b, c, h, w = x.shape
        y = self.norm(x)
        d = c // self.heads

        def tokens(t):
            return t.reshape(b, self.heads, d, h * w).transpose(2, 3)

        q, k, v = tokens(self.to_q(y)), tokens(self.to_k(y)), tokens(self.to_v(y))
        attn = torch.softmax(q @ k.transpose(2, 3) / math.sqrt(d), dim=-1)
        if self.capture is not None:
            self.capture.append(attn.detach())
        out = (attn @ v).transpose(2, 3).reshape(b, c, h, w)
        return x + self.to_out(out)


class MiddleBlock(nn.Module):
    """Two residual blocks, then normalized convolutional-projection
    self-attention with a residual connection back to the spatial map."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.res1 = ResidualBlock(channels, channels)
        self.res2 = ResidualBlock(channels, channels)
        self.attention = SpatialSelfAttention(channels, heads)

    def forward(self, x):
        return self.attention(self.res2(self.res1(x)))


class Encoder(nn.Module):
    """Stem plus 4 stages; each stage is a residual block followed by a
    strided-convolution downsample. Pre-downsample features are returned as
    skip inputs for the decoders."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        base = config.scaled_base_channels
        chans = config.scaled_stage_channels
        self.stem = nn.Conv2d(3, base, 3, padding=1)
        blocks, downs = [], []
        prev = base
        for c in chans:
            blocks.append(ResidualBlock(prev, c))
            downs.append(nn.Conv2d(c, c, 3, stride=2, padding=1, bias=False))
            prev = c
        self.blocks = nn.ModuleList(blocks)
        self.downs = nn.ModuleList(downs)

    def forward(self, x):
        x = self.stem(x)
        skips = []
        for block, down in zip(self.blocks, self.downs):
            x = block(x)
            skips.append(x)
            x = down(x)
        return x, skips


class Decoder(nn.Module):
    """4 stages of nearest-upsample + conv, skip concatenation, and a residual
    block, ending in a bounded single- or three-channel head."""

    def __init__(self, config: ModelConfig, out_channels: int):
        super().__init__()
        chans = config.scaled_stage_channels
        ups, blocks = [], []
        prev = chans[3]
        for skip_ch in reversed(chans):
            ups.append(nn.Conv2d(prev, skip_ch, 3, padding=1, bias=False))
            blocks.append(ResidualBlock(2 * skip_ch, skip_ch))
            prev = skip_ch
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(chans[0], out_channels, 3, padding=1)

    def forward(self, x, skips):
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = up(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))
            x = block(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


class ProjectionHead(nn.Module):
    """2-layer per-location MLP (1x1 convolutions), hidden and output widths
    both equal to the projection dimension."""

    def __init__(self, in_channels: int, projection_dim: int):
        super().__init__()
        self.fc1 = nn.Conv2d(in_channels, projection_dim, 1)
        self.act = nn.SiLU()
        self.fc2 = nn.Conv2d(projection_dim, projection_dim, 1)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class TransCC(nn.Module):
    """Shared encoder, transformer middle block(s), three task decoders, and
    the contrastive projection head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        chans = config.scaled_stage_channels
        self.encoder = Encoder(config)
        self.middle = nn.ModuleList(
            [MiddleBlock(chans[3], config.attention_heads) for _ in range(config.middle_blocks)]
        )
        self.wb_decoder = Decoder(config, 3)
        self.weight_decoder = Decoder(config, 1)
        self.edge_decoder = Decoder(config, 1)
        self.projection = ProjectionHead(chans[3], config.scaled_projection_dim)

    def _check_input(self, image: torch.Tensor):
        s = self.config.input_size
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2] != s or image.shape[3] != s:
            raise ValueError(f"expected input of shape Bx3x{s}x{s}, got {tuple(image.shape)}")

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Encoder plus middle block(s); returns the bottleneck feature map."""
        self._check_input(image)
        x, _ = self.encoder(image)
        for block in self.middle:
            x = block(x)
        return x

    def forward(self, image: torch.Tensor) -> NetworkOutputs:
        self._check_input(image)
        x, skips = self.encoder(image)
        for block in self.middle:
            x = block(x)
        return NetworkOutputs(
            wb_image=self.wb_decoder(x, skips),
            weight_map=self.weight_decoder(x, skips),
            edge_map=self.edge_decoder(x, skips),
            bottleneck_features=x,
        )

    @contextmanager
    def attention_capture(self):
        """Collect attention weights from every forward run inside the block."""
        captured: list = []
        mods = [m for m in self.modules() if isinstance(m, SpatialSelfAttention)]
        for m in mods:
            m.capture = captured
        try:
            yield captured
        finally:
            for m in mods:
                m.capture = None


def project_features(net: TransCC, features: torch.Tensor) -> torch.Tensor:
    """Per-location contrastive embedding of a bottleneck feature map
    ((B x) C x h x w in, (B x) projection_dim x h x w out)."""
    expected = net.config.scaled_stage_channels[3]
    channel_dim = 0 if features.ndim == 3 else 1
    if features.ndim not in (3, 4) or features.shape[channel_dim] != expected:
        raise ValueError(
            f"expected {expected}-channel feature map, got shape {tuple(features.shape)}"
        )
    if features.ndim == 3:
        return net.projection(features.unsqueeze(0)).squeeze(0)
    return net.projection(features)


def encode_to_projection(net: TransCC, image: torch.Tensor) -> torch.Tensor:
    """Encoder -> middle block(s) -> projection head, no decoders.

    This is the path producing the contrastive embeddings z_i (input image),
    z_o (output image), and z_g (ground truth). Returns B x D x h x w.
    """
    return net.projection(net.encode(image))


def _init_parameters(net: nn.Module, gen: torch.Generator):
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = (m.in_channels // m.groups) * m.kernel_size[0] * m.kernel_size[1]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(m, nn.GroupNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)


def build_transcc(config: ModelConfig, rng) -> TransCC:
    """Construct the network with parameters drawn deterministically from rng
    (an int seed or a numpy Generator); identical rng gives bitwise-identical
    parameters regardless of global RNG state."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    net = TransCC(config)
    gen = torch.Generator()
    gen.manual_seed(int(rng.integers(0, 2**63 - 1)))
    _init_parameters(net, gen)
    return net


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def to_network_input(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Channel-last H x W x 3 numpy image to a 1 x 3 x H x W tensor."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype).permute(2, 0, 1).unsqueeze(0)
