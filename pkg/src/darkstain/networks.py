"""Trainable networks: student generators, teacher colorizer, the critic pair,
and a fixed convolutional embedder used by perceptual losses and metrics.

All builders take an explicit seed and draw initial weights from a dedicated
torch.Generator, so two builds with the same seed have bit-identical
parameters.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch
import torch.nn as nn

from .errors import MissingArtifactError

ARCH_TAGS = ("resnet9", "eg-unet")

CHECKPOINT_FORMAT = "darkstain-ckpt-v1"


def _norm(channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            _norm(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            _norm(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Residual-block translator: 7x7 stem, two stride-2 downsamplings, nine
    residual blocks, two stride-1/2 upsamplings, 7x7 head. Output is squashed
    into [0, 1] with a scaled tanh. Fully convolutional for multiple-of-4
    input sizes."""

    arch_tag = "resnet9"

    def __init__(self, in_ch: int = 1, out_ch: int = 3, base_width: int = 64, n_blocks: int = 9):
        super().__init__()
        w = base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_ch, w, 7),
            _norm(w),
            nn.ReLU(inplace=True),
        ]
        for _ in range(2):
            layers += [
                nn.Conv2d(w, w * 2, 3, stride=2, padding=1),
                _norm(w * 2),
                nn.ReLU(inplace=True),
            ]
            w *= 2
        layers += [ResidualBlock(w) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(w, w // 2, 3, stride=2, padding=1, output_padding=1),
                _norm(w // 2),
                nn.ReLU(inplace=True),
            ]
            w //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, out_ch, 7)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return (torch.tanh(self.model(x)) + 1.0) / 2.0


class UNetGenerator(nn.Module):
    """Encoder-decoder with skip connections and strided down/upsampling.

    depth=4 is the teacher colorizer layout; depth=2 is the attention-free
    U-Net student variant (same /4 spatial contract as the residual student).
    The innermost stage carries no normalization: at small input sizes its
    map collapses to 1x1 where instance statistics are degenerate.
    """

    def __init__(self, in_ch: int = 1, out_ch: int = 3, base_width: int = 32, depth: int = 4):
        super().__init__()
        self.depth = depth
        widths = [min(base_width * (2 ** d), base_width * 8) for d in range(depth + 1)]
        self.stem = nn.Sequential(
            nn.Conv2d(in_ch, widths[0], 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.downs = nn.ModuleList()
        for d in range(depth):
            inner = d == depth - 1
            block = [nn.Conv2d(widths[d], widths[d + 1], 4, stride=2, padding=1)]
            if not inner:
                block.append(_norm(widths[d + 1]))
            block.append(nn.LeakyReLU(0.2, inplace=True))
            self.downs.append(nn.Sequential(*block))
        self.bottleneck = nn.Sequential(
            nn.Conv2d(widths[depth], widths[depth], 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.ups = nn.ModuleList()
        self.fuses = nn.ModuleList()
        for d in reversed(range(depth)):
            self.ups.append(
                nn.Sequential(
                    nn.ConvTranspose2d(widths[d + 1], widths[d], 4, stride=2, padding=1),
                    _norm(widths[d]),
                    nn.ReLU(inplace=True),
                )
            )
            self.fuses.append(
                nn.Sequential(
                    nn.Conv2d(widths[d] * 2, widths[d], 3, padding=1),
                    _norm(widths[d]),
                    nn.ReLU(inplace=True),
                )
            )
        self.head = nn.Conv2d(widths[0], out_ch, 3, padding=1)

    def forward(self, x):
        h = self.stem(x)
        skips = [h]
        for down in self.downs:
            h = down(h)
            skips.append(h)
        h = self.bottleneck(h)
        for up, fuse, skip in zip(self.ups, self.fuses, reversed(skips[:-1])):
            h = up(h)
            h = fuse(torch.cat([h, skip], dim=1))
        return (torch.tanh(self.head(h)) + 1.0) / 2.0


class PatchDiscriminator(nn.Module):
    """70x70-receptive-field patch critic emitting a real-valued score map."""

    def __init__(self, in_ch: int = 3, base_width: int = 64):
        super().__init__()
        w = base_width
        # the stride-1 tail pads asymmetrically so it preserves spatial size,
        # which keeps small crops (down to 16x16 inputs) usable
        self.model = nn.Sequential(
            nn.Conv2d(in_ch, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, w * 2, 4, stride=2, padding=1),
            _norm(w * 2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w * 2, w * 4, 4, stride=2, padding=1),
            _norm(w * 4),
            nn.LeakyReLU(0.2, inplace=True),
            nn.ZeroPad2d((1, 0, 1, 0)),
            nn.Conv2d(w * 4, w * 8, 4, stride=1, padding=1),
            _norm(w * 8),
            nn.LeakyReLU(0.2, inplace=True),
            nn.ZeroPad2d((1, 0, 1, 0)),
            nn.Conv2d(w * 8, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.model(x)


class DiscriminatorPair(nn.Module):
    """Global critic over full images plus a local critic over random crops."""

    def __init__(self, patch_count: int = 5, patch_size: int = 64, base_width: int = 64, in_ch: int = 3):
        super().__init__()
        if patch_count < 1:
            raise ValueError(f"patch_count must be >= 1, got {patch_count}")
        if patch_size < 16:
            raise ValueError(f"patch_size must be >= 16, got {patch_size}")
        self.patch_count = patch_count
        self.patch_size = patch_size
        self.global_d = PatchDiscriminator(in_ch, base_width)
        self.local_d = PatchDiscriminator(in_ch, base_width)

    def sample_crops(self, images: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        """patch_count random crops, each taken from a random batch element.
        Requires the patch size to divide the image size."""
        n, _, h, w = images.shape
        p = self.patch_size
        if h % p != 0 or w % p != 0:
            raise ValueError(f"patch size {p} must divide image size {h}x{w}")
        if p > h or p > w:
            raise ValueError(f"patch size {p} exceeds image size {h}x{w}")
        crops = []
        for _ in range(self.patch_count):
            b = int(torch.randint(0, n, (1,), generator=generator))
            y = int(torch.randint(0, h - p + 1, (1,), generator=generator))
            x = int(torch.randint(0, w - p + 1, (1,), generator=generator))
            crops.append(images[b : b + 1, :, y : y + p, x : x + p])
        return torch.cat(crops, dim=0)


class ConvEmbedder(nn.Module):
    """Fixed-weight convolutional feature extractor.

    Five conv/pool stages with a tap after each activation, plus one deeper
    conv after the fifth pooling; the deep tap feeds the perceptual content
    loss and the pooled feature vectors used by the distribution metrics.
    Weights are random but seed-pinned, so every derived quantity is
    deterministic without any external download; externally trained weights
    can be loaded over the same layout.
    """

    stage_widths = (16, 32, 48, 64, 64)
    layer_tag = "conv-after-pool5"

    def __init__(self, in_ch: int = 3):
        super().__init__()
        w_in = in_ch
        stages = []
        for w_out in self.stage_widths:
            stages.append(nn.Sequential(nn.Conv2d(w_in, w_out, 3, padding=1), nn.ReLU(inplace=True)))
            w_in = w_out
        self.stages = nn.ModuleList(stages)
        self.pool = nn.AvgPool2d(2)
        self.deep = nn.Sequential(nn.Conv2d(w_in, 64, 3, padding=1), nn.ReLU(inplace=True))
        for p in self.parameters():
            p.requires_grad_(False)

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage activation maps (before pooling)."""
        out = []
        h = x
        for stage in self.stages:
            h = stage(h)
            out.append(h)
            h = self.pool(h)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Deep feature map: the conv applied after the fifth pooling."""
        if x.shape[-1] < 32 or x.shape[-2] < 32:
            raise ValueError(f"embedder needs inputs of at least 32x32, got {tuple(x.shape[-2:])}")
        h = x
        for stage in self.stages:
            h = self.pool(stage(h))
        return self.deep(h)


def _init_gan_weights(module: nn.Module, generator: torch.Generator) -> None:
    # Deterministic module order; convolution weights ~ N(0, 0.02).
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def _init_embedder_weights(module: nn.Module, generator: torch.Generator) -> None:
    # He-style scaling keeps activation magnitude stable through depth, which
    # a N(0, 0.02) init would not at fixed (non-trained) weights.
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def build_generator(arch_tag: str = "resnet9", seed: int = 0, base_width: int = 64) -> nn.Module:
    if arch_tag not in ARCH_TAGS:
        raise ValueError(f"unknown generator arch_tag {arch_tag!r}; expected one of {ARCH_TAGS}")
    g = torch.Generator().manual_seed(seed)
    if arch_tag == "resnet9":
        net = ResnetGenerator(base_width=base_width)
    else:
        net = UNetGenerator(base_width=base_width, depth=2)
    net.arch_tag = arch_tag
    _init_gan_weights(net, g)
    return net


def build_teacher(seed: int = 0, base_width: int = 32) -> UNetGenerator:
    g = torch.Generator().manual_seed(seed)
    net = UNetGenerator(base_width=base_width, depth=4)
    net.arch_tag = "unet-teacher"
    _init_gan_weights(net, g)
    return net


def build_discriminators(patch_count: int = 5, patch_size: int = 64, seed: int = 0,
                         base_width: int = 64) -> DiscriminatorPair:
    g = torch.Generator().manual_seed(seed)
    pair = DiscriminatorPair(patch_count=patch_count, patch_size=patch_size, base_width=base_width)
    _init_gan_weights(pair, g)
    return pair


def build_embedder(seed: int = 0) -> ConvEmbedder:
    g = torch.Generator().manual_seed(seed)
    net = ConvEmbedder()
    _init_embedder_weights(net, g)
    net.eval()
    return net


def state_checksum(state_dict: dict) -> str:
    """SHA-256 over parameter names, dtypes, shapes, and raw little-endian bytes."""
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, kind: str, states: dict[str, dict], meta: dict) -> None:
    """Self-describing checkpoint container: named state dicts plus metadata
    (architecture tag, seed, config hash, progress counters)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "meta": dict(meta),
        "states": states,
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"no such checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    return payload
