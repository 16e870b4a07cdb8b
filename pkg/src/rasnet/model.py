"""RASNet: ResNet-50 encoder, attention-fused skips, deconvolution decoder."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
import torchvision
from torch import nn

from .errors import ConfigError, ShapeError, WeightLoadError

ENCODER_CHANNELS = (256, 512, 1024, 2048)
OUTPUT_STRIDE = 32


@dataclass
class ModelConfig:
    num_classes: int = 8
    use_afm: bool = True
    encoder_init: str = "random"
    encoder_weights: Optional[str] = None
    decoder_channels: tuple = (1024, 512, 256, 64)

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if self.num_classes < 1:
            raise ConfigError("num_classes", "must be >= 1")
        if self.encoder_init not in ("pretrained", "random"):
            raise ConfigError("encoder_init", "must be 'pretrained' or 'random'")
        if len(self.decoder_channels) != 4:
            raise ConfigError("decoder_channels", "needs exactly 4 entries")
        if any(c <= 0 for c in self.decoder_channels):
            raise ConfigError("decoder_channels", "entries must be positive")
        # skip fusion adds decoder output to the encoder stage, so widths must line up
        if self.decoder_channels[:3] != ENCODER_CHANNELS[2::-1]:
            raise ConfigError(
                "decoder_channels",
                f"first three entries must equal the skip widths {ENCODER_CHANNELS[2::-1]}",
            )

    def to_dict(self):
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    def digest(self):
        """Hash of the fields that determine parameter shapes and topology."""
        topo = {k: v for k, v in self.to_dict().items() if k not in ("encoder_init", "encoder_weights")}
        return hashlib.sha256(json.dumps(topo, sort_keys=True).encode()).hexdigest()[:16]


def conv_bn(in_ch, out_ch, kernel_size=1):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """ResNet-50 trunk returning the four stage outputs (strides 4, 8, 16, 32)."""

    def __init__(self):
        super().__init__()
        r = torchvision.models.resnet50(weights=None)
        self.conv1, self.bn1, self.relu, self.maxpool = r.conv1, r.bn1, r.relu, r.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = r.layer1, r.layer2, r.layer3, r.layer4

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        e1 = self.layer1(x)
        e2 = self.layer2(e1)
        e3 = self.layer3(e2)
        e4 = self.layer4(e3)
        return [e1, e2, e3, e4]


def load_resnet50_weights(encoder: Encoder, path):
    """Copy an ImageNet ResNet-50 state dict (torchvision key layout) into ``encoder``.

    The classifier (``fc.*``) entries are dropped. Any other missing or
    mismatched tensor is an error; we never fall back to random weights.
    """
    path = Path(path) if path is not None else None
    if path is None or not path.is_file():
        raise WeightLoadError(f"pretrained encoder weights not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise WeightLoadError(f"cannot read pretrained encoder weights {path}: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise WeightLoadError(f"{path} does not hold a state dict")
    state = {k.removeprefix("module."): v for k, v in state.items() if not k.startswith("fc.")}
    try:
        encoder.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise WeightLoadError(f"{path} is not a ResNet-50 checkpoint: {exc}") from exc


def build_encoder(config: ModelConfig) -> Encoder:
    enc = Encoder()
    if config.encoder_init == "pretrained":
        load_resnet50_weights(enc, config.encoder_weights)
    return enc


class AttentionFusion(nn.Module):
    """Gate low-level features with a channel softmax computed from high-level context.

    ``out = low * softmax(BN(conv1x1(GAP(high)))) + high``. The weight vector is
    sized to ``low``'s channels, so ``high`` must already carry that many.
    """

    def __init__(self, high_channels, low_channels):
        super().__init__()
        self.low_channels = low_channels
        self.conv = nn.Conv2d(high_channels, low_channels, 1, bias=True)
        self.bn = nn.BatchNorm2d(low_channels)
        self.last_weights = None

    def attention(self, high):
        z = self.conv(F.adaptive_avg_pool2d(high, 1))
        if self.training and z.shape[0] == 1:
            # one value per channel: batch variance is undefined, use running stats
            z = F.batch_norm(z, self.bn.running_mean, self.bn.running_var,
                             self.bn.weight, self.bn.bias, False, 0.0, self.bn.eps)
        else:
            z = self.bn(z)
        return torch.softmax(z, dim=1)

    def forward(self, low, high):
        if low.shape[-2:] != high.shape[-2:]:
            raise ShapeError(f"AFM spatial mismatch: low {tuple(low.shape)} vs high {tuple(high.shape)}")
        if low.shape[1] != self.low_channels or high.shape[1] != self.low_channels:
            raise ShapeError(
                f"AFM expects {self.low_channels} channels on both inputs, "
                f"got low={low.shape[1]} high={high.shape[1]}"
            )
        w = self.attention(high)
        self.last_weights = w.detach()
        return low * w + high


class PlainFusion(nn.Module):
    """Ablation stand-in for :class:`AttentionFusion`: ``low + high``."""

    def forward(self, low, high):
        if low.shape != high.shape:
            raise ShapeError(f"skip fusion shape mismatch: {tuple(low.shape)} vs {tuple(high.shape)}")
        return low + high


class DecoderBlock(nn.Module):
    """1x1 conv reduce -> 4x4 stride-2 deconv -> 1x1 conv, each followed by BN.

    The first two stages also apply ReLU; the output projection is left
    linear. With ``zero_init=True`` the output BN scale starts at 0, so a
    block feeding a skip fusion initially contributes nothing and the fused
    map starts out as the (attention-weighted) skip alone.
    """

    def __init__(self, in_channels, out_channels, zero_init=False):
        super().__init__()
        if out_channels <= 0 or in_channels <= 0:
            raise ConfigError("out_channels", f"must be positive, got {out_channels}")
        mid = max(in_channels // 4, 1)
        self.reduce = conv_bn(in_channels, mid)
        # k=4, s=2, p=1 gives exactly 2*H for every H
        self.up = nn.Sequential(
            nn.ConvTranspose2d(mid, mid, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
        )
        self.expand = nn.Sequential(nn.Conv2d(mid, out_channels, 1, bias=False), nn.BatchNorm2d(out_channels))
        if zero_init:
            nn.init.zeros_(self.expand[1].weight)

    def forward(self, x):
        return self.expand(self.up(self.reduce(x)))


def decoder_block(x, out_channels):
    """Functional form: run a freshly initialised :class:`DecoderBlock` on ``x``."""
    return DecoderBlock(x.shape[1], out_channels).to(x)(x)


class RASNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.encoder = build_encoder(config)
        c = config.decoder_channels
        # deepest first: /32 -> /16 -> /8 -> /4 with skips, then /4 -> /2 -> /1 without
        self.decoders = nn.ModuleList([
            DecoderBlock(ENCODER_CHANNELS[3], c[0], zero_init=True),
            DecoderBlock(c[0], c[1], zero_init=True),
            DecoderBlock(c[1], c[2], zero_init=True),
            DecoderBlock(c[2], c[3]),
            DecoderBlock(c[3], c[3]),
        ])
        fusions = []
        for low_ch in ENCODER_CHANNELS[2::-1]:
            fusions.append(AttentionFusion(low_ch, low_ch) if config.use_afm else PlainFusion())
        self.fusions = nn.ModuleList(fusions)
        self.classifier = nn.Conv2d(c[3], config.num_classes, 1)

    def forward(self, images):
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected [B,3,H,W] images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise ShapeError(f"height and width must be divisible by {OUTPUT_STRIDE}, got {h}x{w}")
        e1, e2, e3, e4 = self.encoder(images)
        x = e4
        for dec, fuse, skip in zip(self.decoders, self.fusions, (e3, e2, e1)):
            x = fuse(skip, dec(x))
        x = self.decoders[4](self.decoders[3](x))
        return self.classifier(x)

    def attention_weights(self):
        """Weight vectors from the most recent forward pass, deepest fusion first."""
        return [f.last_weights for f in self.fusions if isinstance(f, AttentionFusion)]


def build_model(config: ModelConfig | None = None, seed: int | None = None) -> RASNet:
    if seed is not None:
        torch.manual_seed(seed)
    return RASNet(config)
