"""Encoder backbone, projection head, and the three downstream network shapes.

The backbone is a small residual CNN: a full-resolution stem convolution
followed by `num_stages` stages (two residual blocks each, first block of a
stage downsamples by stride 2), then global average pooling. A 32x32 input
with widths (32, 64, 128) yields stage maps at 16^2, 8^2, 4^2 and a 128-dim
pooled vector; the paper-scale profile (256px, widths up to 2048, projection
512 -> 128) is expressible through the same config.

An `EncoderSet` holds the two query / two momentum encoders used by
contrastive pretraining. With weight sharing enabled (the default, and the
better-performing variant), the transverse and longitudinal encoders are the
*same object*, so equality of their outputs is structural.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DataError, ShapeError
from .layers import BatchNorm2d, Conv2d, Linear, Module, freeze_running_stats


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters; `fingerprint()` keys checkpoints."""

    input_size: int = 32
    in_channels: int = 1
    stage_widths: tuple[int, ...] = (32, 64, 128)
    blocks_per_stage: int = 2
    proj_hidden: int = 64
    proj_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if self.proj_dim < 2:
            raise ConfigError(f"EncoderConfig: projection output dim must be >= 2, got {self.proj_dim}")
        if self.input_size < 2 ** len(self.stage_widths):
            raise ConfigError(
                f"EncoderConfig: input_size {self.input_size} too small for "
                f"{len(self.stage_widths)} stride-2 stages")
        if not self.stage_widths:
            raise ConfigError("EncoderConfig: need at least one stage width")
        if self.blocks_per_stage < 1:
            raise ConfigError(f"EncoderConfig: blocks_per_stage must be >= 1, got {self.blocks_per_stage}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    @property
    def pooled_dim(self) -> int:
        return self.stage_widths[-1]

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "stage_widths": list(self.stage_widths),
            "blocks_per_stage": self.blocks_per_stage,
            "proj_hidden": self.proj_hidden,
            "proj_dim": self.proj_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown EncoderConfig fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "stage_widths" in kwargs:
            kwargs["stage_widths"] = tuple(kwargs["stage_widths"])
        return cls(**kwargs)

    def fingerprint(self) -> str:
        """sha256 of the canonical JSON encoding; changes iff a field changes."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def paper_scale(cls) -> "EncoderConfig":
        """256px profile with a 2048-dim pooled vector and 512 -> 128 projection."""
        return cls(input_size=256, in_channels=1, stage_widths=(256, 512, 1024, 2048),
                   blocks_per_stage=3, proj_hidden=512, proj_dim=128)


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

class ResidualBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, stride=1, padding=1)
        self.bn2 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng, stride=stride)
            self.proj_bn = BatchNorm2d(out_ch)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = ag.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return ag.relu(ag.add(h, skip))


class Backbone(Module):
    """Stem + residual stages + GAP. `forward` returns (stage maps, pooled)."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        w0 = config.stage_widths[0]
        self.stem_conv = Conv2d(config.in_channels, w0, 3, rng, stride=1, padding=1)
        self.stem_bn = BatchNorm2d(w0)
        self.stages = []
        in_ch = w0
        for width in config.stage_widths:
            blocks = [ResidualBlock(in_ch, width, stride=2, rng=rng)]
            for _ in range(config.blocks_per_stage - 1):
                blocks.append(ResidualBlock(width, width, stride=1, rng=rng))
            self.stages.append(blocks)
            in_ch = width

    def _children(self):
        # stages is a list of lists; flatten one extra level for traversal
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
                    elif isinstance(item, (list, tuple)):
                        for j, sub in enumerate(item):
                            if isinstance(sub, Module):
                                yield f"{name}.{i}.{j}", sub

    def forward(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        if x.ndim != 4:
            raise ShapeError(f"encode: need (N, C, H, W) input, got {x.shape}")
        n, c, h, w = x.shape
        want = (self.config.in_channels, self.config.input_size, self.config.input_size)
        if (c, h, w) != want:
            raise ShapeError(f"encode: input {x.shape} does not match configured {('N',) + want}")
        h0 = ag.relu(self.stem_bn(self.stem_conv(x)))
        maps = [h0]
        cur = h0
        for blocks in self.stages:
            for block in blocks:
                cur = block(cur)
            maps.append(cur)
        pooled = ag.global_avg_pool(cur)
        return maps, pooled

    def stage_names(self) -> list[str]:
        return ["stem"] + [f"stage{i + 1}" for i in range(len(self.stages))]


def encode(backbone: Backbone, images: Tensor) -> tuple[list[Tensor], Tensor]:
    """Run the backbone: per-stage spatial maps (stem first) plus pooled vector."""
    return backbone(images)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

class ProjectionHead(Module):
    """Two-layer MLP with ReLU hidden activation and L2-normalized output."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(in_dim, hidden_dim, rng)
        self.fc2 = Linear(hidden_dim, out_dim, rng)

    def forward(self, pooled: Tensor) -> Tensor:
        return ag.l2_normalize(self.fc2(ag.relu(self.fc1(pooled))))


def project(head: ProjectionHead, pooled: Tensor) -> Tensor:
    """Latent vector(s) of unit Euclidean norm (zero inputs stay zero, flagged)."""
    return head(pooled)


class ClassifierHead(Module):
    """One affine layer to 2 class logits."""

    def __init__(self, in_dim: int, rng: np.random.Generator, num_classes: int = 2):
        super().__init__()
        self.fc = Linear(in_dim, num_classes, rng)

    def forward(self, pooled: Tensor) -> Tensor:
        return self.fc(pooled)


def classify(head: ClassifierHead, pooled: Tensor) -> Tensor:
    return head(pooled)


class Encoder(Module):
    """Backbone + projection head; `latents()` is the pretraining forward."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config, rng)
        self.projection = ProjectionHead(config.pooled_dim, config.proj_hidden, config.proj_dim, rng)

    def forward(self, images: Tensor) -> Tensor:
        _, pooled = self.backbone(images)
        return self.projection(pooled)

    def latents(self, images: Tensor) -> Tensor:
        return self.forward(images)


# ---------------------------------------------------------------------------
# encoder set (query/momentum pairs for the two views)
# ---------------------------------------------------------------------------

@dataclass
class EncoderSet:
    """The four pretraining encoders.

    With share_query, f_q and g_q are one object (single storage); likewise
    share_momentum for f_m/g_m. All four start from identical weights; the
    momentum copies never require grad and never track their own BN stats
    (their buffers evolve only through the EMA update).
    """

    config: EncoderConfig
    f_q: Encoder
    g_q: Encoder
    f_m: Encoder
    g_m: Encoder
    share_query: bool = True
    share_momentum: bool = True

    @classmethod
    def build(cls, config: EncoderConfig, seed: int = 0,
              share_query: bool = True, share_momentum: bool = True) -> "EncoderSet":
        rng = np.random.default_rng([int(seed), 0x5eed])
        f_q = Encoder(config, rng)
        g_q = f_q if share_query else copy.deepcopy(f_q)
        f_m = copy.deepcopy(f_q)
        g_m = f_m if share_momentum else copy.deepcopy(f_m)
        momentum_encoders = {id(f_m): f_m, id(g_m): g_m}
        for enc in momentum_encoders.values():
            freeze_running_stats(enc)
            for p in enc.named_parameters().values():
                p.requires_grad = False
        return cls(config=config, f_q=f_q, g_q=g_q, f_m=f_m, g_m=g_m,
                   share_query=share_query, share_momentum=share_momentum)

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = self.f_q.named_parameters(prefix="f_q.")
        if not self.share_query:
            params.update(self.g_q.named_parameters(prefix="g_q."))
        return params

    def ema_pairs(self) -> list[tuple[Encoder, Encoder]]:
        """Distinct (query, momentum) pairs the EMA update must touch."""
        pairs = [(self.f_q, self.f_m)]
        if self.g_m is not self.f_m:
            pairs.append((self.g_q, self.g_m))
        return pairs

    def train(self):
        for enc in {id(e): e for e in (self.f_q, self.g_q, self.f_m, self.g_m)}.values():
            enc.train()
        return self


# ---------------------------------------------------------------------------
# multi-view classification
# ---------------------------------------------------------------------------

def mnc_forward(backbone: Backbone, head: ClassifierHead,
                x_t: Tensor | None, x_l: Tensor | None) -> tuple[Tensor, Tensor, Tensor]:
    """Two branches through shared weights; the final prediction is their mean.

    Both views are mandatory (the task is defined on paired patients). The
    two branches run as one concatenated batch so train-mode BN statistics
    are symmetric in the branch order.
    """
    if x_t is None or x_l is None:
        raise DataError("mnc_forward: both views are required (paired data only)")
    if x_t.shape != x_l.shape:
        raise ShapeError(f"mnc_forward: view shapes differ: {x_t.shape} vs {x_l.shape}")
    n = x_t.shape[0]
    both = ag.concat([x_t, x_l], axis=0)
    _, pooled = backbone(both)
    logits = head(pooled)
    logits_t = logits[:n]
    logits_l = logits[n:]
    logits_avg = ag.mul(ag.add(logits_t, logits_l), 0.5)
    return logits_t, logits_l, logits_avg


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

class DecoderBlock(Module):
    """Upsample x2, optionally concat a skip map, then conv3x3 + BN + ReLU."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.skip_ch = skip_ch
        self.conv = Conv2d(in_ch + skip_ch, out_ch, 3, rng, stride=1, padding=1)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor, skip: Tensor | None) -> Tensor:
        up = ag.upsample_nearest2(x)
        if self.skip_ch:
            if skip is None:
                raise ShapeError(f"decoder: expected a skip map with {self.skip_ch} channels, got none")
            if skip.shape[2:] != up.shape[2:] or skip.shape[1] != self.skip_ch:
                raise ShapeError(f"decoder: skip map {skip.shape} does not match upsampled {up.shape}")
            up = ag.concat([up, skip], axis=1)
        return ag.relu(self.bn(self.conv(up)))


class SegmentationNet(Module):
    """UNet-shaped net: the backbone's stage maps feed a x2-upsampling decoder.

    For a 3-stage 32px encoder the decoder consumes the 4^2 map as input and
    the 8^2 / 16^2 maps as skips, finishing with a skip-free block to 32^2
    and a 1x1 conv to single-channel logits.
    """

    def __init__(self, backbone: Backbone, rng: np.random.Generator,
                 head_width: int | None = None):
        super().__init__()
        widths = backbone.config.stage_widths
        if len(widths) < 2:
            raise ShapeError(f"segmentation decoder needs >= 2 stages, config has widths {widths}")
        self.backbone = backbone
        self.blocks = []
        in_ch = widths[-1]
        for skip_w in reversed(widths[:-1]):
            self.blocks.append(DecoderBlock(in_ch, skip_w, skip_w, rng))
            in_ch = skip_w
        head_width = head_width or max(widths[0] // 2, 8)
        self.final_block = DecoderBlock(in_ch, 0, head_width, rng)
        self.out_conv = Conv2d(head_width, 1, 1, rng, bias=True)

    def forward(self, images: Tensor) -> Tensor:
        maps, _ = self.backbone(images)
        stage_maps = maps[1:]  # drop the full-resolution stem map
        cur = stage_maps[-1]
        skips = list(reversed(stage_maps[:-1]))
        for block, skip in zip(self.blocks, skips):
            cur = block(cur, skip)
        cur = self.final_block(cur, None)
        logits = self.out_conv(cur)
        if logits.shape[2:] != images.shape[2:]:
            raise ShapeError(f"segmentation output {logits.shape} does not match input {images.shape}")
        return logits


def build_segmentation_net(backbone: Backbone, rng: np.random.Generator,
                           head_width: int | None = None) -> SegmentationNet:
    return SegmentationNet(backbone, rng, head_width=head_width)


def seg_forward(net: SegmentationNet, images: Tensor) -> Tensor:
    """Per-pixel logits with the input's spatial shape (apply sigmoid for masks)."""
    return net(images)
