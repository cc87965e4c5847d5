"""Post-hoc model analyses: activation maps and layer-wise CKA similarity.

Two questions about a trained backbone are answered here:

* *Where does it look?*  ``activation_map`` channel-averages a stage's
  feature maps, resizes to image resolution and min-max normalizes;
  ``actmap_dice`` scores the binarized map against the nodule mask over a
  threshold sweep.
* *What changed between two models?*  ``linear_cka`` measures feature
  similarity; ``cka_map`` probes both backbones at every stage boundary
  over a shared image set and fills an all-pairs similarity grid, exported
  as CSV and an optional heatmap PNG.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor, resize_bilinear_array
from .checkpoint import load_tensors
from .errors import CheckpointError, ConfigError, DataError, ShapeError
from .metrics import dice_score
from .models import Backbone, EncoderConfig
from .pretrain import BANK_TENSOR, QUERY_PREFIX

_logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)

#: CKA probe sets are capped to keep the feature matrices small
PROBE_CAP = 256


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActivationMapConfig:
    """Threshold sweep and probed stage for activation-map analysis.

    ``stage`` indexes the backbone's stages (negative values count from
    the end; the default -1 is the deepest stage).
    """

    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    stage: int = -1

    def __post_init__(self):
        object.__setattr__(self, "thresholds",
                           tuple(float(t) for t in self.thresholds))
        if not self.thresholds:
            raise ConfigError("thresholds must be non-empty")
        if any(not (0.0 < t < 1.0) or not math.isfinite(t)
               for t in self.thresholds):
            raise ConfigError(
                f"thresholds must lie strictly in (0, 1), got {self.thresholds}")

    def to_dict(self) -> dict:
        return {"thresholds": list(self.thresholds), "stage": self.stage}

    @classmethod
    def from_dict(cls, d: dict) -> "ActivationMapConfig":
        unknown = set(d) - {"thresholds", "stage"}
        if unknown:
            raise ConfigError(f"unknown ActivationMapConfig keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "thresholds" in kwargs:
            kwargs["thresholds"] = tuple(kwargs["thresholds"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# activation maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActivationMap:
    """Channel-mean stage response at image resolution, scaled to [0, 1].

    ``degenerate`` marks a constant response (min == max), which carries no
    spatial information and normalizes to all zeros.
    """

    values: np.ndarray
    degenerate: bool


def activation_map(backbone: Backbone, image: np.ndarray,
                   stage: int = -1) -> ActivationMap:
    """Where the backbone responds on one image.

    The chosen stage's feature maps are averaged over channels, bilinearly
    resized to the image's resolution and min-max normalized to [0, 1].
    The backbone is evaluated in eval mode (frozen statistics) and left in
    eval mode afterwards.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ShapeError(f"activation_map: image must be 2-D, got {image.shape}")
    backbone.eval()
    with ag.no_grad():
        maps, _ = backbone(Tensor(image[None, None]))
    stage_maps = maps[1:]  # drop the full-resolution stem map
    if not -len(stage_maps) <= stage < len(stage_maps):
        raise ConfigError(
            f"stage {stage} out of range for {len(stage_maps)} stages")
    fmap = stage_maps[stage].data[0]          # (C, h, w)
    mean_map = fmap.mean(axis=0)              # (h, w)
    resized = resize_bilinear_array(mean_map, image.shape)
    lo, hi = float(resized.min()), float(resized.max())
    if hi == lo:
        _logger.warning("activation_map: constant stage response (%.4g)", lo)
        return ActivationMap(np.zeros_like(resized, dtype=np.float32), True)
    scaled = ((resized - lo) / (hi - lo)).astype(np.float32)
    return ActivationMap(scaled, False)


def actmap_dice(amap: ActivationMap | np.ndarray, mask: np.ndarray,
                config: ActivationMapConfig | None = None) -> dict[float, float]:
    """Dice of the thresholded activation map against a binary mask, per t."""
    config = config or ActivationMapConfig()
    values = amap.values if isinstance(amap, ActivationMap) else np.asarray(amap)
    if values.shape != np.shape(mask):
        raise ShapeError(
            f"actmap_dice: map shape {values.shape} != mask shape {np.shape(mask)}")
    return {t: dice_score((values >= t).astype(np.float32), mask)
            for t in config.thresholds}


# ---------------------------------------------------------------------------
# linear CKA
# ---------------------------------------------------------------------------

def linear_cka(features_x: np.ndarray, features_y: np.ndarray) -> float:
    """Linear centered kernel alignment between two feature matrices.

    Both inputs are (samples x features) with equal sample counts; columns
    are centered internally and all arithmetic runs in float64.  The score
    is ``|Yc' Xc|_F^2 / (|Xc' Xc|_F * |Yc' Yc|_F)``, which is 1 for
    identical representations and invariant to orthogonal transforms and
    isotropic scaling.
    """
    x = np.asarray(features_x, dtype=np.float64)
    y = np.asarray(features_y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(
            f"linear_cka: need 2-D (samples x features), got {x.shape} and {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(
            f"linear_cka: sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DataError(f"linear_cka: need at least 2 samples, got {x.shape[0]}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DataError("linear_cka: non-finite feature values")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    xx = np.linalg.norm(xc.T @ xc)
    yy = np.linalg.norm(yc.T @ yc)
    if xx == 0.0 or yy == 0.0:
        raise DataError("linear_cka: zero-variance features have no alignment")
    xy = np.linalg.norm(yc.T @ xc)
    return float(xy * xy / (xx * yy))


# ---------------------------------------------------------------------------
# stage-boundary features and the CKA grid
# ---------------------------------------------------------------------------

def stage_feature_names(config: EncoderConfig) -> list[str]:
    """Probed-layer inventory: stem, each stage's output, pooled vector."""
    names = ["stem"]
    names += [f"stage{i + 1}" for i in range(len(config.stage_widths))]
    names.append("pooled")
    return names


def stage_features(backbone: Backbone, images: np.ndarray,
                   batch_size: int = 32) -> list[np.ndarray]:
    """Per-layer feature matrices over an image batch.

    ``images`` is (N, H, W); the result holds one (N, features) float32
    matrix per probed layer (spatial maps flattened per sample), ordered
    as in ``stage_feature_names``.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3:
        raise ShapeError(f"stage_features: images must be (N, H, W), got {images.shape}")
    if images.shape[0] == 0:
        raise DataError("stage_features: empty probe set")
    backbone.eval()
    chunks: list[list[np.ndarray]] = []
    with ag.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = Tensor(images[start:start + batch_size, None])
            maps, pooled = backbone(batch)
            per_layer = [m.data.reshape(m.shape[0], -1) for m in maps]
            per_layer.append(pooled.data.reshape(pooled.shape[0], -1))
            chunks.append(per_layer)
    return [np.concatenate([c[i] for c in chunks], axis=0)
            for i in range(len(chunks[0]))]


@dataclass(frozen=True)
class CkaGrid:
    """All-pairs layer similarity between two models over one probe set.

    ``grid[i, j]`` is the linear CKA between layer ``i`` of model A and
    layer ``j`` of model B; ``layer_names`` labels both axes.
    """

    grid: np.ndarray
    layer_names: tuple[str, ...]

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.grid)

    def save_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer_a\\layer_b", *self.layer_names])
            for name, row in zip(self.layer_names, self.grid):
                writer.writerow([name, *(f"{v:.6f}" for v in row)])
        return path

    def save_heatmap(self, path: str | Path) -> Path:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        path = Path(path)
        n = len(self.layer_names)
        fig, ax = plt.subplots(figsize=(1.0 + 0.6 * n, 1.0 + 0.6 * n))
        im = ax.imshow(self.grid, vmin=0.0, vmax=1.0, cmap="viridis",
                       origin="upper")
        ax.set_xticks(range(n), self.layer_names, rotation=45, ha="right")
        ax.set_yticks(range(n), self.layer_names)
        ax.set_xlabel("model B layer")
        ax.set_ylabel("model A layer")
        fig.colorbar(im, ax=ax, shrink=0.8, label="linear CKA")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path


def cka_map(backbone_a: Backbone, backbone_b: Backbone, images: np.ndarray,
            cap: int = PROBE_CAP, batch_size: int = 32) -> CkaGrid:
    """Layer-by-layer CKA grid between two same-architecture backbones.

    The probe set is truncated to ``cap`` images (deterministic prefix) to
    bound the feature-matrix sizes.
    """
    if backbone_a.config != backbone_b.config:
        raise ConfigError(
            "cka_map: backbone architectures differ: "
            f"{backbone_a.config} vs {backbone_b.config}")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3:
        raise ShapeError(f"cka_map: images must be (N, H, W), got {images.shape}")
    if images.shape[0] > cap:
        images = images[:cap]
    names = stage_feature_names(backbone_a.config)
    feats_a = stage_features(backbone_a, images, batch_size)
    feats_b = stage_features(backbone_b, images, batch_size)
    n = len(names)
    grid = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            grid[i, j] = linear_cka(feats_a[i], feats_b[j])
    return CkaGrid(grid=grid, layer_names=tuple(names))


# ---------------------------------------------------------------------------
# checkpoint loading for analysis
# ---------------------------------------------------------------------------

def load_any_backbone(path: str | Path, encoder_config: EncoderConfig) -> Backbone:
    """Backbone weights from either checkpoint flavor, ready for analysis.

    Pretraining checkpoints store the query encoder under ``f_q.`` next to
    the memory bank; fine-tuned task checkpoints store ``backbone.`` plus
    head tensors.  Both are recognized; everything but the backbone is
    ignored.  The stored config fingerprint must match ``encoder_config``.
    """
    tensors, _ = load_tensors(path, expect_fingerprint=encoder_config.fingerprint())
    prefix = (QUERY_PREFIX + "backbone.") if BANK_TENSOR in tensors else "backbone."
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if not state:
        raise CheckpointError(f"checkpoint {path} holds no backbone tensors")
    rng = np.random.default_rng(0)
    backbone = Backbone(encoder_config, rng)
    backbone.load_state_dict(state)
    backbone.eval()
    return backbone
