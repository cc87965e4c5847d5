"""Stochastic augmentation pipelines and per-image intensity normalization.

Two pipelines operate on single-channel float images with values in [0, 1]:

- :func:`augment_pretrain` produces one randomized view of an image for
  contrastive pre-training.  Fixed op order: random resized crop ->
  brightness -> contrast -> optional Gaussian blur -> optional horizontal
  flip -> rotation, with the result clamped back to [0, 1].
- :func:`augment_finetune` transforms an image together with an optional
  binary mask.  Geometric ops (flip / scale / rotate / translate) are fused
  into a single affine warp applied identically to both; photometric ops
  (brightness / contrast) touch the image only.  Masks are resampled with
  nearest neighbor so their values stay exactly in {0, 1}.

Every random decision is drawn from a caller-supplied ``numpy`` Generator in
a fixed sequence, so a given (spec, stream) pair is bit-reproducible no
matter how calls are ordered across samples or workers.  Use :func:`stream`
to derive independent per-sample generators from structured keys such as
(run seed, epoch, sample index, view).
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from .autograd import resize_bilinear_array
from .errors import ConfigError, ShapeError

_logger = logging.getLogger(__name__)

__all__ = [
    "AugmentSpec",
    "stream",
    "warp_affine",
    "augment_pretrain",
    "augment_finetune",
    "normalize",
]


def stream(*components: int | str) -> np.random.Generator:
    """Derive an independent random generator from structured key components.

    Integer components are used as-is; strings are hashed with CRC-32 (stable
    across processes, unlike the builtin ``hash``).  The component list seeds
    a ``SeedSequence``, so distinct keys give statistically independent
    streams and identical keys give bit-identical ones.
    """
    entropy: list[int] = []
    for c in components:
        if isinstance(c, str):
            entropy.append(zlib.crc32(c.encode("utf-8")))
        else:
            v = int(c)
            if v < 0:
                raise ConfigError(f"stream components must be non-negative, got {v}")
            entropy.append(v)
    if not entropy:
        raise ConfigError("stream needs at least one component")
    return np.random.default_rng(entropy)


@dataclass(frozen=True)
class AugmentSpec:
    """Parameter ranges for both augmentation pipelines.

    All ranges are inclusive (low, high) pairs and must be ordered; all
    probabilities must lie in [0, 1].  Setting a range to a single point and
    the probabilities to zero disables the corresponding op exactly (the
    pipeline becomes the identity).
    """

    output_size: int = 32
    crop_scale: tuple[float, float] = (0.6, 1.0)
    brightness_delta: tuple[float, float] = (-0.2, 0.2)
    contrast_factor: tuple[float, float] = (0.8, 1.25)
    blur_sigma: tuple[float, float] = (0.1, 1.5)
    blur_prob: float = 0.5
    flip_prob: float = 0.5
    rotation_degrees: tuple[float, float] = (-15.0, 15.0)
    translate_frac: tuple[float, float] = (-0.1, 0.1)
    scale_factor: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self) -> None:
        if self.output_size < 1:
            raise ConfigError(f"output_size must be >= 1, got {self.output_size}")
        for name in ("crop_scale", "brightness_delta", "contrast_factor",
                     "blur_sigma", "rotation_degrees", "translate_frac",
                     "scale_factor"):
            r = getattr(self, name)
            if len(r) != 2 or not all(math.isfinite(v) for v in r):
                raise ConfigError(f"{name} must be a finite (low, high) pair, got {r!r}")
            if r[0] > r[1]:
                raise ConfigError(f"{name} range is not ordered: {r!r}")
        if not (0.0 < self.crop_scale[0] and self.crop_scale[1] <= 1.0):
            raise ConfigError(f"crop_scale must lie in (0, 1], got {self.crop_scale!r}")
        if self.contrast_factor[0] <= 0.0:
            raise ConfigError(f"contrast factors must be positive, got {self.contrast_factor!r}")
        if self.blur_sigma[0] < 0.0:
            raise ConfigError(f"blur sigma must be non-negative, got {self.blur_sigma!r}")
        if self.scale_factor[0] <= 0.0:
            raise ConfigError(f"scale factors must be positive, got {self.scale_factor!r}")
        for name in ("blur_prob", "flip_prob"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {p}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown AugmentSpec fields: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, (list, tuple)) else v for k, v in d.items()}
        return cls(**kw)


def _check_image(image: np.ndarray, what: str = "image") -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"{what} must be 2-D (H, W), got shape {image.shape}")
    return image.astype(np.float32, copy=False)


def warp_affine(image: np.ndarray, matrix: np.ndarray, *, order: int = 1,
               cval: float = 0.0) -> np.ndarray:
    """Apply the affine map ``matrix`` to an image by inverse warping.

    ``matrix`` is a 3x3 homogeneous transform in (x, y) = (column, row)
    coordinates mapping input positions to output positions.  Each output
    pixel is filled by sampling the input at ``matrix^-1 @ (x, y, 1)``,
    with bilinear interpolation (``order=1``) or nearest neighbor
    (``order=0``); samples falling outside the input take ``cval``.
    """
    image = _check_image(image)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (3, 3):
        raise ShapeError(f"affine matrix must be 3x3, got shape {matrix.shape}")
    if order not in (0, 1):
        raise ConfigError(f"order must be 0 (nearest) or 1 (bilinear), got {order}")
    h, w = image.shape
    inv = np.linalg.inv(matrix)
    ys, xs = np.mgrid[0:h, 0:w]
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]

    if order == 0:
        ix = np.rint(src_x).astype(np.int64)
        iy = np.rint(src_y).astype(np.int64)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out = np.full((h, w), cval, dtype=np.float32)
        out[inside] = image[iy[inside], ix[inside]]
        return out

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = (src_x - x0).astype(np.float64)
    fy = (src_y - y0).astype(np.float64)

    def sample(yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        vals = np.full(yy.shape, float(cval), dtype=np.float64)
        vals[inside] = image[yy[inside], xx[inside]]
        return vals

    v00 = sample(y0, x0)
    v01 = sample(y0, x0 + 1)
    v10 = sample(y0 + 1, x0)
    v11 = sample(y0 + 1, x0 + 1)
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return (top * (1.0 - fy) + bot * fy).astype(np.float32)


def _geometry_matrix(h: int, w: int, *, flip: bool, scale: float,
                     angle_deg: float, tx: float, ty: float) -> np.ndarray:
    """Compose flip -> scale -> rotate (about the image center) -> translate."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    flip_m = np.array([[-1.0 if flip else 1.0, 0, 0], [0, 1, 0], [0, 0, 1]])
    scale_m = np.array([[scale, 0, 0], [0, scale, 0], [0, 0, 1.0]])
    th = math.radians(angle_deg)
    rot = np.array([[math.cos(th), -math.sin(th), 0],
                    [math.sin(th), math.cos(th), 0],
                    [0, 0, 1.0]])
    back = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1.0]])
    return back @ rot @ scale_m @ flip_m @ to_origin


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return float(lo)
    return float(rng.uniform(lo, hi))


def _random_resized_crop(image: np.ndarray, rng: np.random.Generator,
                         spec: AugmentSpec) -> np.ndarray:
    """Crop a random aspect-preserving window, then resize to the output size.

    The window covers an area fraction drawn from ``spec.crop_scale``.  A
    draw whose rounded window degenerates to zero pixels is re-sampled up to
    10 times before falling back to a full center crop.
    """
    h, w = image.shape
    ch = cw = 0
    top = left = 0
    for _ in range(10):
        s = _uniform(rng, *spec.crop_scale)
        side = math.sqrt(s)
        ch, cw = int(round(h * side)), int(round(w * side))
        if 1 <= ch <= h and 1 <= cw <= w:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    else:
        ch, cw = max(1, min(h, w)), max(1, min(h, w))
        top, left = (h - ch) // 2, (w - cw) // 2
    window = image[top:top + ch, left:left + cw]
    return resize_bilinear_array(window, (spec.output_size, spec.output_size))


def augment_pretrain(image: np.ndarray, rng: np.random.Generator,
                     spec: AugmentSpec | None = None) -> np.ndarray:
    """One randomized pre-training view of ``image`` (values in [0, 1]).

    Ops run in a fixed order — random resized crop, brightness shift,
    contrast scaling, optional Gaussian blur, optional horizontal flip,
    rotation — and every random quantity is drawn whether or not its op
    fires, so the stream consumption is identical across calls with the
    same spec.  The result is a float32 image of ``spec.output_size``
    squared, clamped to [0, 1].  With all probabilities at zero and all
    ranges collapsed to identity points the pipeline returns the input
    bit-for-bit (when the input is already at the output size).
    """
    spec = spec or AugmentSpec()
    image = _check_image(image)
    out = _random_resized_crop(image, rng, spec)

    delta = _uniform(rng, *spec.brightness_delta)
    if delta != 0.0:
        out = out + np.float32(delta)

    factor = _uniform(rng, *spec.contrast_factor)
    if factor != 1.0:
        mean = np.float32(out.mean(dtype=np.float64))
        out = (out - mean) * np.float32(factor) + mean

    blur_coin = float(rng.random())
    sigma = _uniform(rng, *spec.blur_sigma)
    if blur_coin < spec.blur_prob and sigma > 0.0:
        out = ndimage.gaussian_filter(out, sigma=sigma, mode="nearest").astype(np.float32)

    flip_coin = float(rng.random())
    if flip_coin < spec.flip_prob:
        out = out[:, ::-1]

    angle = _uniform(rng, *spec.rotation_degrees)
    if angle != 0.0:
        m = _geometry_matrix(*out.shape, flip=False, scale=1.0,
                             angle_deg=angle, tx=0.0, ty=0.0)
        out = warp_affine(out, m, order=1, cval=0.0)

    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_finetune(image: np.ndarray, mask: np.ndarray | None,
                     rng: np.random.Generator,
                     spec: AugmentSpec | None = None,
                     ) -> tuple[np.ndarray, np.ndarray | None]:
    """Jointly augment an image and (optionally) its binary mask.

    Flip, scale, rotation, and translation are composed into one affine
    warp applied to both inputs — bilinear for the image, nearest neighbor
    for the mask, so mask values stay exactly in {0, 1}.  Brightness and
    contrast then perturb the image alone.  Returns float32 arrays of the
    input shape; the image is clamped to [0, 1].
    """
    spec = spec or AugmentSpec()
    image = _check_image(image)
    if mask is not None:
        mask = _check_image(mask, "mask")
        if mask.shape != image.shape:
            raise ShapeError(
                f"mask shape {mask.shape} does not match image shape {image.shape}")
    h, w = image.shape

    flip = float(rng.random()) < spec.flip_prob
    scale = _uniform(rng, *spec.scale_factor)
    angle = _uniform(rng, *spec.rotation_degrees)
    tx = _uniform(rng, *spec.translate_frac) * w
    ty = _uniform(rng, *spec.translate_frac) * h
    delta = _uniform(rng, *spec.brightness_delta)
    factor = _uniform(rng, *spec.contrast_factor)

    identity_geometry = (not flip and scale == 1.0 and angle == 0.0
                         and tx == 0.0 and ty == 0.0)
    if not identity_geometry:
        m = _geometry_matrix(h, w, flip=flip, scale=scale, angle_deg=angle,
                             tx=tx, ty=ty)
        image = warp_affine(image, m, order=1, cval=0.0)
        if mask is not None:
            mask = warp_affine(mask, m, order=0, cval=0.0)

    if delta != 0.0:
        image = image + np.float32(delta)
    if factor != 1.0:
        mean = np.float32(image.mean(dtype=np.float64))
        image = (image - mean) * np.float32(factor) + mean

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    if mask is not None:
        mask = mask.astype(np.float32)
    return image, mask


def normalize(image: np.ndarray) -> np.ndarray:
    """Standardize an image to zero mean and unit standard deviation.

    Statistics are computed in float64 over the whole image (population
    standard deviation).  A constant image has no scale to normalize by; it
    comes back as all zeros and the degenerate input is reported through a
    warning on this module's logger.
    """
    image = _check_image(image)
    work = image.astype(np.float64)
    mean = work.mean()
    std = work.std()
    if std == 0.0:
        _logger.warning("normalize: constant image (value %.6g) mapped to zeros", mean)
        return np.zeros_like(image)
    return ((work - mean) / std).astype(np.float32)
