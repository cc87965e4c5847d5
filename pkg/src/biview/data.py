"""Synthetic two-view nodule dataset: generation, storage, splits, batching.

A dataset lives in a directory shaped like::

    dataset_root/
      manifest.jsonl   one JSON object per line, paths relative to the root
      images/          8-bit grayscale PNGs
      masks/           8-bit binary PNGs ({0, 255})

Each patient is rendered from a single :class:`NoduleLatent`, so the
transverse and longitudinal views depict the same underlying nodule: one
shared depth axis, one boundary-irregularity pattern, one echogenicity.
The class label is a deterministic function of the latent — malignant iff
the boundary irregularity exceeds a threshold OR the nodule is taller
(depth) than it is long (longitudinal in-plane axis) — echoing how shape
descriptors drive risk stratification in practice.

Views can be dropped at generation time (``missing_rate``) to exercise the
missing-view training path; a patient always keeps at least one view.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .augment import stream
from .errors import ConfigError, DataError

_logger = logging.getLogger(__name__)

__all__ = [
    "PatientRecord",
    "NoduleLatent",
    "SplitPlan",
    "Splits",
    "generate_synthetic",
    "load_manifest",
    "dataset_hash",
    "load_image",
    "load_mask",
    "make_splits",
    "batch_sampler",
    "IRREGULARITY_THRESHOLD",
]

LABELS = ("benign", "malignant")
# Boundary-irregularity level above which a nodule is labeled malignant
# regardless of its aspect ratio.
IRREGULARITY_THRESHOLD = 0.35


# --------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class PatientRecord:
    """One patient's on-disk views. At least one view must be present."""

    patient_id: str
    label: int  # 0 = benign, 1 = malignant
    transverse_path: str | None = None
    longitudinal_path: str | None = None
    transverse_mask_path: str | None = None
    longitudinal_mask_path: str | None = None

    def __post_init__(self) -> None:
        if self.transverse_path is None and self.longitudinal_path is None:
            raise DataError(f"patient {self.patient_id!r} has no views")
        if self.label not in (0, 1):
            raise DataError(f"patient {self.patient_id!r}: label must be 0 or 1, "
                            f"got {self.label!r}")

    @property
    def a(self) -> int:
        """Indicator: 1 when the transverse view is present."""
        return int(self.transverse_path is not None)

    @property
    def b(self) -> int:
        """Indicator: 1 when the longitudinal view is present."""
        return int(self.longitudinal_path is not None)

    @property
    def paired(self) -> bool:
        return self.a == 1 and self.b == 1

    @property
    def num_images(self) -> int:
        return self.a + self.b


@dataclass(frozen=True)
class NoduleLatent:
    """Generative parameters one patient's two views are rendered from.

    Semi-axes are fractions of the image side.  ``depth`` is the shared
    vertical axis seen in both views; ``width`` is the transverse in-plane
    axis and ``length`` the longitudinal one.
    """

    center: tuple[float, float]          # (row, col) as fractions in (0, 1)
    depth: float                         # shared vertical semi-axis
    width: float                         # transverse horizontal semi-axis
    length: float                        # longitudinal horizontal semi-axis
    irregularity: float                  # boundary perturbation amplitude
    echogenicity: float                  # nodule fill level in [0, 1]
    margin_blur: float                   # boundary softness (pixels of sigma)
    harmonics: tuple[tuple[int, float, float], ...]  # (k, coeff, phase) terms

    @property
    def label(self) -> int:
        """Malignant iff irregular boundary or taller-than-long shape."""
        return int(self.irregularity > IRREGULARITY_THRESHOLD or self.depth > self.length)


def sample_latent(rng: np.random.Generator) -> NoduleLatent:
    """Draw one nodule latent.

    Ranges are tuned so that labels stay roughly balanced and both label
    clauses fire with useful frequency.  Both label-deciding quantities are
    kept away from their decision boundaries — no irregularity inside the
    band around the threshold, no near-tie between depth and length — so
    class membership never hinges on sub-pixel differences that small
    renderings cannot express.

    The in-plane extents are correlated (length is a jittered multiple of
    width), mimicking how real nodule dimensions track each other across
    scan planes.  The taller-than-wide comparison therefore shows up in
    both views rather than being legible only where ``length`` itself is
    rendered, which keeps the patient's class a patient-level property of
    the images instead of a single view's private detail.
    """
    center = (float(rng.uniform(0.38, 0.62)), float(rng.uniform(0.38, 0.62)))
    depth = float(rng.uniform(0.14, 0.34))
    width = float(rng.uniform(0.16, 0.40))
    length = width * float(rng.uniform(0.8, 1.25))
    while abs(depth - length) < 0.05 or abs(depth - width) < 0.04:
        width = float(rng.uniform(0.16, 0.40))
        length = width * float(rng.uniform(0.8, 1.25))
    if rng.random() < 0.7:
        irregularity = float(rng.uniform(0.0, 0.24))
    else:
        irregularity = float(rng.uniform(0.46, 0.65))
    echogenicity = float(rng.uniform(0.15, 0.55))
    margin_blur = float(rng.uniform(0.3, 0.9))
    harmonics = tuple(
        (k, float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.0, 2.0 * math.pi)))
        for k in (2, 3, 5))
    return NoduleLatent(center=center, depth=depth, width=width, length=length,
                        irregularity=irregularity, echogenicity=echogenicity,
                        margin_blur=margin_blur, harmonics=harmonics)


# --------------------------------------------------------------------------
# rendering


def _boundary_radius(latent: NoduleLatent, theta: np.ndarray) -> np.ndarray:
    """Relative boundary radius r(theta): 1 plus the irregularity ripple."""
    total = np.zeros_like(theta)
    norm = sum(abs(c) for _, c, _ in latent.harmonics) or 1.0
    for k, c, phase in latent.harmonics:
        total += (c / norm) * np.sin(k * theta + phase)
    return 1.0 + 0.5 * latent.irregularity * total


def _render_view(latent: NoduleLatent, view: str, size: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Render one view to (image, mask), both float arrays in [0, 1]."""
    horiz = latent.width if view == "transverse" else latent.length
    vert = latent.depth
    cy = latent.center[0] * size
    cx = latent.center[1] * size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = (ys - cy) / (vert * size)
    dx = (xs - cx) / (horiz * size)
    rho = np.sqrt(dx * dx + dy * dy)
    theta = np.arctan2(dy, dx)
    inside = rho <= _boundary_radius(latent, theta)
    mask = inside.astype(np.float64)

    # view-specific background texture bands
    if view == "transverse":
        phase = ys / size
        freq, base, amp = 3.0, 0.48, 0.10
    else:
        phase = (ys + 0.5 * xs) / size
        freq, base, amp = 5.0, 0.42, 0.08
    bg = base + amp * np.sin(2.0 * math.pi * freq * phase + rng.uniform(0, 2 * math.pi))

    alpha = ndimage.gaussian_filter(mask, sigma=latent.margin_blur, mode="nearest")
    img = bg * (1.0 - alpha) + latent.echogenicity * alpha
    img *= 1.0 + 0.06 * rng.standard_normal(img.shape)  # multiplicative speckle
    return np.clip(img, 0.0, 1.0), mask


def _write_png(path: Path, values01: np.ndarray) -> None:
    arr = np.clip(np.rint(values01 * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_image(root: str | Path, relpath: str) -> np.ndarray:
    """Read a grayscale PNG back to float32 in [0, 1]."""
    p = Path(root) / relpath
    try:
        with Image.open(p) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except FileNotFoundError:
        raise DataError(f"image file not found: {p}") from None
    return arr / np.float32(255.0)


def load_mask(root: str | Path, relpath: str) -> np.ndarray:
    """Read a binary mask PNG back to float32 with values in {0, 1}."""
    arr = load_image(root, relpath)
    return (arr >= 0.5).astype(np.float32)


# --------------------------------------------------------------------------
# generation


def generate_synthetic(out_dir: str | Path, num_patients: int,
                       missing_rate: float = 0.0, image_size: int = 32,
                       seed: int = 0) -> Path:
    """Write a complete synthetic dataset and return its root directory.

    Per patient: sample a latent (re-sampled when the rendered nodule would
    have zero area), render both views plus masks, then with probability
    ``missing_rate`` drop one view (and its mask) chosen uniformly.  The
    whole dataset is a pure function of (num_patients, missing_rate,
    image_size, seed) — same arguments, byte-identical files.
    """
    if num_patients < 10:
        raise ConfigError(f"num_patients must be >= 10, got {num_patients}")
    if not (0.0 <= missing_rate < 1.0):
        raise ConfigError(f"missing_rate must be in [0, 1), got {missing_rate}")
    if image_size < 8:
        raise ConfigError(f"image_size must be >= 8, got {image_size}")

    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    lines = []
    for i in range(num_patients):
        rng = stream(seed, "patient", i)
        latent = None
        rendered: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for _ in range(10):
            latent = sample_latent(rng)
            rendered = {v: _render_view(latent, v, image_size, rng)
                        for v in ("transverse", "longitudinal")}
            if all(m.sum() > 0 for _, m in rendered.values()):
                break
        else:
            raise DataError(f"patient {i}: could not render a non-empty nodule "
                            f"after 10 latent draws")

        drop: str | None = None
        if rng.random() < missing_rate:
            drop = "transverse" if rng.random() < 0.5 else "longitudinal"

        pid = f"p{i:04d}"
        row: dict[str, object] = {"patient_id": pid,
                                  "label": LABELS[latent.label]}
        for view, short in (("transverse", "t"), ("longitudinal", "l")):
            if view == drop:
                row[f"{view}_path"] = None
                row[f"{view}_mask_path"] = None
                continue
            img, mask = rendered[view]
            img_rel = f"images/{pid}_{short}.png"
            mask_rel = f"masks/{pid}_{short}.png"
            _write_png(root / img_rel, img)
            _write_png(root / mask_rel, mask)
            row[f"{view}_path"] = img_rel
            row[f"{view}_mask_path"] = mask_rel
        lines.append(json.dumps(row, sort_keys=True))

    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


# --------------------------------------------------------------------------
# manifest loading


_MANIFEST_KEYS = {"patient_id", "label", "transverse_path", "longitudinal_path",
                  "transverse_mask_path", "longitudinal_mask_path"}


def load_manifest(root: str | Path) -> list[PatientRecord]:
    """Parse ``manifest.jsonl`` under ``root`` into validated records.

    Any schema violation is reported with its 1-based manifest line number.
    Referenced image/mask files must exist; patient ids must be unique; a
    record must keep at least one view.  An empty manifest yields an empty
    list with a warning.
    """
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    records: list[PatientRecord] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        try:
            row = json.loads(raw)
        except json.JSONDecodeError as e:
            raise DataError(f"manifest line {lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(row, dict):
            raise DataError(f"manifest line {lineno}: expected an object, "
                            f"got {type(row).__name__}")
        missing = _MANIFEST_KEYS - set(row)
        if missing:
            raise DataError(f"manifest line {lineno}: missing fields {sorted(missing)}")
        extra = set(row) - _MANIFEST_KEYS
        if extra:
            raise DataError(f"manifest line {lineno}: unknown fields {sorted(extra)}")
        if row["label"] not in LABELS:
            raise DataError(f"manifest line {lineno}: label must be one of {LABELS}, "
                            f"got {row['label']!r}")
        pid = row["patient_id"]
        if not isinstance(pid, str) or not pid:
            raise DataError(f"manifest line {lineno}: patient_id must be a "
                            f"non-empty string")
        if pid in seen:
            raise DataError(f"manifest line {lineno}: duplicate patient_id {pid!r}")
        seen.add(pid)
        for key in ("transverse_path", "longitudinal_path",
                    "transverse_mask_path", "longitudinal_mask_path"):
            rel = row[key]
            if rel is not None and not (root / rel).is_file():
                raise DataError(f"manifest line {lineno}: referenced file "
                                f"missing: {rel}")
        try:
            records.append(PatientRecord(
                patient_id=pid,
                label=LABELS.index(row["label"]),
                transverse_path=row["transverse_path"],
                longitudinal_path=row["longitudinal_path"],
                transverse_mask_path=row["transverse_mask_path"],
                longitudinal_mask_path=row["longitudinal_mask_path"],
            ))
        except DataError as e:
            raise DataError(f"manifest line {lineno}: {e}") from None
    if not records:
        _logger.warning("manifest %s contains no records", manifest)
    return records


def dataset_hash(root: str | Path) -> str:
    """SHA-256 of the manifest bytes — a stable identity for the dataset."""
    manifest = Path(root) / "manifest.jsonl"
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    return hashlib.sha256(manifest.read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    """How paired patients are divided: 10 subsets, 2 held out as test, the
    remaining 8 split 7:1 into train:validation, with nested label-budget
    proportions ``r`` (percent of the train set)."""

    test_subsets: tuple[int, int] = (0, 1)
    fold: int = 0
    proportions: tuple[int, ...] = (10, 20, 50, 100)

    def __post_init__(self) -> None:
        a, b = self.test_subsets
        if not (0 <= a < 10 and 0 <= b < 10 and a != b):
            raise ConfigError(f"test_subsets must be two distinct indices in "
                              f"[0, 10), got {self.test_subsets!r}")
        if not (0 <= self.fold < 8):
            raise ConfigError(f"fold must be in [0, 8), got {self.fold}")
        if not self.proportions:
            raise ConfigError("proportions must be non-empty")
        for r in self.proportions:
            if not (0 < r <= 100):
                raise ConfigError(f"proportions must lie in (0, 100], got {r}")
        if tuple(sorted(self.proportions)) != tuple(self.proportions):
            raise ConfigError(f"proportions must be ascending, got {self.proportions!r}")
        if self.proportions[-1] != 100:
            raise ConfigError("proportions must end with 100")

    def to_dict(self) -> dict:
        return {"test_subsets": list(self.test_subsets), "fold": self.fold,
                "proportions": list(self.proportions)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        unknown = set(d) - {"test_subsets", "fold", "proportions"}
        if unknown:
            raise ConfigError(f"unknown SplitPlan keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("test_subsets", "proportions"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class Splits:
    """Materialized patient-level splits."""

    pretrain: tuple[PatientRecord, ...]
    train_by_r: dict[int, tuple[PatientRecord, ...]]
    val: tuple[PatientRecord, ...]
    test: tuple[PatientRecord, ...]

    def ids(self, which: str) -> set[str]:
        group = getattr(self, which) if which != "train" else self.train_by_r[100]
        return {r.patient_id for r in group}


def make_splits(records: list[PatientRecord], plan: SplitPlan, seed: int) -> Splits:
    """Divide patients into pre-training / fine-tuning / validation / test.

    Paired patients are shuffled (seeded) into 10 near-equal subsets; the
    two ``plan.test_subsets`` become the test set and the other eight are
    assigned 7:1 to train:validation (``plan.fold`` picks the validation
    subset).  Train subsets for each proportion ``r`` are nested prefixes of
    one shuffled order.  Unpaired patients join pre-training only.  The
    pre-training set is every non-test patient.
    """
    paired = [r for r in records if r.paired]
    unpaired = [r for r in records if not r.paired]
    if len(paired) < 10:
        raise DataError(f"need at least 10 paired patients to build splits, "
                        f"got {len(paired)}")
    rng = np.random.default_rng([seed, 0, 0])
    order = list(paired)
    rng.shuffle(order)
    subsets = [list(chunk) for chunk in np.array_split(np.arange(len(order)), 10)]

    test_idx = set(plan.test_subsets)
    test = [order[i] for s in sorted(test_idx) for i in subsets[s]]
    rest = [s for s in range(10) if s not in test_idx]
    val_subset = rest[plan.fold]
    val = [order[i] for i in subsets[val_subset]]
    train_full = [order[i] for s in rest if s != val_subset for i in subsets[s]]

    train_order = list(train_full)
    rng2 = np.random.default_rng([seed, 1, 0])
    rng2.shuffle(train_order)
    train_by_r: dict[int, tuple[PatientRecord, ...]] = {}
    n = len(train_order)
    for r in plan.proportions:
        k = n if r == 100 else max(1, round(n * r / 100))
        train_by_r[r] = tuple(train_order[:k])

    pretrain = tuple(train_full + val + unpaired)
    return Splits(pretrain=pretrain, train_by_r=train_by_r,
                  val=tuple(val), test=tuple(test))


# --------------------------------------------------------------------------
# batching


def batch_sampler(records: list[PatientRecord], patients_per_batch: int,
                  seed: int, epoch: int) -> list[list[PatientRecord]]:
    """Shuffle patients for one epoch and chunk them into whole-patient
    batches. The shuffle depends only on (seed, epoch); the final short
    batch is kept."""
    if patients_per_batch < 1:
        raise ConfigError(f"patients_per_batch must be >= 1, got {patients_per_batch}")
    order = list(records)
    rng = np.random.default_rng([seed, epoch, 2])
    rng.shuffle(order)
    return [order[i:i + patients_per_batch]
            for i in range(0, len(order), patients_per_batch)]
