"""Supervised fine-tuning of a pretrained backbone on the downstream tasks.

Three tasks share one engine:

* ``"nc"``  — nodule classification.  Every present view is an independent
  sample (a paired patient contributes two); the metric is AUC.
* ``"ns"``  — nodule segmentation through the UNet-shaped decoder; the
  metric is mean Dice of the thresholded prediction.
* ``"mnc"`` — multi-view classification on paired patients only.  Both
  views pass through shared weights; the training loss sums the two branch
  cross-entropies and the cross-entropy of the averaged logits, and the
  metric is AUC of the averaged branch.

``run_finetune`` searches a small learning-rate x epochs grid, trains each
combination with SGD + cosine decay and early stopping on the validation
metric, and writes the overall best-validation model as a checkpoint.  When
a pretraining checkpoint is given, only its backbone tensors are loaded —
the projection head is discarded — and the task head starts fresh.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .augment import AugmentSpec, augment_finetune, normalize, stream
from .autograd import Tensor
from .checkpoint import load_tensors, save_tensors
from .data import PatientRecord, Splits, load_image, load_mask
from .errors import CheckpointError, ConfigError, DataError, NumericalError, ShapeError
from .layers import Module
from .metrics import auc, dice_score
from .models import (Backbone, ClassifierHead, EncoderConfig, SegmentationNet,
                     mnc_forward)
from .optim import SGD, cosine_lr
from .pretrain import load_encoder_state

_logger = logging.getLogger(__name__)

TASKS = ("nc", "ns", "mnc")
PROPORTIONS = (10, 20, 50, 100)
DICE_EPS = 1e-6

#: metric reported (and early-stopped on) per task
METRIC_NAME = {"nc": "auc", "ns": "dice", "mnc": "auc"}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    """Hyperparameters for one fine-tuning run (one task, one proportion).

    ``lr_grid`` x ``epochs_grid`` spans the search; every combination is
    trained fully (with early stopping) and the best validation metric
    wins.  ``init_checkpoint=None`` means random initialization.
    """

    task: str = "nc"
    proportion: int = 100
    lr_grid: tuple[float, ...] = (0.01, 0.02, 0.05)
    epochs_grid: tuple[int, ...] = (100, 200)
    weight_decay: float = 1e-5
    batch_size: int = 32
    patience: int = 15
    seed: int = 0
    init_checkpoint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "task", str(self.task).lower())
        object.__setattr__(self, "lr_grid", tuple(float(v) for v in self.lr_grid))
        object.__setattr__(self, "epochs_grid", tuple(int(v) for v in self.epochs_grid))
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.proportion not in PROPORTIONS:
            raise ConfigError(
                f"proportion must be one of {PROPORTIONS}, got {self.proportion}")
        if not self.lr_grid or any(lr <= 0 or not math.isfinite(lr) for lr in self.lr_grid):
            raise ConfigError(f"lr_grid must be positive and finite, got {self.lr_grid}")
        if not self.epochs_grid or any(e < 1 for e in self.epochs_grid):
            raise ConfigError(f"epochs_grid entries must be >= 1, got {self.epochs_grid}")
        if self.weight_decay < 0 or not math.isfinite(self.weight_decay):
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    @classmethod
    def pretrained(cls, task: str, init_checkpoint: str, **overrides) -> "FinetuneConfig":
        """Search grid used when starting from a pretraining checkpoint."""
        defaults = dict(lr_grid=(0.005, 0.01), epochs_grid=(100,))
        defaults.update(overrides)
        return cls(task=task, init_checkpoint=init_checkpoint, **defaults)

    @classmethod
    def desk(cls, task: str, init_checkpoint: str | None = None,
             **overrides) -> "FinetuneConfig":
        """Small-footprint profile: one grid point, identical for every
        initialization so checkpoint comparisons stay protocol-matched.
        The learning rate is the one a from-scratch run prefers on the
        bundled synthetic benchmark, which keeps the baseline arm at its
        own optimum rather than inheriting a pretrained model's schedule."""
        defaults = dict(
            lr_grid=(0.05,), epochs_grid=(60,), batch_size=16, patience=20,
        )
        defaults.update(overrides)
        return cls(task=task, init_checkpoint=init_checkpoint, **defaults)

    @property
    def metric_name(self) -> str:
        return METRIC_NAME[self.task]

    def to_dict(self) -> dict:
        return {
            "task": self.task, "proportion": self.proportion,
            "lr_grid": list(self.lr_grid), "epochs_grid": list(self.epochs_grid),
            "weight_decay": self.weight_decay, "batch_size": self.batch_size,
            "patience": self.patience, "seed": self.seed,
            "init_checkpoint": self.init_checkpoint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown FinetuneConfig keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("lr_grid", "epochs_grid"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# task losses
# ---------------------------------------------------------------------------

def cross_entropy(logits, label) -> Tensor:
    """Mean softmax cross-entropy: −log softmax(logits)[label].

    Accepts one logit row ``(K,)`` with an int label or a batch ``(B, K)``
    with ``(B,)`` labels (mean over the batch).
    """
    return ag.softmax_nll(logits, label, reduction="mean")


def soft_dice_loss(pred, mask) -> Tensor:
    """1 − (2·Σ p·g + ε) / (Σ p + Σ g + ε) over all elements, ε = 1e-6.

    ``pred`` holds per-pixel probabilities in [0, 1] (differentiable);
    ``mask`` is a binary array of the same shape.  The ε smoothing makes
    the empty-prediction/empty-mask case a perfect score instead of 0/0.
    """
    pred = ag.astensor(pred)
    mask = np.asarray(mask, dtype=np.float32)
    if pred.shape != mask.shape:
        raise ShapeError(
            f"soft_dice_loss: pred shape {pred.shape} != mask shape {mask.shape}")
    if not np.isfinite(pred.data).all():
        raise NumericalError("soft_dice_loss: non-finite prediction values")
    if pred.data.size and (pred.data.min() < 0.0 or pred.data.max() > 1.0):
        raise DataError(
            f"soft_dice_loss: predictions must lie in [0, 1], got range "
            f"[{pred.data.min():.4g}, {pred.data.max():.4g}]")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise DataError("soft_dice_loss: mask must be binary (0/1)")
    intersection = ag.tsum(ag.mul(pred, mask))
    total = ag.add(ag.tsum(pred), float(mask.sum(dtype=np.float64)))
    ratio = ag.div(ag.add(ag.mul(intersection, 2.0), DICE_EPS),
                   ag.add(total, DICE_EPS))
    return ag.sub(1.0, ratio)


def mnc_loss(logits_t, logits_l, logits_avg, label) -> Tensor:
    """Sum of the two branch cross-entropies and the averaged-logits one."""
    return ag.add(ag.add(cross_entropy(logits_t, label),
                         cross_entropy(logits_l, label)),
                  cross_entropy(logits_avg, label))


# ---------------------------------------------------------------------------
# task models
# ---------------------------------------------------------------------------

class ClassificationNet(Module):
    """Backbone + linear head to two class logits (single image)."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.backbone = Backbone(config, rng)
        self.head = ClassifierHead(config.pooled_dim, rng)

    def forward(self, images: Tensor) -> Tensor:
        _, pooled = self.backbone(images)
        return self.head(pooled)


class MultiViewNet(Module):
    """Shared backbone + shared head over both views; mean-logit fusion."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.backbone = Backbone(config, rng)
        self.head = ClassifierHead(config.pooled_dim, rng)

    def forward(self, x_t: Tensor, x_l: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return mnc_forward(self.backbone, self.head, x_t, x_l)


def build_task_model(task: str, encoder_config: EncoderConfig,
                     seed: int = 0) -> Module:
    """Freshly initialized task network (classification or segmentation)."""
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    rng = stream(seed, "finetune-init")
    if task == "nc":
        return ClassificationNet(encoder_config, rng)
    if task == "mnc":
        return MultiViewNet(encoder_config, rng)
    return SegmentationNet(Backbone(encoder_config, rng), rng)


def load_backbone_state(path: str | Path,
                        fingerprint: str | None = None) -> dict[str, np.ndarray]:
    """Backbone tensors from a pretraining checkpoint, prefix stripped.

    The projection-head tensors stored alongside them are discarded — the
    downstream tasks reuse only the backbone.
    """
    state, _bank = load_encoder_state(path, fingerprint)
    prefix = "backbone."
    backbone = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    if not backbone:
        raise CheckpointError(f"checkpoint {path} holds no backbone tensors")
    return backbone


def load_task_model(path: str | Path, task: str, encoder_config: EncoderConfig,
                    ) -> Module:
    """Rebuild a fine-tuned model from its checkpoint (fingerprint-checked)."""
    model = build_task_model(task, encoder_config)
    tensors, _ = load_tensors(path, expect_fingerprint=encoder_config.fingerprint())
    model.load_state_dict(tensors)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSample:
    """One training/evaluation example with preloaded arrays.

    ``image2`` is the longitudinal view (mnc only); ``mask`` is the
    segmentation target (ns only).
    """

    patient_id: str
    label: int
    image: np.ndarray
    image2: np.ndarray | None = None
    mask: np.ndarray | None = None


def collect_samples(dataset_root: str | Path, records: list[PatientRecord],
                    task: str) -> list[TaskSample]:
    """Materialize task-appropriate samples from patient records.

    nc: one sample per present view.  ns: one sample per present view,
    requiring its mask (a view without one is an error).  mnc: one sample
    per paired patient; unpaired records are dropped with a warning.
    """
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    samples: list[TaskSample] = []
    dropped = 0
    for rec in records:
        views = []
        if rec.a:
            views.append((rec.transverse_path, rec.transverse_mask_path))
        if rec.b:
            views.append((rec.longitudinal_path, rec.longitudinal_mask_path))
        if task == "nc":
            for img_path, _ in views:
                samples.append(TaskSample(rec.patient_id, rec.label,
                                          load_image(dataset_root, img_path)))
        elif task == "ns":
            for img_path, mask_path in views:
                if mask_path is None:
                    raise DataError(
                        f"segmentation needs a mask for every view; patient "
                        f"{rec.patient_id!r} has none for {img_path!r}")
                samples.append(TaskSample(rec.patient_id, rec.label,
                                          load_image(dataset_root, img_path),
                                          mask=load_mask(dataset_root, mask_path)))
        else:  # mnc
            if not rec.paired:
                dropped += 1
                continue
            samples.append(TaskSample(
                rec.patient_id, rec.label,
                load_image(dataset_root, rec.transverse_path),
                image2=load_image(dataset_root, rec.longitudinal_path)))
    if dropped:
        _logger.warning("multi-view task dropped %d unpaired record(s)", dropped)
    if not samples:
        raise DataError(f"no usable samples for task {task!r}")
    return samples


def _class1_probability(logits: np.ndarray) -> np.ndarray:
    """Stable softmax probability of class 1 for (B, 2) logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def _batched(indices: np.ndarray, size: int):
    for start in range(0, len(indices), size):
        yield indices[start:start + size]


def _eval_input(sample: TaskSample, which: str = "image") -> np.ndarray:
    return normalize(sample.image if which == "image" else sample.image2)


def evaluate_samples(model: Module, task: str, samples: list[TaskSample],
                     batch_size: int = 32) -> float:
    """Validation/test metric on preloaded samples (no augmentation).

    AUC of the malignant-class probability for nc/mnc (mnc scores the
    averaged branch); mean Dice of the 0.5-thresholded prediction for ns.
    """
    if not samples:
        raise DataError("evaluate_samples: no samples")
    model.eval()
    order = np.arange(len(samples))
    if task == "ns":
        dices = []
        with ag.no_grad():
            for batch in _batched(order, batch_size):
                imgs = np.stack([_eval_input(samples[i]) for i in batch])[:, None]
                logits = model(Tensor(imgs)).data
                preds = (logits[:, 0] >= 0.0).astype(np.float32)  # sigmoid(x) >= .5
                for row, i in enumerate(batch):
                    dices.append(dice_score(preds[row], samples[i].mask))
        return float(np.mean(dices))
    scores = np.empty(len(samples), dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    with ag.no_grad():
        for batch in _batched(order, batch_size):
            if task == "nc":
                imgs = np.stack([_eval_input(samples[i]) for i in batch])[:, None]
                logits = model(Tensor(imgs)).data
            else:
                x_t = np.stack([_eval_input(samples[i]) for i in batch])[:, None]
                x_l = np.stack([_eval_input(samples[i], "image2") for i in batch])[:, None]
                logits = model(Tensor(x_t), Tensor(x_l))[2].data
            scores[batch] = _class1_probability(logits)
    return auc(scores, labels)


def evaluate_task(model: Module, dataset_root: str | Path,
                  records: list[PatientRecord], task: str,
                  batch_size: int = 32) -> float:
    """Metric for a record list (loads images, no augmentation)."""
    return evaluate_samples(model, task, collect_samples(dataset_root, records, task),
                            batch_size=batch_size)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _augmented_batch(samples: list[TaskSample], indices: np.ndarray, task: str,
                     spec: AugmentSpec, seed: int, combo: int, epoch: int):
    """Stack one training batch, drawing per-sample augmentation streams."""
    imgs, imgs2, masks = [], [], []
    for i in indices:
        s = samples[i]
        if task == "mnc":
            img_t, _ = augment_finetune(s.image, None,
                                        stream(seed, "finetune-aug", combo, epoch, int(i), 0), spec)
            img_l, _ = augment_finetune(s.image2, None,
                                        stream(seed, "finetune-aug", combo, epoch, int(i), 1), spec)
            imgs.append(normalize(img_t))
            imgs2.append(normalize(img_l))
        else:
            rng = stream(seed, "finetune-aug", combo, epoch, int(i), 0)
            img, mask = augment_finetune(s.image, s.mask, rng, spec)
            imgs.append(normalize(img))
            if task == "ns":
                masks.append(mask)
    x = Tensor(np.stack(imgs)[:, None])
    labels = np.array([samples[i].label for i in indices], dtype=np.int64)
    if task == "mnc":
        return x, Tensor(np.stack(imgs2)[:, None]), labels
    if task == "ns":
        return x, np.stack(masks)[:, None], labels
    return x, None, labels


def _batch_loss(model: Module, task: str, x: Tensor, extra, labels) -> Tensor:
    if task == "nc":
        return cross_entropy(model(x), labels)
    if task == "mnc":
        lt, ll, lavg = model(x, extra)
        return mnc_loss(lt, ll, lavg, labels)
    probs = ag.sigmoid(model(x))
    return soft_dice_loss(probs, extra)


@dataclass
class _ComboOutcome:
    lr0: float
    epochs: int
    best_metric: float
    best_epoch: int
    best_state: dict[str, np.ndarray]
    history: list[dict]


def _train_combo(task: str, cfg: FinetuneConfig, encoder_config: EncoderConfig,
                 backbone_state: dict[str, np.ndarray] | None,
                 train_samples: list[TaskSample], val_samples: list[TaskSample],
                 spec: AugmentSpec, combo: int, lr0: float, epochs: int,
                 ) -> _ComboOutcome:
    model = build_task_model(task, encoder_config, seed=cfg.seed)
    if backbone_state is not None:
        model.backbone.load_state_dict(backbone_state)
    opt = SGD(model.named_parameters(), lr0=lr0, weight_decay=cfg.weight_decay)
    n = len(train_samples)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = max(1, epochs * steps_per_epoch)

    best_metric, best_epoch = -np.inf, -1
    best_state: dict[str, np.ndarray] = {}
    since_improved = 0
    history: list[dict] = []
    step = 0
    for epoch in range(epochs):
        model.train()
        order = stream(cfg.seed, "finetune-order", combo, epoch).permutation(n)
        losses, last_lr = [], lr0
        for batch in _batched(order, cfg.batch_size):
            x, extra, labels = _augmented_batch(train_samples, batch, task,
                                                spec, cfg.seed, combo, epoch)
            loss = _batch_loss(model, task, x, extra, labels)
            if not np.isfinite(loss.data):
                raise NumericalError(
                    f"non-finite training loss at combo {combo} epoch {epoch}")
            last_lr = cosine_lr(step, total_steps, lr0)
            opt.zero_grad()
            loss.backward()
            opt.step(last_lr)
            step += 1
            losses.append(float(loss.data))
        metric = evaluate_samples(model, task, val_samples, cfg.batch_size)
        history.append({"combo": combo, "lr0": lr0, "epochs": epochs,
                        "epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_metric": metric, "lr": last_lr})
        if metric > best_metric:
            best_metric, best_epoch, since_improved = metric, epoch, 0
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        else:
            since_improved += 1
            if since_improved >= cfg.patience:
                _logger.info("combo %d: early stop at epoch %d (best %.4f @ %d)",
                             combo, epoch, best_metric, best_epoch)
                break
    return _ComboOutcome(lr0, epochs, best_metric, best_epoch, best_state, history)


@dataclass(frozen=True)
class FinetuneResult:
    """Outcome of a grid search: best checkpoint plus full history."""

    ckpt_path: Path
    task: str
    metric_name: str
    best_metric: float
    best_lr0: float
    best_epochs: int
    best_epoch: int
    history: tuple[dict, ...]


def run_finetune(dataset_root: str | Path, splits: Splits, config: FinetuneConfig,
                 encoder_config: EncoderConfig | None = None,
                 augment_spec: AugmentSpec | None = None,
                 out_ckpt: str | Path = "finetuned.ckpt",
                 history_file: str | Path | None = None) -> FinetuneResult:
    """Grid-search fine-tuning on the configured train/validation split.

    Trains every (lr0, epochs) combination from the same initialization,
    early-stops each on the validation metric, keeps the single best
    validation model across the grid and writes it to ``out_ckpt``.  The
    per-epoch history of every combination goes to ``history_file`` as
    JSON lines when given, and is returned either way.
    """
    cfg = config
    encoder_config = encoder_config or EncoderConfig()
    augment_spec = augment_spec or AugmentSpec(output_size=encoder_config.input_size)
    if augment_spec.output_size != encoder_config.input_size:
        raise ConfigError(
            f"augmentation output size {augment_spec.output_size} does not "
            f"match encoder input size {encoder_config.input_size}")

    train_records = list(splits.train_by_r[cfg.proportion])
    val_records = list(splits.val)
    test_ids = {r.patient_id for r in splits.test}
    used_ids = {r.patient_id for r in train_records} | {r.patient_id for r in val_records}
    overlap = used_ids & test_ids
    if overlap:
        raise DataError(
            f"test patients leaked into fine-tuning data: {sorted(overlap)[:5]}")

    backbone_state = None
    if cfg.init_checkpoint is not None:
        backbone_state = load_backbone_state(cfg.init_checkpoint,
                                             encoder_config.fingerprint())
        _logger.info("loaded backbone from %s (projection head discarded)",
                     cfg.init_checkpoint)

    train_samples = collect_samples(dataset_root, train_records, cfg.task)
    val_samples = collect_samples(dataset_root, val_records, cfg.task)
    if cfg.metric_name == "auc":
        val_labels = {s.label for s in val_samples}
        if len(val_labels) < 2:
            raise DataError(
                "validation split holds a single class, so AUC-based early "
                "stopping is undefined; use a larger or rebalanced dataset")

    best: _ComboOutcome | None = None
    history: list[dict] = []
    for combo, (lr0, epochs) in enumerate(itertools.product(cfg.lr_grid,
                                                            cfg.epochs_grid)):
        outcome = _train_combo(cfg.task, cfg, encoder_config, backbone_state,
                               train_samples, val_samples, augment_spec,
                               combo, lr0, epochs)
        history.extend(outcome.history)
        _logger.info("combo %d (lr0=%g, epochs=%d): best %s %.4f at epoch %d",
                     combo, lr0, epochs, cfg.metric_name,
                     outcome.best_metric, outcome.best_epoch)
        if best is None or outcome.best_metric > best.best_metric:
            best = outcome

    out_ckpt = Path(out_ckpt)
    save_tensors(out_ckpt, best.best_state, encoder_config.fingerprint())
    if history_file is not None:
        with open(history_file, "w", encoding="utf-8") as fh:
            for entry in history:
                fh.write(json.dumps(entry) + "\n")
    return FinetuneResult(
        ckpt_path=out_ckpt, task=cfg.task, metric_name=cfg.metric_name,
        best_metric=best.best_metric, best_lr0=best.lr0,
        best_epochs=best.epochs, best_epoch=best.best_epoch,
        history=tuple(history))
