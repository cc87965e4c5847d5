"""Contrastive pre-training loop for the two-view encoder framework.

One training step over a batch of patients:

1. each present view is augmented twice; the first draw goes through the
   view's query encoder, the second through its momentum encoder,
2. the adaptive contrastive loss is computed per patient against a frozen
   snapshot of the shared memory bank and averaged over the batch,
3. the query weights take an SGD step (momentum weights receive no
   gradients),
4. every momentum parameter and normalization buffer moves toward its
   query counterpart by exponential moving average,
5. the momentum-side latents are enqueued — per patient, transverse first,
   then longitudinal — displacing the oldest bank entries.

Checkpoints hold the query encoder (backbone + projection head), the bank
contents, and the encoder-architecture fingerprint.  Initializing a run
from such a checkpoint restores the query weights, copies them into the
momentum encoders, and refills the bank; with ``two_stage=True`` the
documented second-stage overrides (larger bank, smaller learning rate)
replace the corresponding config fields.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .augment import AugmentSpec, augment_pretrain, normalize, stream
from .autograd import Tensor
from .bank import MemoryBank
from .checkpoint import load_tensors, save_tensors
from .contrastive import ContrastiveConfig, ViewLatents, batch_loss
from .data import PatientRecord, batch_sampler, load_image
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .layers import Module
from .models import EncoderConfig, Encoder, EncoderSet
from .optim import SGD, cosine_lr

_logger = logging.getLogger(__name__)

__all__ = [
    "PretrainConfig",
    "TrainState",
    "PatientViews",
    "ema_update",
    "pretrain_step",
    "run_pretraining",
    "make_patient_views",
    "save_encoder_checkpoint",
    "load_encoder_state",
]

BANK_TENSOR = "memory_bank.vectors"
QUERY_PREFIX = "f_q."


@dataclass(frozen=True)
class PretrainConfig:
    """Hyperparameters of one pre-training run.

    ``two_stage_overrides`` lists the fields replaced when ``two_stage`` is
    set — the documented second-stage setting enlarges the bank to 1024 and
    lowers the initial learning rate to 0.01.
    """

    tau: float = 0.1
    K: int = 512
    alpha: float = 0.99
    lam: float = 0.5
    lr0: float = 0.03
    weight_decay: float = 1e-4
    patients_per_batch: int = 64
    epochs: int = 200
    seed: int = 0
    init_checkpoint: str | None = None
    two_stage: bool = False
    two_stage_overrides: dict = field(
        default_factory=lambda: {"K": 1024, "lr0": 0.01})

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        for name in ("tau", "lr0"):
            v = getattr(self, name)
            if not (v > 0):
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.patients_per_batch < 1:
            raise ConfigError(f"patients_per_batch must be >= 1, "
                              f"got {self.patients_per_batch}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        unknown = set(self.two_stage_overrides) - {"K", "lr0"}
        if unknown:
            raise ConfigError(f"two_stage_overrides may only set K and lr0, "
                              f"got {sorted(unknown)}")

    @classmethod
    def desk(cls, **overrides) -> "PretrainConfig":
        """Small-scale profile: quick CPU runs with the same loss geometry."""
        base = dict(epochs=30, patients_per_batch=16, K=256)
        base.update(overrides)
        return cls(**base)

    def effective(self) -> "PretrainConfig":
        """The config actually trained with, after two-stage overrides."""
        if not self.two_stage:
            return self
        kw = {k: v for k, v in self.two_stage_overrides.items()}
        return replace(self, two_stage=False, **kw)

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(tau=self.tau, lam=self.lam)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["two_stage_overrides"] = dict(self.two_stage_overrides)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown PretrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    """Everything one training thread owns."""

    encoders: EncoderSet
    bank: MemoryBank
    opt: SGD
    t: int = 0
    seed: int = 0


@dataclass(frozen=True)
class PatientViews:
    """One patient's augmented, normalized images for a single step.

    Draw 1 of each present view feeds the query encoder, draw 2 the
    momentum encoder; a view is either present with both draws or absent
    with both.
    """

    patient_id: str
    x_f1: np.ndarray | None = None
    x_f2: np.ndarray | None = None
    x_g1: np.ndarray | None = None
    x_g2: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.x_f1 is None) != (self.x_f2 is None):
            raise DataError(f"patient {self.patient_id}: transverse draws must "
                            f"be both present or both absent")
        if (self.x_g1 is None) != (self.x_g2 is None):
            raise DataError(f"patient {self.patient_id}: longitudinal draws "
                            f"must be both present or both absent")
        if self.x_f1 is None and self.x_g1 is None:
            raise DataError(f"patient {self.patient_id}: no views")


def make_patient_views(images: dict[str, np.ndarray | None], patient_id: str,
                       seed: int, epoch: int, sample_index: int,
                       spec: AugmentSpec) -> PatientViews:
    """Augment a patient's raw views (keys 't', 'l') twice each and normalize.

    The random stream of each draw is keyed by (seed, epoch, sample index,
    view, draw), so results do not depend on batch composition or ordering.
    """
    out: dict[str, np.ndarray | None] = {}
    for view_id, (key, f_name, g_name) in enumerate(
            (("t", "x_f1", "x_f2"), ("l", "x_g1", "x_g2"))):
        raw = images.get(key)
        if raw is None:
            out[f_name] = out[g_name] = None
            continue
        for draw, name in enumerate((f_name, g_name), start=1):
            rng = stream(seed, "augment", epoch, sample_index, view_id, draw)
            out[name] = normalize(augment_pretrain(raw, rng, spec))
    return PatientViews(patient_id=patient_id, **out)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------


def ema_update(momentum: Module, query: Module, alpha: float) -> None:
    """Move every momentum parameter and buffer toward its query twin:
    value <- alpha * value + (1 - alpha) * query_value, elementwise.

    Covers normalization running statistics as well as weights; this update
    is the only writer of momentum-encoder state after initialization.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    m_params = momentum.named_parameters()
    q_params = query.named_parameters()
    m_bufs = momentum.named_buffers()
    q_bufs = query.named_buffers()
    if set(m_params) != set(q_params) or set(m_bufs) != set(q_bufs):
        raise ShapeError(
            f"ema_update: modules disagree — parameters {sorted(set(m_params) ^ set(q_params))}, "
            f"buffers {sorted(set(m_bufs) ^ set(q_bufs))}")
    a = np.float64(alpha)
    for name, p_m in m_params.items():
        p_q = q_params[name]
        if p_m.data.shape != p_q.data.shape:
            raise ShapeError(f"ema_update: parameter {name} has shape "
                             f"{p_m.data.shape} vs {p_q.data.shape}")
        p_m.data = (a * p_m.data + (1.0 - a) * p_q.data).astype(np.float32)
    for name, b_m in m_bufs.items():
        b_q = q_bufs[name]
        if b_m.shape != b_q.shape:
            raise ShapeError(f"ema_update: buffer {name} has shape "
                             f"{b_m.shape} vs {b_q.shape}")
        b_m[...] = (a * b_m + (1.0 - a) * b_q).astype(np.float32)


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


def _stack(images: list[np.ndarray]) -> Tensor:
    return Tensor(np.stack(images)[:, None, :, :].astype(np.float32))


def pretrain_step(state: TrainState, views: list[PatientViews],
                  config: PretrainConfig, lr: float | None = None) -> float:
    """Run one optimization step over a patient batch; returns the loss.

    The loss for every patient is computed against the same bank snapshot
    taken before the step; the bank is refilled with this step's
    momentum-side latents only after the weight updates.
    """
    if not views:
        raise DataError("pretrain_step: empty batch")
    state.encoders.train()
    cc = config.contrastive()
    enc = state.encoders

    f_idx = [i for i, v in enumerate(views) if v.x_f1 is not None]
    g_idx = [i for i, v in enumerate(views) if v.x_g1 is not None]

    yf1 = enc.f_q.latents(_stack([views[i].x_f1 for i in f_idx])) if f_idx else None
    yg1 = enc.g_q.latents(_stack([views[i].x_g1 for i in g_idx])) if g_idx else None
    with ag.no_grad():
        yf2 = enc.f_m.latents(_stack([views[i].x_f2 for i in f_idx])).data if f_idx else None
        yg2 = enc.g_m.latents(_stack([views[i].x_g2 for i in g_idx])).data if g_idx else None

    f_row = {patient: row for row, patient in enumerate(f_idx)}
    g_row = {patient: row for row, patient in enumerate(g_idx)}
    negatives = state.bank.negatives()

    latents = []
    for i, v in enumerate(views):
        latents.append(ViewLatents(
            y_f1=ag.index_rows(yf1, f_row[i]) if i in f_row else None,
            y_f2=yf2[f_row[i]] if i in f_row else None,
            y_g1=ag.index_rows(yg1, g_row[i]) if i in g_row else None,
            y_g2=yg2[g_row[i]] if i in g_row else None,
        ))
    loss = batch_loss(latents, negatives, cc)
    value = float(loss.data)
    if not np.isfinite(value):
        paired = sum(1 for v in views if v.x_f1 is not None and v.x_g1 is not None)
        raise NumericalError(
            f"pretrain_step: non-finite loss {value} at step {state.t} "
            f"(batch of {len(views)} patients, {paired} paired, "
            f"bank occupancy {state.bank.occupancy})")

    state.opt.zero_grad()
    loss.backward()
    state.opt.step(lr=lr)
    for query, mom in enc.ema_pairs():
        ema_update(mom, query, config.alpha)

    rows = []
    for i, v in enumerate(views):
        if i in f_row:
            rows.append(yf2[f_row[i]])
        if i in g_row:
            rows.append(yg2[g_row[i]])
    state.bank.enqueue_batch(np.stack(rows))
    state.t += 1
    return value


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------


def save_encoder_checkpoint(path: str | Path, query: Encoder,
                            bank: MemoryBank, fingerprint: str) -> None:
    """Write the query encoder (backbone + projection) and bank contents."""
    tensors = {QUERY_PREFIX + k: v for k, v in query.state_dict().items()}
    tensors[BANK_TENSOR] = bank.to_array()
    save_tensors(path, tensors, fingerprint)


def load_encoder_state(path: str | Path, fingerprint: str | None
                       ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Read a checkpoint back into (query state dict, bank rows)."""
    tensors, _ = load_tensors(path, expect_fingerprint=fingerprint)
    if BANK_TENSOR not in tensors:
        raise DataError(f"checkpoint {path} has no {BANK_TENSOR!r} tensor")
    bank_rows = tensors.pop(BANK_TENSOR)
    state = {}
    for name, arr in tensors.items():
        if not name.startswith(QUERY_PREFIX):
            raise DataError(f"checkpoint {path}: unexpected tensor {name!r}")
        state[name[len(QUERY_PREFIX):]] = arr
    return state, bank_rows


def _apply_init(encoders: EncoderSet, bank: MemoryBank,
                state: dict[str, np.ndarray], bank_rows: np.ndarray) -> None:
    """Restore query weights, copy them into the momentum twins, refill bank."""
    encoders.f_q.load_state_dict(state)
    if encoders.g_q is not encoders.f_q:
        encoders.g_q.load_state_dict(state)
    for mom in {id(e): e for e in (encoders.f_m, encoders.g_m)}.values():
        mom.load_state_dict(state)
    if bank_rows.size:
        if bank_rows.shape[0] > bank.capacity:
            bank_rows = bank_rows[-bank.capacity:]  # keep the newest entries
        bank.enqueue_batch(bank_rows)


# ---------------------------------------------------------------------------
# full schedule
# ---------------------------------------------------------------------------


def run_pretraining(dataset_root: str | Path, records: list[PatientRecord],
                    config: PretrainConfig, encoder_config: EncoderConfig | None = None,
                    augment_spec: AugmentSpec | None = None,
                    out_ckpt: str | Path = "pretrained.ckpt",
                    log_file: str | Path | None = None) -> Path:
    """Train the full schedule and write the final checkpoint.

    The checkpoint at ``out_ckpt`` is refreshed after every epoch, so an
    interrupted run can be restarted from its last completed epoch by
    passing the partial checkpoint as ``init_checkpoint`` (weights and bank
    carry over; the optimizer restarts fresh).  With ``epochs=0`` the
    initial weights are written unchanged — initializing from a checkpoint
    and saving immediately reproduces it bitwise.
    """
    cfg = config.effective()
    encoder_config = encoder_config or EncoderConfig()
    augment_spec = augment_spec or AugmentSpec(output_size=encoder_config.input_size)
    if augment_spec.output_size != encoder_config.input_size:
        raise ConfigError(
            f"augmentation output size {augment_spec.output_size} does not "
            f"match encoder input size {encoder_config.input_size}")
    if not records:
        raise DataError("run_pretraining: no records")

    encoders = EncoderSet.build(encoder_config, seed=cfg.seed)
    bank = MemoryBank(cfg.K, encoder_config.proj_dim)
    fingerprint = encoder_config.fingerprint()
    if cfg.init_checkpoint is not None:
        state, bank_rows = load_encoder_state(cfg.init_checkpoint, fingerprint)
        _apply_init(encoders, bank, state, bank_rows)
        _logger.info("initialized from %s (bank carried %d vectors)",
                     cfg.init_checkpoint, bank.occupancy)

    opt = SGD(encoders.trainable_parameters(), lr0=cfg.lr0,
              weight_decay=cfg.weight_decay)
    state = TrainState(encoders=encoders, bank=bank, opt=opt, seed=cfg.seed)

    images: dict[str, dict[str, np.ndarray | None]] = {}
    index_of: dict[str, int] = {}
    for idx, rec in enumerate(records):
        index_of[rec.patient_id] = idx
        images[rec.patient_id] = {
            "t": load_image(dataset_root, rec.transverse_path) if rec.a else None,
            "l": load_image(dataset_root, rec.longitudinal_path) if rec.b else None,
        }

    steps_per_epoch = -(-len(records) // cfg.patients_per_batch)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    out_ckpt = Path(out_ckpt)
    log_handle = open(log_file, "w", encoding="utf-8") if log_file else None
    try:
        last_lr = cfg.lr0
        for epoch in range(cfg.epochs):
            batches = batch_sampler(records, cfg.patients_per_batch,
                                    cfg.seed, epoch)
            losses = []
            for batch in batches:
                views = [make_patient_views(images[r.patient_id], r.patient_id,
                                            cfg.seed, epoch,
                                            index_of[r.patient_id], augment_spec)
                         for r in batch]
                last_lr = cosine_lr(state.t, total_steps, cfg.lr0)
                losses.append(pretrain_step(state, views, cfg, lr=last_lr))
            mean_loss = float(np.mean(losses))
            if log_handle:
                log_handle.write(json.dumps({
                    "epoch": epoch, "mean_loss": mean_loss, "lr": last_lr,
                    "bank_occupancy": bank.occupancy}) + "\n")
                log_handle.flush()
            _logger.info("epoch %d: mean loss %.4f, lr %.5f, bank %d/%d",
                         epoch, mean_loss, last_lr, bank.occupancy, cfg.K)
            save_encoder_checkpoint(out_ckpt, encoders.f_q, bank, fingerprint)
        if cfg.epochs == 0:
            save_encoder_checkpoint(out_ckpt, encoders.f_q, bank, fingerprint)
    finally:
        if log_handle:
            log_handle.close()
    return out_ckpt
