"""
Momentum-contrast pretraining on both views
===========================================

Pretraining learns one encoder shared by both scan planes.  Each step
augments every present view twice, pushes the first draws through the
query encoder and the second draws through a momentum twin, scores the
adaptive contrastive loss against a FIFO memory bank of past momentum
latents, takes an SGD step, moves the momentum weights a small fraction
toward the query weights, and only then enqueues this step's keys.

This script runs a deliberately small configuration (16x16 images, a few
epochs) so the full mechanism is observable in under a minute, then reads
the training log back and plots the loss curve.

Run from the repository root:  python demos/03_pretraining.py
"""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from biview.augment import AugmentSpec
from biview.checkpoint import load_tensors
from biview.data import SplitPlan, generate_synthetic, load_manifest, make_splits
from biview.models import EncoderConfig
from biview.pretrain import PretrainConfig, run_pretraining

out_dir = Path(__file__).parent / "out" / "pretraining"
out_dir.mkdir(parents=True, exist_ok=True)
root = out_dir / "toy80"

# ---------------------------------------------------------------------------
# A small dataset with 25% of patients missing one view: the adaptive loss
# lets those patients join pretraining instead of being dropped.
generate_synthetic(root, num_patients=80, missing_rate=0.25,
                   image_size=16, seed=11)
records = load_manifest(root)
splits = make_splits(records, SplitPlan(), seed=0)
print(f"{len(splits.pretrain)} pretraining patients "
      f"({sum(r.paired for r in splits.pretrain)} paired)")

# ---------------------------------------------------------------------------
# A small encoder to match the 16x16 inputs.  The momentum coefficient,
# bank size, and cosine learning-rate schedule are all in PretrainConfig;
# epochs and batch size are scaled down here to keep the demo quick.
encoder = EncoderConfig(input_size=16, stage_widths=(8, 16),
                        blocks_per_stage=1, proj_hidden=16, proj_dim=8)
config = PretrainConfig(epochs=6, K=64, patients_per_batch=8,
                        lam=0.5, seed=0)
ckpt = out_dir / "pretrained.ckpt"
log = out_dir / "pretrain.log.jsonl"
run_pretraining(root, list(splits.pretrain), config, encoder,
                AugmentSpec(output_size=16), out_ckpt=ckpt, log_file=log)

# ---------------------------------------------------------------------------
# The log holds one JSON line per epoch; the checkpoint stores the query
# encoder, its momentum twin, the optimizer step count, and the memory
# bank, so an interrupted run can resume exactly where it stopped.  Note
# the loss typically rises over the first epochs at this scale: the bank
# starts empty, so the softmax contest gains negatives (and difficulty)
# as the queue fills.
rows = [json.loads(line) for line in log.read_text().splitlines()]
for row in rows:
    print(f"epoch {row['epoch']:2d}  loss {row['mean_loss']:.4f}  "
          f"lr {row['lr']:.4f}")

tensors, _ = load_tensors(ckpt)
bank = tensors["memory_bank.vectors"]
norms = np.linalg.norm(bank, axis=1)
print(f"\ncheckpoint: {len(tensors)} tensors; bank {bank.shape}, "
      f"row norms in [{norms.min():.6f}, {norms.max():.6f}]")

fig, ax = plt.subplots(figsize=(5, 3.2))
ax.plot([r["epoch"] for r in rows], [r["mean_loss"] for r in rows],
        marker="o")
ax.set_xlabel("epoch")
ax.set_ylabel("mean adaptive loss")
ax.set_title("pretraining loss")
fig.tight_layout()
fig.savefig(out_dir / "loss_curve.png", dpi=130)
print(f"wrote {out_dir / 'loss_curve.png'}")
