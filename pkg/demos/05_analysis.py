"""
Looking inside the trained models
=================================

Two post-hoc analyses ship with the package.

Activation maps answer "where does the backbone respond?": the deepest
stage's feature maps are channel-averaged, resized to the input, and
min-max scaled; thresholding them yields a crude localization whose Dice
overlap with the nodule mask quantifies how nodule-focused the learned
features are — without any segmentation training.

Layer-wise linear CKA answers "which layers changed?": it compares the
representations of two same-architecture backbones on a probe set, layer
by layer.  Comparing a fine-tuned model against its own initialization
shows early layers staying put while deeper layers adapt.

Run from the repository root:  python demos/05_analysis.py
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from biview.analysis import (ActivationMapConfig, activation_map, actmap_dice,
                             cka_map, load_any_backbone)
from biview.augment import AugmentSpec, normalize
from biview.data import SplitPlan, generate_synthetic, load_manifest, make_splits
from biview.finetune import FinetuneConfig, collect_samples, run_finetune
from biview.models import EncoderConfig
from biview.pretrain import PretrainConfig, run_pretraining

out_dir = Path(__file__).parent / "out" / "analysis"
out_dir.mkdir(parents=True, exist_ok=True)
root = out_dir / "toy150"

# ---------------------------------------------------------------------------
# Train the two models to compare: a quick pretraining checkpoint and a
# classifier fine-tuned from it.
generate_synthetic(root, num_patients=150, missing_rate=0.15,
                   image_size=16, seed=33)
records = load_manifest(root)
splits = make_splits(records, SplitPlan(), seed=0)
encoder = EncoderConfig(input_size=16, stage_widths=(8, 16),
                        blocks_per_stage=1, proj_hidden=16, proj_dim=8)
augment = AugmentSpec(output_size=16)

pre_ckpt = out_dir / "pretrained.ckpt"
run_pretraining(root, list(splits.pretrain),
                PretrainConfig(epochs=8, K=128, patients_per_batch=8, seed=0),
                encoder, augment, out_ckpt=pre_ckpt)
ft_ckpt = out_dir / "finetuned.ckpt"
run_finetune(root, splits,
             FinetuneConfig(task="nc", proportion=100, lr_grid=(0.05,),
                            epochs_grid=(10,), batch_size=16, patience=10,
                            seed=0, init_checkpoint=str(pre_ckpt)),
             encoder, augment, out_ckpt=ft_ckpt)

# ---------------------------------------------------------------------------
# Activation maps on test patients.  Both checkpoint flavors load through
# the same helper; everything but the backbone is ignored.
backbone = load_any_backbone(pre_ckpt, encoder)
test_ns = collect_samples(root, list(splits.test), "ns")

config = ActivationMapConfig()          # default threshold sweep
per_threshold = {t: [] for t in config.thresholds}
for sample in test_ns:
    amap = activation_map(backbone, sample.image)
    for t, d in actmap_dice(amap, sample.mask, config).items():
        per_threshold[t].append(d)
print("activation-map Dice by threshold (pretrained backbone):")
for t, vals in per_threshold.items():
    print(f"  t={t:.1f}  mean {np.mean(vals):.3f}")

sample = test_ns[0]
amap = activation_map(backbone, sample.image)
fig, axes = plt.subplots(1, 3, figsize=(8, 2.8))
for ax, (img, title) in zip(axes, [
        (sample.image, "input"),
        (amap.values, "activation map"),
        (sample.mask, "nodule mask")]):
    ax.imshow(img, cmap="gray" if title != "activation map" else "magma",
              interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.axis("off")
fig.tight_layout()
fig.savefig(out_dir / "activation_map.png", dpi=130)
print(f"wrote {out_dir / 'activation_map.png'}")

# ---------------------------------------------------------------------------
# CKA between the pretrained backbone and its fine-tuned descendant over a
# normalized probe set.  The diagonal compares layer i with itself; its
# drift away from 1.0 with depth is the classic feature-reuse picture:
# generic early filters survive fine-tuning, task-specific depth does not.
probe = np.stack([normalize(s.image) for s in test_ns])
grid = cka_map(backbone, load_any_backbone(ft_ckpt, encoder), probe)
print("\nCKA diagonal (pretrained vs fine-tuned):")
for name, value in zip(grid.layer_names, grid.diagonal):
    print(f"  {name:8s} {value:.3f}")

grid.save_csv(out_dir / "cka.csv")
grid.save_heatmap(out_dir / "cka.png")
print(f"wrote {out_dir / 'cka.csv'} and {out_dir / 'cka.png'}")
