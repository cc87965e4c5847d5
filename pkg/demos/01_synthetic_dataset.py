"""
Synthetic two-view nodule dataset
=================================

Every capability in this package runs end to end on a bundled synthetic
data generator: grayscale speckle phantoms of a nodule imaged in two
orthogonal planes (transverse and longitudinal), with segmentation masks,
a per-patient benign/malignant label, and an optional fraction of
patients missing one view.  This script generates a small dataset,
inspects its manifest, and renders one patient per class.

Run from the repository root:  python demos/01_synthetic_dataset.py
"""

import json
from collections import Counter
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from biview.data import (SplitPlan, dataset_hash, generate_synthetic,
                         load_image, load_manifest, load_mask, make_splits)

out_dir = Path(__file__).parent / "out" / "dataset"
out_dir.mkdir(parents=True, exist_ok=True)
root = out_dir / "toy120"

# ---------------------------------------------------------------------------
# Generate 120 patients at 32x32 with 20% of patients missing one view.
# The whole dataset is a pure function of its arguments: rerunning with the
# same seed writes byte-identical files, which is what makes training runs
# reproducible end to end.
generate_synthetic(root, num_patients=120, missing_rate=0.2,
                   image_size=32, seed=7)
print(f"dataset at {root}")
print(f"content hash {dataset_hash(root)[:16]}…")

# ---------------------------------------------------------------------------
# The manifest is one JSON record per patient: view image paths (null when
# the view is missing), mask paths, and the label.
records = load_manifest(root)
first = json.loads((root / "manifest.jsonl").read_text().splitlines()[0])
print("\nfirst manifest record:")
print(json.dumps(first, indent=2))

labels = Counter(r.label for r in records)
paired = sum(r.paired for r in records)
print(f"\n{len(records)} patients — {labels[1]} malignant / {labels[0]} benign, "
      f"{paired} with both views, {len(records) - paired} single-view")

# ---------------------------------------------------------------------------
# Patient-level splits: paired patients are shuffled into ten subsets, two
# become the held-out test set, the rest divide 7:1 into train and
# validation.  Label-budget subsets (10/20/50/100 percent of train) are
# nested prefixes of one shuffled order, and single-view patients join the
# pretraining pool only.
splits = make_splits(records, SplitPlan(), seed=0)
print(f"\nsplits: pretrain {len(splits.pretrain)}, "
      f"train {len(splits.train_by_r[100])} "
      f"(10% budget: {len(splits.train_by_r[10])}), "
      f"val {len(splits.val)}, test {len(splits.test)}")

# ---------------------------------------------------------------------------
# Render one benign and one malignant paired patient.  Malignancy shows up
# as a jagged boundary, or as a nodule that is deeper than it is long —
# visible as a taller-than-wide footprint in both planes, since the
# in-plane extents track each other.
fig, axes = plt.subplots(2, 4, figsize=(10, 5.2))
for row, want in enumerate([0, 1]):
    rec = next(r for r in records if r.label == want and r.paired)
    panels = [
        (load_image(root, rec.transverse_path), "transverse"),
        (load_mask(root, rec.transverse_mask_path), "transverse mask"),
        (load_image(root, rec.longitudinal_path), "longitudinal"),
        (load_mask(root, rec.longitudinal_mask_path), "longitudinal mask"),
    ]
    for ax, (img, name) in zip(axes[row], panels):
        ax.imshow(np.asarray(img), cmap="gray", interpolation="nearest")
        ax.set_title(f"{name}\n({'malignant' if want else 'benign'} "
                     f"{rec.patient_id})", fontsize=8)
        ax.axis("off")
fig.tight_layout()
fig.savefig(out_dir / "patients.png", dpi=130)
print(f"\nwrote {out_dir / 'patients.png'}")
