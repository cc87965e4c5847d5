"""biview: two-view contrastive self-supervised pretraining for paired
ultrasound-style nodule images, with an adaptive loss for missing views.

The package is a small numpy-based research library:

  - `biview.autograd` / `biview.layers` / `biview.optim`: float32 tape
    autograd engine, layer modules and SGD + cosine schedule.
  - `biview.models`: encoder/projection/classifier/segmentation networks.
  - `biview.contrastive` / `biview.bank`: InfoNCE terms, the adaptive
    missing-view combination, and the FIFO memory bank of negatives.
  - `biview.augment` / `biview.data`: augmentation pipelines, the synthetic
    paired-view dataset generator, manifests, splits and batch sampling.
  - `biview.pretrain` / `biview.finetune`: the two training engines.
  - `biview.metrics` / `biview.analysis`: AUC/Dice/paired t-test, activation
    maps and linear CKA.
  - `biview.cli`: the `biview` command (gen-data / pretrain / finetune /
    eval / analyze).
"""

__version__ = "0.1.0"
