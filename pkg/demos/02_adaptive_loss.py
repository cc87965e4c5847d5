"""
Adaptive two-view contrastive loss
==================================

The training objective scores four InfoNCE terms per patient — two
within-view terms (augmentation pairs of the same image) and two
cross-view terms (transverse query against longitudinal key and vice
versa) — and weights them

    a * L_ff  +  b * L_gg  +  a * b * lambda * (L_fg + L_gf)

where ``a``/``b`` are 1 when the transverse/longitudinal view is present
and 0 otherwise.  A patient with one view therefore degenerates to plain
single-view contrastive learning, with no masking epsilon or renormalizing
fudge: the absent terms are never evaluated at all.  This script walks
through the arithmetic on toy vectors.

Run from the repository root:  python demos/02_adaptive_loss.py
"""

import numpy as np

from biview.contrastive import (ContrastiveConfig, ViewLatents, adaptive_loss,
                                batch_loss, info_nce, pair_loss)

rng = np.random.default_rng(0)


def unit(n, d=8):
    v = rng.normal(size=(n, d)).astype(np.float32)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


negatives = unit(6)
f1, f2, g1, g2 = unit(4)

# ---------------------------------------------------------------------------
# One InfoNCE term: the query's similarity to its positive key must win a
# softmax against the memory-bank negatives.  Low temperature sharpens the
# contest.
for tau in (0.5, 0.1):
    print(f"info_nce(tau={tau}):  {float(info_nce(f1, f2, negatives, tau).data):.4f}")

# ---------------------------------------------------------------------------
# A paired patient at lambda=1 is exactly the four-term sum; at lambda=0
# the cross-view terms vanish and only the augmentation terms remain.
paired = ViewLatents(y_f1=f1, y_f2=f2, y_g1=g1, y_g2=g2)
cfg = lambda lam: ContrastiveConfig(tau=0.1, lam=lam)
print(f"\npaired, lambda=1.0:  {float(adaptive_loss(paired, negatives, cfg(1.0)).data):.4f}"
      f"  (= four-term sum {float(pair_loss(paired, negatives, 0.1).data):.4f})")
print(f"paired, lambda=0.0:  {float(adaptive_loss(paired, negatives, cfg(0.0)).data):.4f}"
      f"  (= L_ff + L_gg)")
print(f"paired, lambda=0.5:  {float(adaptive_loss(paired, negatives, cfg(0.5)).data):.4f}"
      f"  (cross-view terms at half weight)")

# ---------------------------------------------------------------------------
# Missing views: the same configuration scores a transverse-only patient as
# pure L_ff — bit-for-bit equal to calling info_nce directly, because the
# zero-weighted terms are skipped rather than multiplied by zero.
only_f = ViewLatents(y_f1=f1, y_f2=f2)
lhs = float(adaptive_loss(only_f, negatives, cfg(0.5)).data)
rhs = float(info_nce(f1, f2, negatives, 0.1).data)
print(f"\ntransverse-only:  adaptive {lhs!r}  ==  single-view {rhs!r}: {lhs == rhs}")

# ---------------------------------------------------------------------------
# A batch mixes paired and single-view patients freely; the batch loss is
# the plain arithmetic mean over patients, so one patient's missing view
# never rescales another patient's terms.
batch = [
    ViewLatents(y_f1=f1, y_f2=f2, y_g1=g1, y_g2=g2),
    ViewLatents(y_f1=unit(1)[0], y_f2=unit(1)[0]),    # transverse only
    ViewLatents(y_g1=unit(1)[0], y_g2=unit(1)[0]),    # longitudinal only
]
print(f"\nmixed batch of 3:  {float(batch_loss(batch, negatives, cfg(0.5)).data):.4f}"
      f"  (mean of the three per-patient losses)")
