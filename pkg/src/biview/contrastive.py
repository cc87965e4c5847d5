"""Contrastive loss math: InfoNCE terms and their adaptive combination.

Per patient there are up to four latent vectors — two per view, from the
query and momentum encoders respectively. Four InfoNCE terms arise:

    L_ff = nce(y_f1, y_f2)   L_gg = nce(y_g1, y_g2)     (single-view)
    L_fg = nce(y_f1, y_g2)   L_gf = nce(y_g1, y_f2)     (cross-view)

and the adaptive combination with presence indicators a, b in {0, 1}:

    L = a*L_ff + b*L_gg + a*b*lambda*(L_fg + L_gf)

which degenerates to a single-view loss when one view is missing and to the
plain two-view MoCo objective when lambda = 0. Negatives always come from
the shared memory bank snapshot; queries are never contrasted against other
in-batch queries. Gradients flow only through the query-side latents
(y_f1, y_g1); momentum latents and bank contents are constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import DTYPE, Tensor, astensor
from .errors import ConfigError, DataError, NumericalError, ShapeError


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"ContrastiveConfig: tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"ContrastiveConfig: lambda must be >= 0, got {self.lam}")


def _as_rows(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


@dataclass
class ViewLatents:
    """One patient's latents; a view is present iff both its vectors are.

    Query-side vectors (y_f1, y_g1) may be graph Tensors; momentum-side
    vectors (y_f2, y_g2) are plain arrays (they carry no gradient by
    construction). `check=False` skips the unit-norm validation — used by
    gradient checks, which perturb latents off the unit sphere.
    """

    y_f1: Tensor | None = None
    y_f2: np.ndarray | None = None
    y_g1: Tensor | None = None
    y_g2: np.ndarray | None = None
    check: bool = True

    def __post_init__(self):
        if (self.y_f1 is None) != (self.y_f2 is None):
            raise DataError("ViewLatents: y_f1 and y_f2 must be present together")
        if (self.y_g1 is None) != (self.y_g2 is None):
            raise DataError("ViewLatents: y_g1 and y_g2 must be present together")
        if self.y_f1 is not None:
            self.y_f1 = astensor(self.y_f1)
        if self.y_g1 is not None:
            self.y_g1 = astensor(self.y_g1)
        if self.y_f2 is not None:
            self.y_f2 = np.asarray(self.y_f2, dtype=DTYPE)
        if self.y_g2 is not None:
            self.y_g2 = np.asarray(self.y_g2, dtype=DTYPE)
        if self.check:
            for name in ("y_f1", "y_f2", "y_g1", "y_g2"):
                v = getattr(self, name)
                if v is None:
                    continue
                data = v.data if isinstance(v, Tensor) else v
                norm = float(np.linalg.norm(data))
                if abs(norm - 1.0) > 1e-4:
                    raise NumericalError(f"ViewLatents: {name} has norm {norm:.6f}, expected 1 +- 1e-4")

    @property
    def a(self) -> int:
        return int(self.y_f1 is not None)

    @property
    def b(self) -> int:
        return int(self.y_g1 is not None)


def cosine_similarity(u, v) -> Tensor:
    """u.v / (|u||v|); rejects zero vectors. Differentiable in both arguments."""
    u, v = astensor(u), astensor(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: need equal-length vectors, got {u.shape} and {v.shape}")
    if float(np.linalg.norm(u.data)) == 0.0 or float(np.linalg.norm(v.data)) == 0.0:
        raise NumericalError("cosine_similarity: zero vector has no direction")
    return ag.matmul(ag.l2_normalize(u), ag.l2_normalize(v).data)


def info_nce(q, k, negatives, tau: float) -> Tensor:
    """One InfoNCE term: -log of the positive's share of the (N+1)-way softmax.

    q: query vector (gradient flows through it); k: positive key (constant);
    negatives: (N, D) array / list of vectors (constants; may be empty, in
    which case the loss is exactly 0). Computed as
    logsumexp([s_pos, s_1..s_N] / tau) - s_pos / tau with max-shift inside.
    """
    if not tau > 0:
        raise ConfigError(f"info_nce: tau must be positive, got {tau}")
    q = astensor(q)
    k = np.asarray(k.data if isinstance(k, Tensor) else k, dtype=DTYPE)
    if q.ndim != 1 or k.shape != q.shape:
        raise ShapeError(f"info_nce: query {q.shape} and key {k.shape} must be equal-length vectors")
    if float(np.linalg.norm(q.data)) == 0.0:
        raise NumericalError("info_nce: zero query vector")
    knorm = float(np.linalg.norm(k))
    if knorm == 0.0:
        raise NumericalError("info_nce: zero key vector")
    qn = ag.l2_normalize(q)
    pos = ag.matmul(qn, k / knorm)  # scalar similarity
    negs = _as_rows(negatives) if len(negatives) else None
    if negs is None:
        # numerator equals denominator: the loss is identically zero, with
        # zero gradient into q
        return ag.mul(ag.sub(pos, pos.detach()), 0.0)
    if negs.shape[1] != q.shape[0]:
        raise ShapeError(f"info_nce: negatives {negs.shape} incompatible with query {q.shape}")
    nnorm = np.linalg.norm(negs, axis=1)
    if (nnorm == 0.0).any():
        raise NumericalError("info_nce: zero vector among negatives")
    neg_sims = ag.matmul(Tensor(negs / nnorm[:, None]), qn)  # (N,)
    inv_tau = 1.0 / tau
    logits = ag.concat([ag.reshape(pos, (1,)), neg_sims]) * inv_tau
    loss = ag.sub(ag.logsumexp(logits), pos * inv_tau)
    if not np.isfinite(loss.data).all():
        raise NumericalError(
            f"info_nce: non-finite loss (positive sim {float(pos.data)}, "
            f"negative sims {np.asarray(neg_sims.data)[:8]}...)")
    return loss


def single_view_losses(latents: ViewLatents, negatives, tau: float) -> tuple[Tensor | None, Tensor | None]:
    """(L_ff, L_gg); each present only when its view is."""
    l_ff = info_nce(latents.y_f1, latents.y_f2, negatives, tau) if latents.a else None
    l_gg = info_nce(latents.y_g1, latents.y_g2, negatives, tau) if latents.b else None
    return l_ff, l_gg


def cross_view_losses(latents: ViewLatents, negatives, tau: float) -> tuple[Tensor | None, Tensor | None]:
    """(L_fg, L_gf); present only for paired patients."""
    if not (latents.a and latents.b):
        return None, None
    l_fg = info_nce(latents.y_f1, latents.y_g2, negatives, tau)
    l_gf = info_nce(latents.y_g1, latents.y_f2, negatives, tau)
    return l_fg, l_gf


def pair_loss(latents: ViewLatents, negatives, tau: float) -> Tensor:
    """L_ff + L_gg + L_fg + L_gf; defined on paired patients only."""
    if not (latents.a and latents.b):
        raise DataError("pair_loss: both views required (use adaptive_loss for missing views)")
    l_ff, l_gg = single_view_losses(latents, negatives, tau)
    l_fg, l_gf = cross_view_losses(latents, negatives, tau)
    return ag.add(ag.add(l_ff, l_gg), ag.add(l_fg, l_gf))


def adaptive_loss(latents: ViewLatents, negatives, config: ContrastiveConfig) -> Tensor:
    """a*L_ff + b*L_gg + a*b*lambda*(L_fg + L_gf).

    Zero-weighted terms are skipped outright (never evaluated), so a missing
    view degenerates exactly to the other view's single-view loss, and
    lambda=1 on paired input reproduces pair_loss bit-for-bit (same
    expression tree).
    """
    a, b = latents.a, latents.b
    if a + b == 0:
        raise DataError("adaptive_loss: patient has no views (a = b = 0)")
    l_ff, l_gg = single_view_losses(latents, negatives, config.tau)
    if not (a and b):
        return l_ff if a else l_gg
    total = ag.add(l_ff, l_gg)
    if config.lam > 0:
        l_fg, l_gf = cross_view_losses(latents, negatives, config.tau)
        cross = ag.add(l_fg, l_gf)
        total = ag.add(total, cross if config.lam == 1.0 else ag.mul(cross, config.lam))
    return total


def batch_loss(patients: list[ViewLatents], negatives, config: ContrastiveConfig) -> Tensor:
    """Arithmetic mean of adaptive_loss over the patients in a batch."""
    if not patients:
        raise DataError("batch_loss: empty batch")
    total: Tensor | None = None
    for i, latents in enumerate(patients):
        try:
            loss = adaptive_loss(latents, negatives, config)
        except (DataError, NumericalError, ShapeError) as e:
            raise type(e)(f"patient {i}: {e}") from e
        total = loss if total is None else ag.add(total, loss)
    return ag.mul(total, 1.0 / len(patients))
