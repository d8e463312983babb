"""Training losses: batch-all triplet over per-strip embeddings plus
per-strip softmax cross-entropy, combined by unweighted sum.

The triplet hinge is [D(anchor, positive) - D(anchor, negative) + m]_+ with
Euclidean D computed per strip on raw strip vectors.  As printed in the
source formulation the two distance operands appear swapped, which would
reward collapsing classes; the corrected orientation is the default and
the printed one stays available for fidelity experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateBatchError, DimensionError, InputError

MEAN_ALL = "mean-all"
MEAN_NONZERO = "mean-nonzero"


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    num_classes: int = 0
    reduction: str = MEAN_ALL

    def __post_init__(self):
        if self.margin <= 0:
            raise InputError(f"triplet margin must be positive, got {self.margin}")
        if self.reduction not in (MEAN_ALL, MEAN_NONZERO):
            raise InputError(f"unknown triplet reduction {self.reduction!r}")


def _pairwise_distances(e: np.ndarray):
    """Exact pairwise Euclidean distances for one strip: e is [N, C]."""
    diff = e[:, None, :] - e[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    return np.sqrt(d2), diff


def triplet_ba(emb: Tensor, labels, margin: float,
               reduction: str = MEAN_ALL, paper_sign: bool = False) -> Tensor:
    """Batch-all triplet loss over per-strip embeddings [N, S, C].

    Every valid (anchor, positive, negative) triplet contributes
    [D_ap - D_an + m]_+ per strip; strips are averaged.  mean-all divides
    by the number of valid triplets, mean-nonzero by the number of active
    ones.  paper_sign=True swaps the two distances (printed orientation).
    """
    if emb.data.ndim != 3:
        raise DimensionError(f"triplet expects [N, S, C] embeddings, got {emb.data.shape}")
    labels = np.asarray(labels)
    n, s, _ = emb.data.shape
    if labels.shape != (n,):
        raise InputError(f"labels shape {labels.shape} does not match batch size {n}")

    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)          # anchor-positive pairs
    neg_mask = ~same                                  # anchor-negative pairs
    valid = pos_mask[:, :, None] & neg_mask[:, None, :]
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateBatchError(
            "batch admits no triplet: need >= 2 classes and a repeated class")

    data = emb.data.astype(np.float64, copy=False)
    strip_losses = np.zeros(s)
    strip_grads = np.zeros((s, n, emb.data.shape[2]))
    for h in range(s):
        d, diff = _pairwise_distances(data[:, h, :])
        terms = d[:, :, None] - d[:, None, :] + margin
        if paper_sign:
            terms = -d[:, :, None] + d[:, None, :] + margin
        active = valid & (terms > 0)
        hinged = np.where(active, terms, 0.0)
        denom = n_valid if reduction == MEAN_ALL else max(int(active.sum()), 1)
        strip_losses[h] = hinged.sum() / denom

        # d loss / d D[i,j]: + when (i,j) acts as the positive pair, - when
        # (i,j) acts as the negative pair (signs flip under paper_sign).
        w_pos = active.sum(axis=2).astype(np.float64)
        w_neg = active.sum(axis=1).astype(np.float64)
        wd = (w_pos - w_neg) if not paper_sign else (w_neg - w_pos)
        wd /= denom
        wsym = wd + wd.T
        with np.errstate(divide="ignore", invalid="ignore"):
            m = np.where(d > 0, wsym / np.where(d > 0, d, 1.0), 0.0)
        # d D[i,j] / d e_i = (e_i - e_j) / D[i,j]
        strip_grads[h] = (m[:, :, None] * diff).sum(axis=1)

    loss = strip_losses.mean()
    grad = strip_grads.transpose(1, 0, 2) / s

    def bwd(g):
        if emb.requires_grad:
            ad.accumulate(emb, float(g) * grad.astype(emb.data.dtype, copy=False))

    return ad.record(np.asarray(loss), (emb,), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-strip softmax cross-entropy, averaged over samples and strips.

    logits: [N, S, num_classes]; labels: [N] integer class ids.
    """
    if logits.data.ndim != 3:
        raise DimensionError(f"cross_entropy expects [N, S, C] logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    n, s, c = logits.data.shape
    if labels.shape != (n,):
        raise InputError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")

    z = logits.data.astype(np.float64, copy=False)
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = np.log(ez.sum(axis=-1)) + zmax[..., 0]
    true = z[np.arange(n)[:, None], np.arange(s)[None, :], labels[:, None]]
    loss = (lse - true).mean()

    softmax = ez / ez.sum(axis=-1, keepdims=True)
    onehot = np.zeros_like(z)
    onehot[np.arange(n)[:, None], np.arange(s)[None, :], labels[:, None]] = 1.0
    grad = (softmax - onehot) / (n * s)

    def bwd(g):
        if logits.requires_grad:
            ad.accumulate(logits, float(g) * grad.astype(logits.data.dtype, copy=False))

    return ad.record(np.asarray(loss), (logits,), bwd)


def combined(tri: Tensor, cse: Tensor) -> Tensor:
    """Unweighted sum of the two loss terms."""
    return ad.add(tri, cse)
