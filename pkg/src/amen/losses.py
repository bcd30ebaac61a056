"""Pointwise click loss, the temporal pairwise reward loss, and their blend."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_CLAMP = 1e-12


@dataclass
class BatchLoss:
    ce: Tensor
    bpr: Tensor
    total: Tensor
    matched_count: int

    def values(self) -> dict:
        return {"ce": self.ce.item(), "bpr": self.bpr.item(), "total": self.total.item(),
                "matched": self.matched_count}


def cross_entropy(y_hat, labels) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-12, 1 - 1e-12]."""
    y_hat = ad.ensure_tensor(y_hat)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ad.DimensionError(f"labels {y.shape} vs predictions {y_hat.shape}")
    p = ad.clip(y_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per = y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)
    n = max(per.data.size, 1)
    return -(per.sum() * (1.0 / n))


def direction_alignment(y_diff):
    """+1 where the diff impression was clicked, -1 where it was not."""
    y = np.asarray(y_diff)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("diff labels must be 0 or 1")
    out = np.where(y == 1, 1.0, -1.0)
    return float(out) if out.ndim == 0 else out


def bpr_loss(reward, reward_diff, y_diff) -> Tensor:
    """-mean log sigmoid(I(y') * (r' - r)) over the matched pairs only.

    Returns a zero constant when there are no pairs.
    """
    y_diff = np.asarray(y_diff)
    if y_diff.size == 0:
        return Tensor(0.0)
    reward, reward_diff = ad.ensure_tensor(reward), ad.ensure_tensor(reward_diff)
    sign = direction_alignment(y_diff)
    margin = (reward_diff - reward) * sign
    return -(ad.log_sigmoid(margin).sum() * (1.0 / y_diff.size))


def total_loss(ce, bpr, w1: float = 1.0, w2: float = 0.1) -> Tensor:
    if w1 < 0 or w2 < 0:
        raise ValueError("loss weights must be non-negative")
    return ad.ensure_tensor(ce) * w1 + ad.ensure_tensor(bpr) * w2


def batch_loss(output, labels, pair_rows=None, diff_labels=None, w1: float = 1.0,
               w2: float = 0.1) -> BatchLoss:
    """Blend CE over every row with BPR over the rows that found a pair.

    ``pair_rows`` indexes the batch rows whose diff rewards are in
    ``output.reward_diff`` (same order); ``diff_labels`` are their labels.
    """
    ce = cross_entropy(output.y_hat, labels)
    matched = 0 if pair_rows is None else len(pair_rows)
    if matched and output.reward_diff is not None:
        r = _select(output.reward, np.asarray(pair_rows))
        bpr = bpr_loss(r, output.reward_diff, diff_labels)
    else:
        matched = 0
        bpr = Tensor(0.0)
    return BatchLoss(ce=ce, bpr=bpr, total=total_loss(ce, bpr, w1, w2), matched_count=matched)


def _select(t: Tensor, rows: np.ndarray) -> Tensor:
    # row gather on a 1-D tensor, differentiable
    return ad.gather(t.reshape(-1, 1), rows).reshape(len(rows))
