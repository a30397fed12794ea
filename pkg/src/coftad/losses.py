"""The three training loss terms and their weighted combination.

All terms are cosine similarities between an online branch (receives
gradients) and a target branch (never does; target inputs are detached
here regardless of what the caller passes):

* ``contrastive_loss``  -- pulls the predictor output for one view of an
  image toward the target projection of the other view (mean negative
  cosine, so the optimum is -1).
* ``cross_instance_pp_loss`` -- pulls backbone features of *different*
  normal samples together under a batch pairing permutation, tightening
  the normal cluster.
* ``negative_pair_loss`` -- pushes backbone features of synthesized
  negatives away from the target features of the unmodified originals
  (mean positive cosine, so minimizing drives separation).

Zero-norm rows indicate a collapsed or broken encoder and raise rather
than being epsilon-clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import DegenerateEmbeddingError


@dataclass
class LossWeights:
    """Weights of the cross-instance and negative terms in the total loss."""

    lambda_pp: float = 0.8
    lambda_np: float = 0.6

    def __post_init__(self) -> None:
        for name in ("lambda_pp", "lambda_np"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class LossBreakdown:
    """Per-step values of the three terms and their weighted total."""

    l_con: float
    l_pp: float
    l_np: float
    l_total: float


def _row_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity per aligned row; raises on zero-norm rows."""
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"expected matching N x D matrices, got {tuple(a.shape)} vs {tuple(b.shape)}")
    norm_a = a.norm(dim=1)
    norm_b = b.norm(dim=1)
    if (norm_a == 0).any() or (norm_b == 0).any():
        raise DegenerateEmbeddingError("zero-norm embedding row in cosine similarity")
    return (a * b).sum(dim=1) / (norm_a * norm_b)


def contrastive_loss(pred_online: Tensor, proj_target: Tensor) -> Tensor:
    """Mean negative cosine between predictor outputs and target projections.

    One direction of the symmetric objective; the training step averages the
    two view-swapped directions. Row i of both matrices must come from the
    two views of the same base image. The target side is detached.
    """
    return -_row_cosine(pred_online, proj_target.detach()).mean()


def cross_instance_pp_loss(feat_online: Tensor, feat_target: Tensor, pairing: np.ndarray) -> Tensor:
    """Cross-instance positive-pair loss over backbone features.

    With p the pairing permutation, returns
    ``-(1/2N) * sum_i [cos(online_i, target_p(i)) + cos(online_p(i), target_i)]``.
    Gradient flows only through ``feat_online``.
    """
    pairing = np.asarray(pairing)
    n = feat_online.shape[0]
    if sorted(pairing.tolist()) != list(range(n)):
        raise ValueError("pairing must be a permutation of 0..N-1")
    idx = torch.as_tensor(pairing, dtype=torch.long, device=feat_online.device)
    target = feat_target.detach()
    forward = _row_cosine(feat_online, target[idx])
    backward = _row_cosine(feat_online[idx], target)
    return -(forward + backward).sum() / (2 * n)


def negative_pair_loss(feat_target_orig: Tensor, feat_online_neg: Tensor) -> Tensor:
    """Mean cosine between original-image target features and negative-pair
    online features. Positive sign: minimizing pushes negatives away."""
    return _row_cosine(feat_target_orig.detach(), feat_online_neg).mean()


def total_loss(l_con: float, l_pp: float, l_np: float, weights: LossWeights) -> float:
    """Weighted sum ``l_con + lambda_pp * l_pp + lambda_np * l_np``."""
    return l_con + weights.lambda_pp * l_pp + weights.lambda_np * l_np


def make_breakdown(l_con: float, l_pp: float, l_np: float, weights: LossWeights) -> LossBreakdown:
    return LossBreakdown(l_con, l_pp, l_np, total_loss(l_con, l_pp, l_np, weights))
