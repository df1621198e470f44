"""
    The composite segmentation loss: binary cross-entropy on cell
    probability, mean squared error on flows and dice on edges.
"""

from typing import Dict, NamedTuple, Optional, Union

import numpy as np
import torch
from torch.nn import functional as F

from penseg.seghead.targets import SegTargets
from penseg.seghead.unet import SegPrediction

DICE_EPS = 1.0


class LossBreakdown(NamedTuple):
    """
    Loss terms as scalar tensors; `total` is their unweighted sum.
    """

    bce: torch.Tensor
    mse: torch.Tensor
    dice: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {name: float(value.detach()) for name, value in self._asdict().items()}


MapsLike = Union[torch.Tensor, np.ndarray, SegPrediction, SegTargets]


def _as_batch(maps: MapsLike, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(maps, (SegPrediction, SegTargets)):
        maps = maps.as_maps()
    if isinstance(maps, np.ndarray):
        dtype = torch.float64 if like is None else like.dtype
        maps = torch.as_tensor(np.array(maps), dtype=dtype)
    if maps.dim() == 3:
        maps = maps.unsqueeze(0)
    if maps.dim() != 4 or maps.shape[1] % 4:
        raise ValueError(f"Expected (B, 4 n_out, H, W) maps, found {tuple(maps.shape)}.")
    return maps


def seg_loss(pred: MapsLike, targets: MapsLike) -> LossBreakdown:
    """
    Loss of head output maps against target maps, both in the
    `[cellprob, edge, flow_y, flow_x]` block order, batched or not.

    Each term is averaged over all of its pixels, channels and batch
    samples; the dice term is `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)`
    over the whole batch, with `p` the edge probabilities.
    """
    p = _as_batch(pred)
    t = _as_batch(targets, p).to(p.dtype)
    if p.shape != t.shape:
        raise ValueError(
            f"Prediction shape {tuple(p.shape)} does not match targets {tuple(t.shape)}."
        )
    n = p.shape[1] // 4
    bce = F.binary_cross_entropy_with_logits(p[:, :n], t[:, :n])
    mse = F.mse_loss(p[:, 2 * n :], t[:, 2 * n :])
    edge_prob = torch.sigmoid(p[:, n : 2 * n])
    edge_t = t[:, n : 2 * n]
    dice = 1.0 - (2.0 * (edge_prob * edge_t).sum() + DICE_EPS) / (
        edge_prob.sum() + edge_t.sum() + DICE_EPS
    )
    return LossBreakdown(bce, mse, dice, bce + mse + dice)
