"""Bipartite matching between predicted instances and ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .geometry import box_cxcywh_to_xyxy_t, generalized_box_iou_t, pairwise_oks_similarity_t


class MatchError(ValueError):
    pass


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_predictions: list[int]
    cost: float = 0.0
    breakdown: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def pred_indices(self) -> list[int]:
        return [p for p, _ in self.pairs]

    @property
    def gt_indices(self) -> list[int]:
        return [g for _, g in self.pairs]


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost injective assignment between predictions (rows) and ground truths.

    With P >= G every ground truth is matched; otherwise every prediction is.
    Pairs are returned sorted by ground-truth index.
    """
    c = cost.detach().cpu().numpy() if isinstance(cost, Tensor) else np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise MatchError(f"cost must be a 2-D matrix, got shape {c.shape}")
    P, G = c.shape
    if not np.isfinite(c).all():
        raise MatchError("cost matrix contains non-finite entries")
    if G == 0 or P == 0:
        return MatchResult([], list(range(P)), 0.0)
    rows, cols = linear_sum_assignment(c)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda t: t[1])
    matched = set(rows.tolist())
    return MatchResult(pairs, [p for p in range(P) if p not in matched], float(c[rows, cols].sum()))


@dataclass
class CostWeights:
    cls: float = 2.0
    box: float = 5.0
    giou: float = 2.0
    kpt: float = 10.0
    oks: float = 4.0


def focal_class_cost(logits: Tensor, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Foreground-minus-background focal cost per prediction, [P]."""
    p = logits.sigmoid()
    pos = alpha * (1 - p) ** gamma * -(torch.log(p.clamp(min=1e-12)))
    neg = (1 - alpha) * p ** gamma * -(torch.log((1 - p).clamp(min=1e-12)))
    return pos - neg


def keypoint_l1_cost(pred_kpts: Tensor, gt_kpts: Tensor, vis: Tensor) -> Tensor:
    """Mean over visible keypoints of |dx| + |dy| for every pair -> [P, G]."""
    dist = (pred_kpts[:, None] - gt_kpts[None]).abs().sum(-1)   # [P, G, K]
    visf = vis.to(dist.dtype)[None]
    return (dist * visf).sum(-1) / visf.sum(-1).clamp(min=1)


@torch.no_grad()
def matching_cost(logits: Tensor, boxes: Tensor, target, weights: CostWeights,
                  keypoints: Tensor | None = None, oks_constants: Tensor | None = None,
                  alpha: float = 0.25, gamma: float = 2.0, breakdown: bool = False):
    """Cost matrix [P, G] for one image.

    logits [P], boxes [P, 4] and optional keypoints [P, K, 2] are compared
    against ``target`` (boxes [G, 4], keypoints [G, K, 2], visibility [G, K],
    areas [G]).  Keypoint terms are left out when ``keypoints`` is None and
    are zero for a ground truth without visible keypoints.
    """
    G = target.boxes.shape[0]
    P = boxes.shape[0]
    if G == 0:
        return boxes.new_zeros(P, 0)
    parts = {
        "cls": focal_class_cost(logits, alpha, gamma)[:, None].expand(P, G),
        "box": torch.cdist(boxes, target.boxes, p=1),
        "giou": 1 - generalized_box_iou_t(box_cxcywh_to_xyxy_t(boxes), box_cxcywh_to_xyxy_t(target.boxes)),
    }
    total = weights.cls * parts["cls"] + weights.box * parts["box"] + weights.giou * parts["giou"]
    if keypoints is not None:
        vis = target.visibility > 0
        has_vis = vis.any(-1)[None].to(boxes.dtype)
        parts["kpt"] = keypoint_l1_cost(keypoints, target.keypoints, vis) * has_vis
        oks = pairwise_oks_similarity_t(keypoints, target.keypoints, vis, target.areas, oks_constants)
        parts["oks"] = (1 - oks) * has_vis
        total = total + weights.kpt * parts["kpt"] + weights.oks * parts["oks"]
    if breakdown:
        return total, parts
    return total
