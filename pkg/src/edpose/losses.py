"""Set-based training losses with deep supervision over both decoders.

Per supervised layer the predictions are matched to the ground truth with the
Hungarian algorithm, then

    L_h = mu * |H - H*|_1 + beta * (1 - GIoU)
    L_c = lam * focal(p)                      (every query; matched ones are positives)
    L_k = omega * |P - P*|_1 + theta * (1 - OKS_l1)

are accumulated.  Human-decoder layers (and encoder proposals) carry only L_h
and L_c.  Sums are normalized by the number of ground-truth instances in the
batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from .geometry import (KeypointSet, OksParams, box_cxcywh_to_xyxy_t, elementwise_giou_t,
                       oks_similarity, oks_similarity_t, GeometryError)
from .matching import CostWeights, MatchResult, hungarian_match, matching_cost

TERMS = ("L_h_l1", "L_h_giou", "L_c", "L_k_l1", "L_k_oks")


@dataclass
class LossWeights:
    mu: float = 5.0
    beta: float = 2.0
    lam: float = 2.0
    omega: float = 10.0
    theta: float = 4.0

    def __post_init__(self):
        for name in ("mu", "beta", "lam", "omega", "theta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"loss weight {name} must be positive")

    def for_term(self, term: str) -> float:
        return {"L_h_l1": self.mu, "L_h_giou": self.beta, "L_c": self.lam,
                "L_k_l1": self.omega, "L_k_oks": self.theta}[term]


@dataclass
class InstanceTargets:
    """Ground truth of one image in the model's normalized frame."""

    boxes: Tensor        # [G, 4] cx, cy, w, h
    keypoints: Tensor    # [G, K, 2]
    visibility: Tensor   # [G, K] in {0, 1, 2}
    areas: Tensor        # [G] object scale s^2

    @property
    def num_instances(self) -> int:
        return self.boxes.shape[0]

    @classmethod
    def empty(cls, num_keypoints: int, dtype=torch.float32) -> "InstanceTargets":
        return cls(torch.zeros(0, 4, dtype=dtype), torch.zeros(0, num_keypoints, 2, dtype=dtype),
                   torch.zeros(0, num_keypoints, dtype=torch.long), torch.zeros(0, dtype=dtype))

    def permute(self, order) -> "InstanceTargets":
        idx = torch.as_tensor(order, dtype=torch.long)
        return InstanceTargets(self.boxes[idx], self.keypoints[idx], self.visibility[idx], self.areas[idx])

    def to(self, device=None, dtype=None) -> "InstanceTargets":
        return InstanceTargets(self.boxes.to(device, dtype), self.keypoints.to(device, dtype),
                               self.visibility.to(device), self.areas.to(device, dtype))


@dataclass
class LossReport:
    """Raw (unweighted) terms per supervised layer plus the weighted total."""

    total: float
    terms: dict[str, dict[str, float]]
    weights: LossWeights
    matches: dict[str, list[MatchResult]] = field(default_factory=dict, repr=False)

    def weighted_total(self) -> float:
        return sum(self.weights.for_term(t) * v for layer in self.terms.values() for t, v in layer.items())

    def grouped(self) -> dict[str, dict[str, float]]:
        """Weighted L_h, L_c (and L_k_l1, L_k_oks on keypoint layers) per layer."""
        w = self.weights
        out = {}
        for name, t in self.terms.items():
            g = {"L_h": w.mu * t["L_h_l1"] + w.beta * t["L_h_giou"], "L_c": w.lam * t["L_c"]}
            if "L_k_l1" in t:
                g["L_k_l1"] = w.omega * t["L_k_l1"]
                g["L_k_oks"] = w.theta * t["L_k_oks"]
            out[name] = g
        return out

    def as_record(self) -> dict[str, float]:
        rec = {"total": self.total}
        for name, t in self.grouped().items():
            for term, v in t.items():
                rec[f"{name}/{term}"] = v
        return rec


def focal_loss(logit: float, is_positive: bool, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """Scalar sigmoid focal loss; alpha weighs positives, 1 - alpha negatives."""
    p = 1.0 / (1.0 + math.exp(-logit)) if logit >= 0 else math.exp(logit) / (1.0 + math.exp(logit))
    p_t = p if is_positive else 1.0 - p
    a_t = alpha if is_positive else 1.0 - alpha
    return -a_t * (1.0 - p_t) ** gamma * math.log(max(p_t, 1e-12))


def sigmoid_focal_loss_t(logits: Tensor, targets: Tensor, alpha: float = 0.25,
                         gamma: float = 2.0) -> Tensor:
    """Elementwise focal loss; -log(p_t) is evaluated as a stable BCE-with-logits."""
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return a_t * (1 - p_t) ** gamma * ce


def keypoint_loss(pred: KeypointSet, gt: KeypointSet, params: OksParams) -> tuple[float, float]:
    """(mean |dx|+|dy| over visible keypoints, 1 - loss-side OKS)."""
    vis = gt.vis() > 0
    if not vis.any():
        raise GeometryError("no visible keypoints")
    l1 = float((abs(pred.xy() - gt.xy()).sum(1))[vis].mean())
    return l1, 1.0 - oks_similarity(pred, gt, params)


class SetCriterion:
    def __init__(self, oks_constants, weights: LossWeights | None = None,
                 cost_weights: CostWeights | None = None, alpha: float = 0.25, gamma: float = 2.0,
                 human_det_supervision: bool = True, encoder_supervision: bool = True):
        self.oks_constants = torch.as_tensor(oks_constants, dtype=torch.float64)
        self.weights = weights or LossWeights()
        self.cost_weights = cost_weights or CostWeights()
        self.alpha = alpha
        self.gamma = gamma
        self.human_det_supervision = human_det_supervision
        self.encoder_supervision = encoder_supervision

    @classmethod
    def from_config(cls, loss_cfg, oks_constants) -> "SetCriterion":
        return cls(oks_constants,
                   LossWeights(loss_cfg.mu, loss_cfg.beta, loss_cfg.lam, loss_cfg.omega, loss_cfg.theta),
                   CostWeights(loss_cfg.cost_class, loss_cfg.cost_box, loss_cfg.cost_giou,
                               loss_cfg.cost_kpt, loss_cfg.cost_oks),
                   loss_cfg.focal_alpha, loss_cfg.focal_gamma,
                   loss_cfg.human_det_supervision, loss_cfg.encoder_supervision)

    def _supervised(self, name: str) -> bool:
        if name == "enc":
            return self.encoder_supervision
        if name.startswith("human"):
            return self.human_det_supervision
        return True

    def layer_terms(self, layer, targets: list[InstanceTargets]):
        logits, boxes, kpts = layer.logits, layer.boxes, layer.keypoints
        k = self.oks_constants.to(boxes.dtype)
        num_gt = max(sum(t.num_instances for t in targets), 1)
        cls_target = torch.zeros_like(logits)
        matches = []
        pb, gb, pk, gk, gv, ga = [], [], [], [], [], []
        for b, tgt in enumerate(targets):
            cost = matching_cost(logits[b], boxes[b], tgt, self.cost_weights,
                                 None if kpts is None else kpts[b], k, self.alpha, self.gamma)
            m = hungarian_match(cost)
            matches.append(m)
            if not m.pairs:
                continue
            pi = torch.tensor(m.pred_indices, dtype=torch.long, device=boxes.device)
            gi = torch.tensor(m.gt_indices, dtype=torch.long, device=boxes.device)
            cls_target[b, pi] = 1.0
            pb.append(boxes[b, pi])
            gb.append(tgt.boxes[gi])
            if kpts is not None:
                pk.append(kpts[b, pi])
                gk.append(tgt.keypoints[gi])
                gv.append(tgt.visibility[gi])
                ga.append(tgt.areas[gi])
        zero = boxes.sum() * 0.0
        terms = {"L_c": sigmoid_focal_loss_t(logits, cls_target, self.alpha, self.gamma).sum() / num_gt}
        if pb:
            pb, gb = torch.cat(pb), torch.cat(gb)
            terms["L_h_l1"] = (pb - gb).abs().sum() / num_gt
            giou = elementwise_giou_t(box_cxcywh_to_xyxy_t(pb), box_cxcywh_to_xyxy_t(gb))
            terms["L_h_giou"] = (1 - giou).sum() / num_gt
        else:
            terms["L_h_l1"] = zero
            terms["L_h_giou"] = zero
        if kpts is not None:
            terms["L_k_l1"], terms["L_k_oks"] = zero, zero
            if pk:
                pk, gk, gv, ga = torch.cat(pk), torch.cat(gk), torch.cat(gv), torch.cat(ga)
                vis = gv > 0
                keep = vis.any(-1)
                if keep.any():
                    pk, gk, vis, ga = pk[keep], gk[keep], vis[keep], ga[keep]
                    visf = vis.to(pk.dtype)
                    per_inst = ((pk - gk).abs().sum(-1) * visf).sum(-1) / visf.sum(-1)
                    terms["L_k_l1"] = per_inst.sum() / num_gt
                    oks = oks_similarity_t(pk, gk, vis, ga, k)
                    terms["L_k_oks"] = (1 - oks).sum() / num_gt
        return terms, matches

    def __call__(self, output, targets: list[InstanceTargets]) -> tuple[Tensor, LossReport]:
        total = None
        report_terms: dict[str, dict[str, float]] = {}
        all_matches: dict[str, list[MatchResult]] = {}
        for name, layer in output.supervised_layers():
            if not self._supervised(name):
                continue
            terms, matches = self.layer_terms(layer, targets)
            all_matches[name] = matches
            layer_total = sum(self.weights.for_term(t) * v for t, v in terms.items())
            total = layer_total if total is None else total + layer_total
            report_terms[name] = {t: float(v.detach()) for t, v in terms.items()}
        report = LossReport(float(total.detach()), report_terms, self.weights, all_matches)
        return total, report


def total_loss(output, targets: list[InstanceTargets], oks_constants,
               weights: LossWeights | None = None, **kwargs) -> tuple[Tensor, LossReport]:
    return SetCriterion(oks_constants, weights, **kwargs)(output, targets)
