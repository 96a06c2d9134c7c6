"""OKS-based average precision in the style of the COCO keypoint benchmark."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data.types import Instance

AREA_RANGES = {"all": (0.0, 1e10), "medium": (32.0 ** 2, 96.0 ** 2), "large": (96.0 ** 2, 1e10)}
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class MetricError(ValueError):
    """The metric is undefined for the given input (e.g. no ground truth at all)."""


@dataclass
class Detection:
    score: float
    keypoints: np.ndarray           # [K, 2] fractions of the image size
    box: np.ndarray | None = None   # [4] cx, cy, w, h fractions
    keypoint_boxes: np.ndarray | None = None  # [K, 4]


@dataclass
class EvalConfig:
    oks_thresholds: tuple[float, ...] = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
    max_detections: int = 20
    area_ranges: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(AREA_RANGES))

    def __post_init__(self):
        t = np.asarray(self.oks_thresholds, dtype=np.float64)
        if len(t) == 0 or not ((t > 0) & (t < 1)).all() or not (np.diff(t) > 0).all():
            raise ValueError("oks_thresholds must be strictly increasing inside (0, 1)")


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    ap_medium: float
    ap_large: float
    per_threshold: dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, float]:
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
                "ap_m": self.ap_medium, "ap_l": self.ap_large}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def oks_matrix(dets: Sequence[Detection], gts: Sequence[Instance], k: np.ndarray,
               image_size: tuple[float, float]) -> np.ndarray:
    """Evaluation OKS (squared distance, s^2 = gt area) for every pair, [D, G]."""
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    size = np.asarray(image_size, dtype=np.float64)
    pred = np.stack([np.asarray(d.keypoints, dtype=np.float64) for d in dets]) * size   # [D,K,2]
    gt = np.stack([g.keypoints.xy() for g in gts]) * size                               # [G,K,2]
    vis = np.stack([g.keypoints.vis() > 0 for g in gts])                                # [G,K]
    area = np.array([g.area for g in gts]) * size[0] * size[1]                          # [G]
    d2 = ((pred[:, None] - gt[None]) ** 2).sum(-1)                                       # [D,G,K]
    e = np.exp(-d2 / (2.0 * area[None, :, None] * k[None, None, :] ** 2))
    nvis = vis.sum(-1)
    return (e * vis[None]).sum(-1) / np.maximum(nvis, 1)[None]


def _det_area(d: Detection, image_size) -> float:
    # area of the keypoint extent, as the COCO evaluator assigns to keypoint results
    W, H = image_size
    kp = np.asarray(d.keypoints)
    span = kp.max(0) - kp.min(0)
    return float(span[0] * W * span[1] * H)


def _match_image(dets, gts, oks, thresholds, area_rng, image_size):
    """Greedy COCO matching for one image.

    Returns (scores [D], matched [T, D] bool, ignored [T, D] bool, n_valid_gt).
    """
    gt_ignore = np.array([not (area_rng[0] <= g.area * image_size[0] * image_size[1] <= area_rng[1])
                          for g in gts], dtype=bool)
    gt_order = np.argsort(gt_ignore, kind="stable")       # valid ground truth first
    gt_ignore = gt_ignore[gt_order]
    oks = oks[:, gt_order] if len(gts) else oks
    T, D, G = len(thresholds), len(dets), len(gts)
    matched = np.zeros((T, D), dtype=bool)
    det_ignore = np.zeros((T, D), dtype=bool)
    for ti, t in enumerate(thresholds):
        gt_taken = np.zeros(G, dtype=bool)
        for di in range(D):
            best, best_g = min(t, 1 - 1e-10), -1
            for gi in range(G):
                if gt_taken[gi]:
                    continue
                if best_g > -1 and not gt_ignore[best_g] and gt_ignore[gi]:
                    break
                if oks[di, gi] < best:
                    continue
                best, best_g = oks[di, gi], gi
            if best_g == -1:
                continue
            gt_taken[best_g] = True
            matched[ti, di] = True
            det_ignore[ti, di] = gt_ignore[best_g]
    det_out = np.array([not (area_rng[0] <= _det_area(d, image_size) <= area_rng[1]) for d in dets], dtype=bool)
    det_ignore |= (~matched) & det_out[None, :]
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return scores, matched, det_ignore, int((~gt_ignore).sum())


def _accumulate(per_image, n_thresholds: int):
    """Precision envelopes per threshold: list of (recall [n], precision [n]) and n_gt."""
    n_gt = sum(p[3] for p in per_image)
    if not per_image:
        return [], n_gt
    scores = np.concatenate([p[0] for p in per_image])
    order = np.argsort(-scores, kind="mergesort")
    curves = []
    for ti in range(n_thresholds):
        tp = np.concatenate([p[1][ti] for p in per_image])[order]
        ig = np.concatenate([p[2][ti] for p in per_image])[order]
        tp_c = np.cumsum(tp & ~ig).astype(np.float64)
        fp_c = np.cumsum(~tp & ~ig).astype(np.float64)
        keep = ~ig
        tp_c, fp_c = tp_c[keep], fp_c[keep]
        recall = tp_c / max(n_gt, 1)
        precision = tp_c / np.maximum(tp_c + fp_c, np.spacing(1))
        # precision envelope: best precision at any recall >= r
        precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
        curves.append((recall, precision))
    return curves, n_gt


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    q = np.zeros(len(RECALL_POINTS))
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    ok = idx < len(precision)
    q[ok] = precision[idx[ok]]
    return float(q.mean())


def _prepare(predictions, ground_truth, max_dets):
    ids = list(ground_truth.keys())
    for img_id in predictions:
        if img_id not in ground_truth:
            ids.append(img_id)
    out = []
    for img_id in ids:
        dets = sorted(predictions.get(img_id, []), key=lambda d: -d.score)[:max_dets]
        out.append((img_id, dets, list(ground_truth.get(img_id, []))))
    return out


def _ap_for_range(prepared, k, thresholds, area_rng, image_sizes) -> list[float] | None:
    per_image = []
    for img_id, dets, gts in prepared:
        size = image_sizes.get(img_id, (1.0, 1.0)) if image_sizes else (1.0, 1.0)
        oks = oks_matrix(dets, gts, k, size)
        per_image.append(_match_image(dets, gts, oks, thresholds, area_rng, size))
    curves, n_gt = _accumulate(per_image, len(thresholds))
    if n_gt == 0:
        return None
    return [_interpolated_ap(r, p) for r, p in curves]


def evaluate(predictions: Mapping[object, Sequence[Detection]], ground_truth: Mapping[object, Sequence[Instance]],
             oks_constants: Sequence[float], cfg: EvalConfig | None = None,
             image_sizes: Mapping[object, tuple[float, float]] | None = None) -> EvalResult:
    """OKS average precision over all images.

    ``image_sizes`` maps image id to (width, height) pixels; distances, OKS
    scales and the medium/large area splits are measured in those pixels.
    Without it every image counts as 1x1, so only the overall numbers are
    meaningful.  Area splits without ground truth report -1.
    """
    cfg = cfg or EvalConfig()
    if sum(len(v) for v in ground_truth.values()) == 0:
        raise MetricError("no ground-truth instances: AP is undefined")
    k = np.asarray(oks_constants, dtype=np.float64)
    thresholds = sorted(set(cfg.oks_thresholds) | {0.5, 0.75})
    prepared = _prepare(predictions, ground_truth, cfg.max_detections)
    all_aps = _ap_for_range(prepared, k, thresholds, cfg.area_ranges["all"], image_sizes)
    by_t = dict(zip(thresholds, all_aps))
    main = [by_t[t] for t in cfg.oks_thresholds]

    def split(name):
        aps = _ap_for_range(prepared, k, list(cfg.oks_thresholds), cfg.area_ranges[name], image_sizes)
        return -1.0 if aps is None else float(np.mean(aps))

    return EvalResult(ap=float(np.mean(main)), ap50=by_t[0.5], ap75=by_t[0.75],
                      ap_medium=split("medium"), ap_large=split("large"),
                      per_threshold={t: by_t[t] for t in cfg.oks_thresholds})


def pr_curve(predictions, ground_truth, oks_constants, threshold: float,
             max_detections: int = 20, image_sizes=None) -> list[tuple[float, float]]:
    """(recall, enveloped precision) after each detection, in descending score order."""
    if sum(len(v) for v in ground_truth.values()) == 0:
        raise MetricError("no ground-truth instances: AP is undefined")
    k = np.asarray(oks_constants, dtype=np.float64)
    prepared = _prepare(predictions, ground_truth, max_detections)
    per_image = []
    for img_id, dets, gts in prepared:
        size = image_sizes.get(img_id, (1.0, 1.0)) if image_sizes else (1.0, 1.0)
        per_image.append(_match_image(dets, gts, oks_matrix(dets, gts, k, size), [threshold],
                                      AREA_RANGES["all"], size))
    curves, _ = _accumulate(per_image, 1)
    r, p = curves[0]
    return list(zip(r.tolist(), p.tolist()))
