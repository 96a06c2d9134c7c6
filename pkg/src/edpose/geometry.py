"""Box and keypoint value types plus the non-learned geometric scalars.

All coordinates are fractions of the image size.  Boxes are center-parameterized
``(cx, cy, w, h)`` and are stored unclipped; clipping happens only when drawing.

The scalar functions operate on plain tuples/dataclasses and are used as the
reference definitions.  The ``*_t`` functions are batched torch versions used by
the losses and the matcher.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor


class GeometryError(ValueError):
    """Raised for degenerate geometric input (zero-area boxes, no visible keypoints)."""


Corners = tuple[float, float, float, float]


@dataclass(frozen=True)
class BoxXYWH:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"box must have positive size, got w={self.w}, h={self.h}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class KeypointSet:
    points: tuple[tuple[float, float], ...]
    visibility: tuple[int, ...]

    def __post_init__(self):
        if len(self.points) != len(self.visibility):
            raise GeometryError(
                f"{len(self.points)} points but {len(self.visibility)} visibility flags")
        for x, y in self.points:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise GeometryError("non-finite keypoint coordinate")
        for v in self.visibility:
            if v not in (0, 1, 2):
                raise GeometryError(f"visibility flag must be 0, 1 or 2, got {v}")

    @classmethod
    def from_arrays(cls, points, visibility) -> "KeypointSet":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        vis = np.asarray(visibility).reshape(-1)
        return cls(tuple((float(x), float(y)) for x, y in pts), tuple(int(v) for v in vis))

    @property
    def num_keypoints(self) -> int:
        return len(self.points)

    def xy(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def vis(self) -> np.ndarray:
        return np.asarray(self.visibility, dtype=np.int64)


@dataclass(frozen=True)
class OksParams:
    per_keypoint_constants: tuple[float, ...]
    scale_sq: float

    def __post_init__(self):
        if any(k <= 0 for k in self.per_keypoint_constants):
            raise GeometryError("per-keypoint constants must be strictly positive")
        if not self.scale_sq > 0:
            raise GeometryError("scale_sq must be strictly positive")


def box_to_corners(b: BoxXYWH) -> Corners:
    hw, hh = b.w / 2.0, b.h / 2.0
    return (b.cx - hw, b.cy - hh, b.cx + hw, b.cy + hh)


def corners_to_box(c: Corners) -> BoxXYWH:
    x1, y1, x2, y2 = c
    return BoxXYWH((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)


def _area(c: Corners) -> float:
    return (c[2] - c[0]) * (c[3] - c[1])


def _check_positive(c: Corners) -> None:
    if not (c[2] > c[0] and c[3] > c[1]):
        raise GeometryError(f"box {c} has zero or negative area")


def iou(a: Corners, b: Corners) -> float:
    _check_positive(a)
    _check_positive(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / (_area(a) + _area(b) - inter)


def giou(a: Corners, b: Corners) -> float:
    """Generalized IoU: ``IoU - (enclose - union) / enclose`` on corner boxes."""
    _check_positive(a)
    _check_positive(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = _area(a) + _area(b) - inter
    enclose = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter / union - (enclose - union) / enclose


def _visible_mask(gt: KeypointSet) -> np.ndarray:
    vis = gt.vis() > 0
    if not vis.any():
        raise GeometryError("no visible keypoints")
    return vis


def oks_similarity(pred: KeypointSet, gt: KeypointSet, params: OksParams) -> float:
    """Loss-side similarity: L1 point distance in the exponent (unsquared)."""
    vis = _visible_mask(gt)
    k = np.asarray(params.per_keypoint_constants, dtype=np.float64)
    if len(k) != gt.num_keypoints or pred.num_keypoints != gt.num_keypoints:
        raise GeometryError("keypoint count mismatch")
    dist = np.abs(pred.xy() - gt.xy()).sum(axis=1)
    sim = np.exp(-dist / (2.0 * params.scale_sq * k ** 2))
    return float(sim[vis].sum() / vis.sum())


def eval_oks(pred: KeypointSet, gt: KeypointSet, gt_area: float,
             per_keypoint_constants: Sequence[float],
             image_size: tuple[float, float] | None = None) -> float:
    """Evaluation OKS with squared Euclidean distance and ``s^2 = gt_area``.

    With ``image_size=(width, height)`` the distance and area are measured in
    pixels, which is what matters for non-square images.
    """
    vis = _visible_mask(gt)
    if gt_area <= 0:
        raise GeometryError("gt_area must be positive")
    k = np.asarray(per_keypoint_constants, dtype=np.float64)
    diff = pred.xy() - gt.xy()
    area = gt_area
    if image_size is not None:
        diff = diff * np.asarray(image_size, dtype=np.float64)
        area = gt_area * image_size[0] * image_size[1]
    d2 = (diff ** 2).sum(axis=1)
    sim = np.exp(-d2 / (2.0 * area * k ** 2))
    return float(sim[vis].sum() / vis.sum())


# ---------------------------------------------------------------------------
# batched torch versions


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = x.clamp(min=0, max=1)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


def box_cxcywh_to_xyxy_t(b: Tensor) -> Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh_t(b: Tensor) -> Tensor:
    x1, y1, x2, y2 = b.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def box_area_t(b: Tensor) -> Tensor:
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def generalized_box_iou_t(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise GIoU between corner boxes ``a`` [P,4] and ``b`` [G,4] -> [P,G]."""
    area_a = box_area_t(a)
    area_b = box_area_t(b)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou_ = inter / union
    lt_c = torch.min(a[:, None, :2], b[None, :, :2])
    rb_c = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclose = wh_c[..., 0] * wh_c[..., 1]
    return iou_ - (enclose - union) / enclose


def elementwise_giou_t(a: Tensor, b: Tensor) -> Tensor:
    """GIoU between matched rows of corner boxes ``a`` [n,4] and ``b`` [n,4]."""
    area_a = box_area_t(a)
    area_b = box_area_t(b)
    lt = torch.max(a[:, :2], b[:, :2])
    rb = torch.min(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    lt_c = torch.min(a[:, :2], b[:, :2])
    rb_c = torch.max(a[:, 2:], b[:, 2:])
    wh_c = rb_c - lt_c
    enclose = wh_c[:, 0] * wh_c[:, 1]
    return inter / union - (enclose - union) / enclose


def oks_similarity_t(pred: Tensor, gt: Tensor, vis: Tensor, scale_sq: Tensor,
                     k: Tensor) -> Tensor:
    """Loss-side OKS between matched instances.

    pred, gt: [n,K,2]; vis: [n,K] flags (>0 means labeled); scale_sq: [n]; k: [K].  Instances with
    no visible keypoint get similarity 0 and should be masked by the caller.
    """
    dist = (pred - gt).abs().sum(-1)
    sim = torch.exp(-dist / (2.0 * scale_sq[:, None] * k[None, :] ** 2))
    visf = (vis > 0).to(sim.dtype)
    return (sim * visf).sum(-1) / visf.sum(-1).clamp(min=1)


def pairwise_oks_similarity_t(pred: Tensor, gt: Tensor, vis: Tensor, scale_sq: Tensor,
                              k: Tensor) -> Tensor:
    """Loss-side OKS for all prediction/GT pairs: pred [P,K,2], gt [G,K,2] -> [P,G]."""
    dist = (pred[:, None] - gt[None]).abs().sum(-1)
    sim = torch.exp(-dist / (2.0 * scale_sq[None, :, None] * k[None, None, :] ** 2))
    visf = (vis > 0).to(sim.dtype)[None]
    return (sim * visf).sum(-1) / visf.sum(-1).clamp(min=1)
