"""Synthetic multi-person stick-figure scenes with exact annotations."""

from __future__ import annotations

import colorsys
import math

import numpy as np

from ..geometry import BoxXYWH, KeypointSet
from ..skeletons import get_skeleton
from .types import ImageSample, Instance

BOX_MARGIN = 0.08


def _rot(v: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _limb(start: np.ndarray, length: float, angle_from_down: float) -> np.ndarray:
    return start + length * np.array([math.sin(angle_from_down), -math.cos(angle_from_down)])


def random_pose(rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Joint positions of one figure in a body frame (y up, unit body height)."""
    f = rng.uniform(0.55, 1.0) * rng.choice([-1.0, 1.0])  # width foreshortening, facing
    lean = rng.uniform(-0.25, 0.25)
    j = {}
    j["left_hip"] = np.array([0.07 * f, 0.0])
    j["right_hip"] = np.array([-0.07 * f, 0.0])
    neck = _rot(np.array([0.0, 0.30]), lean)
    j["neck"] = neck
    j["left_shoulder"] = neck + _rot(np.array([0.11 * f, -0.02]), lean)
    j["right_shoulder"] = neck + _rot(np.array([-0.11 * f, -0.02]), lean)
    nose = neck + _rot(np.array([0.0, 0.10]), lean + rng.uniform(-0.3, 0.3))
    j["nose"] = nose
    j["left_eye"] = nose + np.array([0.025 * f, 0.025])
    j["right_eye"] = nose + np.array([-0.025 * f, 0.025])
    j["left_ear"] = nose + np.array([0.055 * f, 0.01])
    j["right_ear"] = nose + np.array([-0.055 * f, 0.01])
    j["head_top"] = neck + _rot(np.array([0.0, 0.19]), lean)
    for side, sign in (("left", 1.0), ("right", -1.0)):
        s = sign * np.sign(f)
        a1 = s * rng.uniform(-0.5, 2.6)
        a2 = a1 + s * rng.uniform(0.0, 2.0)
        elbow = _limb(j[f"{side}_shoulder"], 0.16, a1)
        j[f"{side}_elbow"] = elbow
        j[f"{side}_wrist"] = _limb(elbow, 0.15, a2)
        t1 = s * rng.uniform(-0.25, 0.8)
        t2 = t1 - s * rng.uniform(0.0, 1.0)
        knee = _limb(j[f"{side}_hip"], 0.24, t1)
        j[f"{side}_knee"] = knee
        j[f"{side}_ankle"] = _limb(knee, 0.23, t2)
    return j


def _palette(n: int, sat: float, val: float, shift: float = 0.0) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb((i / n + shift) % 1.0, sat, val) for i in range(n)])


def _draw_segment(img: np.ndarray, p0, p1, radius: float, color: np.ndarray) -> None:
    """Anti-aliased capsule between pixel points p0 and p1."""
    H, W, _ = img.shape
    x0 = int(max(0, math.floor(min(p0[0], p1[0]) - radius - 1)))
    x1 = int(min(W, math.ceil(max(p0[0], p1[0]) + radius + 2)))
    y0 = int(max(0, math.floor(min(p0[1], p1[1]) - radius - 1)))
    y1 = int(min(H, math.ceil(max(p0[1], p1[1]) + radius + 2)))
    if x1 <= x0 or y1 <= y0:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64) + 0.5
    d = np.asarray(p1, dtype=np.float64) - np.asarray(p0, dtype=np.float64)
    denom = float(d @ d)
    t = np.zeros_like(xs) if denom == 0 else np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / denom, 0, 1)
    dist = np.hypot(xs - (p0[0] + t * d[0]), ys - (p0[1] + t * d[1]))
    alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)[..., None]
    patch = img[y0:y1, x0:x1]
    img[y0:y1, x0:x1] = patch * (1 - alpha) + color * alpha


def synth_scene(rng: np.random.Generator, n_people: int, num_keypoints: int = 17,
                image_size: int = 128, image_id=0) -> ImageSample:
    """Render ``n_people`` random stick figures; annotations are exact.

    Every person gets a box equal to the tight keypoint hull grown by
    ``BOX_MARGIN`` of its extent on each side, and lies fully inside the image.
    """
    if n_people < 1:
        raise ValueError("n_people must be >= 1")
    if num_keypoints not in (14, 17):
        raise ValueError("num_keypoints must be 14 or 17")
    skel = get_skeleton(num_keypoints)
    S = image_size
    img = np.full((S, S, 3), 0.08) + rng.normal(0.0, 0.02, size=(S, S, 3))
    # stride the hue wheel so left/right neighbours get far-apart colours
    kp_colors = _palette(num_keypoints, 1.0, 1.0)[(np.arange(num_keypoints) * 7) % num_keypoints]
    limb_colors = _palette(len(skel.limbs), 0.45, 0.65, shift=0.5)
    instances = []
    for _ in range(n_people):
        pose = random_pose(rng)
        body = np.stack([pose[name] for name in skel.names])
        height = rng.uniform(0.4, 0.75)
        pts = body * np.array([height, -height])          # image y points down
        lo, hi = pts.min(0), pts.max(0)
        ext = hi - lo
        blo, bhi = lo - BOX_MARGIN * ext, hi + BOX_MARGIN * ext
        span = bhi - blo
        if span.max() > 0.96:
            k = 0.96 / span.max()
            pts, blo, bhi, span = pts * k, blo * k, bhi * k, span * k
        shift = rng.uniform(0.02 - blo, 0.98 - bhi)
        pts = pts + shift
        blo, bhi = blo + shift, bhi + shift
        thick = max(1.0, 0.022 * height * S)
        px = pts * S
        for li, (a, b) in enumerate(skel.limbs):
            _draw_segment(img, px[a], px[b], thick, limb_colors[li])
        for k in range(num_keypoints):
            _draw_segment(img, px[k], px[k], 0.9 * thick, kp_colors[k])
        box = BoxXYWH(*(float(v) for v in np.concatenate([(blo + bhi) / 2, bhi - blo])))
        kps = KeypointSet.from_arrays(pts, np.full(num_keypoints, 2))
        instances.append(Instance(box, kps, box.area))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return ImageSample(img, instances, image_id)
