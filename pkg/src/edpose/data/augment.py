"""Train-time augmentation: horizontal flip, window crop, shorter-side resize."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..geometry import BoxXYWH, KeypointSet
from .types import ImageSample, Instance


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    crop_prob: float = 0.5
    crop_min_scale: float = 0.6
    resize_min: int = 480
    resize_max: int = 800
    max_size: int = 1333
    size_step: int = 32


def hflip(sample: ImageSample, flip_index: list[int]) -> ImageSample:
    perm = np.asarray(flip_index)
    out = []
    for inst in sample.instances:
        xy = inst.keypoints.xy()[perm]
        xy[:, 0] = 1.0 - xy[:, 0]
        vis = inst.keypoints.vis()[perm]
        b = inst.box
        out.append(Instance(BoxXYWH(1.0 - b.cx, b.cy, b.w, b.h), KeypointSet.from_arrays(xy, vis), inst.area))
    image = None if sample.image is None else np.ascontiguousarray(sample.image[:, ::-1])
    return ImageSample(image, out, sample.image_id, sample.size)


def crop(sample: ImageSample, window: tuple[int, int, int, int]) -> ImageSample:
    """Crop to pixel window (x0, y0, x1, y1).

    Instances whose box center falls outside the window are dropped; keypoints
    leaving the window are marked unlabeled; boxes are clipped to the window.
    """
    W, H = sample.size
    x0, y0, x1, y1 = window
    cw, ch = x1 - x0, y1 - y0
    scale = np.array([W / cw, H / ch])
    offset = np.array([x0 / cw, y0 / ch])
    out = []
    for inst in sample.instances:
        b = inst.box
        c = np.array([b.cx, b.cy]) * scale - offset
        if not (0.0 <= c[0] <= 1.0 and 0.0 <= c[1] <= 1.0):
            continue
        lo = np.clip(np.array([b.cx - b.w / 2, b.cy - b.h / 2]) * scale - offset, 0.0, 1.0)
        hi = np.clip(np.array([b.cx + b.w / 2, b.cy + b.h / 2]) * scale - offset, 0.0, 1.0)
        if (hi - lo).min() <= 0:
            continue
        xy = inst.keypoints.xy() * scale - offset
        vis = inst.keypoints.vis().copy()
        outside = (xy < 0).any(1) | (xy > 1).any(1)
        vis[outside] = 0
        if not (vis > 0).any():
            continue
        box = BoxXYWH(*(float(v) for v in np.concatenate([(lo + hi) / 2, hi - lo])))
        out.append(Instance(box, KeypointSet.from_arrays(xy, vis), inst.area * scale[0] * scale[1]))
    image = None if sample.image is None else np.ascontiguousarray(sample.image[y0:y1, x0:x1])
    return ImageSample(image, out, sample.image_id, (cw, ch))


def resize(sample: ImageSample, size: tuple[int, int]) -> ImageSample:
    """Resize to (width, height); normalized annotations are unchanged."""
    if sample.image is None:
        return ImageSample(None, list(sample.instances), sample.image_id, size)
    pil = Image.fromarray((np.clip(sample.image, 0, 1) * 255).round().astype(np.uint8))
    arr = np.asarray(pil.resize(size, Image.BILINEAR), dtype=np.float32) / 255.0
    return ImageSample(arr, list(sample.instances), sample.image_id)


def shorter_side_size(width: int, height: int, shorter: int, max_size: int, step: int = 1) -> tuple[int, int]:
    scale = shorter / min(width, height)
    if max(width, height) * scale > max_size:
        scale = max_size / max(width, height)
    w = max(step, int(round(width * scale / step)) * step)
    h = max(step, int(round(height * scale / step)) * step)
    return w, h


def augment(sample: ImageSample, rng: np.random.Generator, flip_index: list[int],
            cfg: AugmentConfig | None = None) -> ImageSample:
    cfg = cfg or AugmentConfig()
    if rng.random() < cfg.flip_prob:
        sample = hflip(sample, flip_index)
    if rng.random() < cfg.crop_prob:
        W, H = sample.size
        cw = int(round(W * rng.uniform(cfg.crop_min_scale, 1.0)))
        ch = int(round(H * rng.uniform(cfg.crop_min_scale, 1.0)))
        x0 = int(rng.integers(0, W - cw + 1))
        y0 = int(rng.integers(0, H - ch + 1))
        cropped = crop(sample, (x0, y0, x0 + cw, y0 + ch))
        if cropped.instances:
            sample = cropped
    shorter = int(rng.integers(cfg.resize_min, cfg.resize_max + 1))
    return resize(sample, shorter_side_size(*sample.size, shorter, cfg.max_size, cfg.size_step))
