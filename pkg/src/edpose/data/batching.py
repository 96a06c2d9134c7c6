"""Padding batcher and conversion of annotations into model-frame targets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

from ..losses import InstanceTargets
from .types import ImageSample


@dataclass
class Batch:
    images: torch.Tensor       # [B, 3, Hc, Wc], zero in the padding
    valid_mask: torch.Tensor   # [B, Hc, Wc] True on real pixels
    samples: list[ImageSample]

    @property
    def image_ids(self) -> list:
        return [s.image_id for s in self.samples]

    @property
    def canvas_size(self) -> tuple[int, int]:
        return self.images.shape[-1], self.images.shape[-2]

    def ratios(self) -> np.ndarray:
        """[B, 2] fraction of the canvas covered by each image (width, height)."""
        Wc, Hc = self.canvas_size
        return np.array([[s.width / Wc, s.height / Hc] for s in self.samples], dtype=np.float64)

    def targets(self, num_keypoints: int, dtype=torch.float32) -> list[InstanceTargets]:
        """Ground truth rescaled from per-image fractions to canvas fractions."""
        out = []
        for s, (rw, rh) in zip(self.samples, self.ratios()):
            if not s.instances:
                out.append(InstanceTargets.empty(num_keypoints, dtype))
                continue
            boxes = np.array([i.box.as_tuple() for i in s.instances]) * np.array([rw, rh, rw, rh])
            kps = np.stack([i.keypoints.xy() for i in s.instances]) * np.array([rw, rh])
            vis = np.stack([i.keypoints.vis() for i in s.instances])
            areas = np.array([i.area for i in s.instances]) * rw * rh
            out.append(InstanceTargets(torch.as_tensor(boxes, dtype=dtype), torch.as_tensor(kps, dtype=dtype),
                                       torch.as_tensor(vis, dtype=torch.long), torch.as_tensor(areas, dtype=dtype)))
        return out

    def to_image_frame(self, b: int, xy: np.ndarray) -> np.ndarray:
        """Map canvas-fraction points [..., 2] of image ``b`` back to its own fractions."""
        return xy / self.ratios()[b]


def collate(samples: Sequence[ImageSample], size_divisor: int = 1) -> Batch:
    Hc = max(s.image.shape[0] for s in samples)
    Wc = max(s.image.shape[1] for s in samples)
    if size_divisor > 1:
        Hc = -(-Hc // size_divisor) * size_divisor
        Wc = -(-Wc // size_divisor) * size_divisor
    images = torch.zeros(len(samples), 3, Hc, Wc)
    mask = torch.zeros(len(samples), Hc, Wc, dtype=torch.bool)
    for i, s in enumerate(samples):
        h, w = s.image.shape[:2]
        images[i, :, :h, :w] = torch.from_numpy(np.ascontiguousarray(s.image)).permute(2, 0, 1)
        mask[i, :h, :w] = True
    return Batch(images, mask, list(samples))


def batcher(samples: Sequence[ImageSample], batch_size: int, shuffle_seed: int | None = None,
            size_divisor: int = 1, drop_last: bool = False) -> Iterator[Batch]:
    """Yield padded batches; the order is fixed by ``shuffle_seed`` (None keeps input order)."""
    if not samples:
        raise ValueError("batcher needs at least one sample")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        yield collate([samples[i] for i in idx], size_divisor)
