from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import BoxXYWH, KeypointSet


@dataclass(frozen=True)
class Instance:
    box: BoxXYWH
    keypoints: KeypointSet
    area: float  # object scale s^2 as a fraction of the image area

    @property
    def num_visible(self) -> int:
        return int((self.keypoints.vis() > 0).sum())


@dataclass
class ImageSample:
    """One image with its annotations, coordinates in fractions of this image's size."""

    image: np.ndarray | None  # H x W x 3 float32 in [0, 1]
    instances: list[Instance]
    image_id: object
    size: tuple[int, int] = (0, 0)  # (width, height) in pixels

    def __post_init__(self):
        if self.image is not None:
            h, w = self.image.shape[:2]
            self.size = (w, h)

    @property
    def width(self) -> int:
        return self.size[0]

    @property
    def height(self) -> int:
        return self.size[1]


@dataclass(frozen=True)
class DatasetSpec:
    source: str              # "coco_json" or "synthetic"
    num_keypoints: int
    split: str = "train"
    path: str = ""
    image_root: str = ""
    seed: int = 0
    n_images: int = 16
    people_range: tuple[int, int] = (2, 3)
    image_size: int = 128
    extra: dict = field(default_factory=dict, compare=False, hash=False)
