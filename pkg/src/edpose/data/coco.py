"""COCO keypoints JSON ingestion."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import BoxXYWH, KeypointSet
from .types import ImageSample, Instance


class CocoFormatError(ValueError):
    pass


class SchemaError(ValueError):
    pass


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise CocoFormatError(f"missing key {key!r} in {where}")
    return obj[key]


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_coco_keypoints(json_path: str | Path, image_root: str | Path | None = None,
                        num_keypoints: int | None = None, load_images: bool = True) -> list[ImageSample]:
    """Parse a COCO keypoints file into normalized ``ImageSample`` objects.

    Crowd annotations and annotations without a labeled keypoint are dropped.
    Images without remaining annotations are kept (they supply negatives).
    File names resolve against ``image_root`` or, by default, the JSON's folder.
    """
    json_path = Path(json_path)
    with open(json_path) as fh:
        doc = json.load(fh)
    for key in ("images", "annotations", "categories"):
        _require(doc, key, "document")
    root = Path(image_root) if image_root else json_path.parent

    if num_keypoints is None:
        for cat in doc["categories"]:
            if "keypoints" in cat:
                num_keypoints = len(cat["keypoints"])
                break
    per_image = defaultdict(list)
    for i, ann in enumerate(doc["annotations"]):
        where = f"annotations[{i}]"
        for key in ("image_id", "keypoints", "bbox", "area", "iscrowd", "category_id"):
            _require(ann, key, where)
        per_image[ann["image_id"]].append(ann)

    samples = []
    for j, img in enumerate(doc["images"]):
        where = f"images[{j}]"
        image_id = _require(img, "id", where)
        W = float(_require(img, "width", where))
        H = float(_require(img, "height", where))
        file_name = _require(img, "file_name", where)
        instances = []
        for ann in per_image.get(image_id, []):
            if ann["iscrowd"]:
                continue
            kp = np.asarray(ann["keypoints"], dtype=np.float64).reshape(-1, 3)
            if num_keypoints is None:
                num_keypoints = kp.shape[0]
            if kp.shape[0] != num_keypoints:
                raise SchemaError(f"annotation of image {image_id} has {kp.shape[0]} keypoints, "
                                  f"expected {num_keypoints}")
            vis = kp[:, 2].astype(int)
            if not (vis > 0).any():
                continue
            x, y, bw, bh = (float(v) for v in ann["bbox"])
            if bw <= 0 or bh <= 0:
                continue
            box = BoxXYWH((x + bw / 2) / W, (y + bh / 2) / H, bw / W, bh / H)
            pts = np.stack([kp[:, 0] / W, kp[:, 1] / H], axis=1)
            instances.append(Instance(box, KeypointSet.from_arrays(pts, vis), float(ann["area"]) / (W * H)))
        image = read_image(root / file_name) if load_images else None
        samples.append(ImageSample(image, instances, image_id, (int(W), int(H))))
    return samples


def denormalize_instance(inst: Instance, width: float, height: float) -> dict:
    """Inverse of the loader's normalization, in COCO pixel fields."""
    b = inst.box
    pts = inst.keypoints.xy() * np.array([width, height])
    vis = inst.keypoints.vis()
    kp = np.concatenate([pts, vis[:, None]], axis=1).reshape(-1).tolist()
    return {
        "bbox": [(b.cx - b.w / 2) * width, (b.cy - b.h / 2) * height, b.w * width, b.h * height],
        "keypoints": kp,
        "area": inst.area * width * height,
    }
