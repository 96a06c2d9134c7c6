"""Dataset construction from a ``DatasetSpec``, with optional on-disk caching."""

from __future__ import annotations

import hashlib
import json
import os
import pickle
from pathlib import Path

import numpy as np

from .coco import SchemaError, load_coco_keypoints
from .synth import synth_scene
from .types import DatasetSpec, ImageSample

CACHE_ENV = "EDPOSE_CACHE_DIR"
_SPLIT_IDS = {"train": 0, "val": 1}


def spec_from_config(data_cfg, num_keypoints: int, split: str) -> DatasetSpec:
    if split not in _SPLIT_IDS:
        raise ValueError(f"unknown split {split!r}")
    if data_cfg.source == "synthetic":
        n = data_cfg.n_images if split == "train" else data_cfg.n_val_images
        return DatasetSpec("synthetic", num_keypoints, split, seed=data_cfg.seed, n_images=n,
                           people_range=(data_cfg.people_min, data_cfg.people_max),
                           image_size=data_cfg.image_size)
    path = data_cfg.path if split == "train" else (data_cfg.val_path or data_cfg.path)
    return DatasetSpec("coco_json", num_keypoints, split, path=path, image_root=data_cfg.image_root)


def synthetic_samples(spec: DatasetSpec) -> list[ImageSample]:
    lo, hi = spec.people_range
    out = []
    for i in range(spec.n_images):
        rng = np.random.default_rng([spec.seed, _SPLIT_IDS[spec.split], i])
        n = int(rng.integers(lo, hi + 1))
        out.append(synth_scene(rng, n, spec.num_keypoints, spec.image_size, image_id=f"{spec.split}-{i:05d}"))
    return out


def _cache_key(spec: DatasetSpec) -> str:
    fields = {"source": spec.source, "K": spec.num_keypoints, "split": spec.split, "seed": spec.seed,
              "n": spec.n_images, "people": list(spec.people_range), "size": spec.image_size, "v": 1}
    return hashlib.sha1(json.dumps(fields, sort_keys=True).encode()).hexdigest()[:16]


def build_dataset(spec: DatasetSpec) -> list[ImageSample]:
    if spec.source == "coco_json":
        samples = load_coco_keypoints(spec.path, spec.image_root or None, spec.num_keypoints)
        return samples
    if spec.source != "synthetic":
        raise SchemaError(f"unknown dataset source {spec.source!r}")
    cache_dir = os.environ.get(CACHE_ENV)
    if not cache_dir:
        return synthetic_samples(spec)
    path = Path(cache_dir) / f"synthetic-{_cache_key(spec)}.pkl"
    if path.is_file():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    samples = synthetic_samples(spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(samples, fh)
    tmp.replace(path)
    return samples
