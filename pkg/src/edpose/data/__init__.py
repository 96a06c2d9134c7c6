from .augment import AugmentConfig, augment, crop, hflip, resize
from .batching import Batch, batcher, collate
from .coco import CocoFormatError, SchemaError, load_coco_keypoints
from .datasets import build_dataset, spec_from_config
from .synth import synth_scene
from .types import DatasetSpec, ImageSample, Instance

__all__ = [
    "AugmentConfig", "augment", "crop", "hflip", "resize", "Batch", "batcher", "collate",
    "CocoFormatError", "SchemaError", "load_coco_keypoints", "build_dataset", "spec_from_config",
    "synth_scene", "DatasetSpec", "ImageSample", "Instance",
]
