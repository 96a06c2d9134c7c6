"""Keypoint layouts shipped with the package (COCO-17, CrowdPose-14)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources


@dataclass(frozen=True)
class Skeleton:
    name: str
    names: tuple[str, ...]
    flip_pairs: tuple[tuple[int, int], ...]
    sigmas: tuple[float, ...]
    limbs: tuple[tuple[int, int], ...]

    @property
    def num_keypoints(self) -> int:
        return len(self.names)

    def flip_index(self) -> list[int]:
        """Permutation mapping each keypoint index to its mirror image."""
        perm = list(range(self.num_keypoints))
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm

    def oks_constants(self) -> tuple[float, ...]:
        # COCO evaluation uses kappa_i = 2 * sigma_i inside exp(-d^2 / (2 s^2 kappa^2)).
        return tuple(2.0 * s for s in self.sigmas)


@lru_cache(maxsize=None)
def _table() -> dict:
    text = resources.files("edpose").joinpath("skeletons.json").read_text()
    return json.loads(text)


def get_skeleton(name_or_k: str | int) -> Skeleton:
    """Look up a layout by name ("coco17", "crowdpose14") or by keypoint count."""
    if isinstance(name_or_k, int):
        lookup = {17: "coco17", 14: "crowdpose14"}
        if name_or_k not in lookup:
            raise KeyError(f"no skeleton with {name_or_k} keypoints")
        name_or_k = lookup[name_or_k]
    raw = _table()[name_or_k]
    return Skeleton(
        name=name_or_k,
        names=tuple(raw["names"]),
        flip_pairs=tuple(tuple(p) for p in raw["flip_pairs"]),
        sigmas=tuple(raw["sigmas"]),
        limbs=tuple(tuple(p) for p in raw["limbs"]),
    )
