"""Labeled gallery views for retrieval and transfer evaluation.

Each instance is rendered from several poses; labels carry instance,
shape category, and the 8-way class (shape kind crossed with texture
family) used for classification transfer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objects import random_pose, spawn_object
from .render import CameraView, render

VIEW_HALF = 0.25
CAM_JITTER = 0.05


@dataclass(frozen=True)
class GalleryView:
    img: np.ndarray
    obj_seed: int
    instance_id: int
    category_id: int
    texture_family: int
    class_id: int
    pose: tuple[float, float, float]
    view: CameraView


def gen_gallery_dataset(n_instances: int, views_per_instance: int,
                        seed: int, image_size: int = 64) -> list[GalleryView]:
    rng = np.random.default_rng([0x6A11, seed])
    seeds = rng.integers(2 ** 31 - 1, size=n_instances)
    records = []
    for idx, obj_seed in enumerate(seeds):
        base = spawn_object(int(obj_seed))
        for v in range(views_per_instance):
            vrng = np.random.default_rng([0x6A12, seed, idx, v])
            obj = base.at_pose(random_pose(vrng))
            cx, cy, _ = obj.pose
            jitter = vrng.uniform(-CAM_JITTER, CAM_JITTER, 2)
            view = CameraView((float(cx + jitter[0]), float(cy + jitter[1])),
                              VIEW_HALF, image_size)
            records.append(GalleryView(
                img=render(obj, view), obj_seed=obj.instance_id,
                instance_id=idx, category_id=obj.category_id,
                texture_family=obj.texture_family, class_id=obj.class_id,
                pose=obj.pose, view=view))
    return records
