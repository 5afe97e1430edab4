"""Instance-identity pairs: same object twice, or two different objects."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError
from .objects import SimObject, random_pose, spawn_object
from .render import CameraView, render

VIEW_HALF = 0.25
CAM_JITTER = 0.05


@dataclass(frozen=True)
class IdentityPair:
    img_a: np.ndarray
    img_b: np.ndarray
    same: int                      # +1 same instance, -1 different
    seed_a: int
    seed_b: int
    pose_a: tuple[float, float, float]
    pose_b: tuple[float, float, float]
    view_a: CameraView
    view_b: CameraView


def _view_of(obj: SimObject, rng, image_size: int) -> CameraView:
    cx, cy, _ = obj.pose
    jitter = rng.uniform(-CAM_JITTER, CAM_JITTER, 2)
    return CameraView((float(cx + jitter[0]), float(cy + jitter[1])),
                      VIEW_HALF, image_size)


def gen_identity_pairs(objects, n_pos: int, n_neg: int, seed: int,
                       image_size: int = 64) -> list[IdentityPair]:
    """Balanced-by-request pairs over a fixed object pool.

    Positives re-pose one instance twice (poses differ almost surely);
    negatives draw two distinct instances.
    """
    objects = list(objects)
    if len(objects) < 2:
        raise ConfigurationError("identity pairs need at least two objects")
    pairs = []
    for i in range(n_pos + n_neg):
        rng = np.random.default_rng([0x1D5A, seed, i])
        positive = i < n_pos
        if positive:
            base = objects[rng.integers(len(objects))]
            a = base.at_pose(random_pose(rng))
            b = base.at_pose(random_pose(rng))
        else:
            ia = int(rng.integers(len(objects)))
            ib = int((ia + 1 + rng.integers(len(objects) - 1)) % len(objects))
            a = objects[ia].at_pose(random_pose(rng))
            b = objects[ib].at_pose(random_pose(rng))
        va = _view_of(a, rng, image_size)
        vb = _view_of(b, rng, image_size)
        pairs.append(IdentityPair(
            img_a=render(a, va), img_b=render(b, vb),
            same=1 if positive else -1, seed_a=a.instance_id,
            seed_b=b.instance_id, pose_a=a.pose, pose_b=b.pose,
            view_a=va, view_b=vb))
    return pairs


def gen_identity_dataset(n_pairs: int, seed: int, pool_size: int = 48,
                         image_size: int = 64) -> list[IdentityPair]:
    """Half positive, half negative pairs over pool_size spawned objects."""
    rng = np.random.default_rng([0x1D5B, seed])
    objects = [spawn_object(int(s))
               for s in rng.integers(2 ** 31 - 1, size=pool_size)]
    n_pos = n_pairs // 2
    return gen_identity_pairs(objects, n_pos, n_pairs - n_pos, seed,
                              image_size)
