"""Planar pushes: action sampling and quasi-static pose updates.

The hand approaches along a Von Mises-distributed direction whose mean
points from the object centroid toward the workspace center, starts
outside the silhouette on the far side, and drives to a point inside
it. The object translates along the push direction in proportion to
penetration depth and spins with the lever arm of the contact point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError
from .objects import SPAWN_HALF, SimObject, chord_interval, spawn_object
from .render import CameraView, render

ETA_T = 0.8                # translation gain per meter of depth
ETA_R = 12.0               # rotation gain, rad per m^2 of depth*lever
Z_RANGE = (0.02, 0.08)     # hand height range
VIEW_HALF = 0.25
DEFAULT_KAPPA = 4.0

# per-dimension (offset, scale) so stored targets sit in roughly [-1, 1]
ACTION_OFFSET = np.array([0.0, 0.0, 0.0, 0.0, 0.05])
ACTION_SCALE = np.array([0.5, 0.5, 0.5, 0.5, 0.03])


@dataclass(frozen=True)
class PushContact:
    point: tuple[float, float]
    depth: float
    t_entry: float


@dataclass(frozen=True)
class PushSample:
    img_begin: np.ndarray
    img_final: np.ndarray
    action: np.ndarray                    # raw (xb, yb, xf, yf, z)
    obj_seed: int
    pose_begin: tuple[float, float, float]
    pose_final: tuple[float, float, float]
    contacted: bool
    kappa: float
    view: CameraView


def normalize_action(raw: np.ndarray) -> np.ndarray:
    return (np.asarray(raw, float) - ACTION_OFFSET) / ACTION_SCALE


def sample_push_action(obj: SimObject, kappa: float, seed) -> np.ndarray:
    """Draw a 5-dim push (start xy, final xy, hand height).

    The approach direction is Von Mises around the centroid-to-center
    bearing; kappa -> infinity degenerates to pushing straight at the
    workspace center.
    """
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    cx, cy, _ = obj.pose
    to_center = -np.array([cx, cy])
    mu = np.arctan2(to_center[1], to_center[0]) \
        if np.hypot(*to_center) > 1e-9 else 0.0
    phi = float(rng.vonmises(mu, kappa))
    d = np.array([np.cos(phi), np.sin(phi)])
    v = np.array([-d[1], d[0]])
    perp = chord_interval(obj, (cx, cy), v)
    if perp is None:
        raise DomainError("object centroid fell outside its own silhouette")
    # slide the push line sideways so most contacts are off-center; the
    # aim point stays strictly interior (shapes are convex), so the line
    # is guaranteed to cross the silhouette
    aim = np.array([cx, cy]) + rng.uniform(0.65 * perp[0],
                                           0.65 * perp[1]) * v
    t0, t1 = chord_interval(obj, aim, d)
    back = rng.uniform(0.015, 0.05)
    begin = aim + (t0 - back) * d
    final = aim + rng.uniform(0.15, 0.9) * t1 * d
    z = rng.uniform(*Z_RANGE)
    return np.array([begin[0], begin[1], final[0], final[1], z])


def push_contact(obj: SimObject, x_begin, x_final) -> PushContact | None:
    """First silhouette hit along the hand's path, or None for a miss."""
    p0 = np.asarray(x_begin, float)[:2]
    p1 = np.asarray(x_final, float)[:2]
    seg = p1 - p0
    length = float(np.hypot(*seg))
    if length < 1e-12:
        return None
    d = seg / length
    itv = chord_interval(obj, p0, d)
    if itv is None:
        return None
    t_entry = max(itv[0], 0.0)
    if itv[1] <= 0.0 or t_entry >= length:
        return None
    cp = p0 + t_entry * d
    return PushContact(point=(float(cp[0]), float(cp[1])),
                       depth=length - t_entry, t_entry=t_entry)


def apply_push(obj: SimObject, x_begin, x_final,
               eta_t: float = ETA_T, eta_r: float = ETA_R) -> SimObject:
    """Quasi-static pose update; a miss returns the pose unchanged.

    Translation follows the push direction scaled by penetration depth;
    rotation is depth times the contact lever arm (cross product), so
    off-center contact spins the object toward alignment.
    """
    contact = push_contact(obj, x_begin, x_final)
    if contact is None:
        return obj
    p0 = np.asarray(x_begin, float)[:2]
    p1 = np.asarray(x_final, float)[:2]
    d = (p1 - p0) / np.hypot(*(p1 - p0))
    cx, cy, th = obj.pose
    lever = ((contact.point[0] - cx) * d[1]
             - (contact.point[1] - cy) * d[0])
    shift = eta_t * contact.depth * d
    dth = eta_r * contact.depth * lever
    nx = float(np.clip(cx + shift[0], -SPAWN_HALF - 0.1, SPAWN_HALF + 0.1))
    ny = float(np.clip(cy + shift[1], -SPAWN_HALF - 0.1, SPAWN_HALF + 0.1))
    return obj.at_pose((nx, ny, (th + dth) % (2.0 * np.pi)))


def gen_push_dataset(n: int, seed: int, kappa: float = DEFAULT_KAPPA,
                     image_size: int = 64) -> list[PushSample]:
    """n before/after push pairs under a fixed per-pair camera."""
    samples = []
    for i in range(n):
        rng = np.random.default_rng([0x7054, seed, i])
        obj = spawn_object(int(rng.integers(2 ** 31 - 1)))
        action = sample_push_action(obj, kappa, rng)
        cx, cy, _ = obj.pose
        jitter = rng.uniform(-0.04, 0.04, 2)
        view = CameraView((float(cx + jitter[0]), float(cy + jitter[1])),
                          VIEW_HALF, image_size)
        contact = push_contact(obj, action[:2], action[2:4])
        moved = apply_push(obj, action[:2], action[2:4])
        samples.append(PushSample(
            img_begin=render(obj, view), img_final=render(moved, view),
            action=action, obj_seed=obj.instance_id, pose_begin=obj.pose,
            pose_final=moved.pose, contacted=contact is not None,
            kappa=kappa, view=view))
    return samples
