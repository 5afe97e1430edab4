"""Grasp attempts: angle-binned feasibility and patch dataset generation.

A grasp is parameterized by a point and one of 18 angle bins (10 degree
spacing). The bin direction is the jaw closing axis: the grasp succeeds
when the point lies on the object, the silhouette chord through the
point along the closing axis is narrower than the gripper opening, and
both jaw plates (segments perpendicular to the closing axis, offset by
half the opening on each side) clear the silhouette.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, GenerationError
from .objects import SimObject, chord_interval, contains, segment_hits, spawn_object
from .render import CameraView, render

N_ANGLE_BINS = 18
GRIPPER_WIDTH = 0.075      # jaw opening, meters
PLATE_HALFLEN = 0.03       # half-length of each jaw plate
PATCH_HALF = 0.16          # patch camera half-extent
_SCAN_STEP = 1.5e-3        # silhouette scan resolution for polygons


@dataclass(frozen=True)
class GraspSample:
    patch: np.ndarray          # [3, res, res] float32
    angle_bin: int
    label: int                 # 1 feasible, 0 not
    obj_seed: int
    pose: tuple[float, float, float]
    point: tuple[float, float]
    gripper_width: float
    view: CameraView


def bin_direction(angle_bin: int) -> np.ndarray:
    theta = angle_bin * np.pi / N_ANGLE_BINS
    return np.array([np.cos(theta), np.sin(theta)])


def _scan_chord(obj: SimObject, point: np.ndarray, u: np.ndarray):
    """Chord width around t=0 from a dense inside/outside scan."""
    ts = np.arange(-0.3, 0.3 + _SCAN_STEP, _SCAN_STEP)
    inside = contains(obj, point[None] + ts[:, None] * u[None])
    zero = np.searchsorted(ts, 0.0)
    if not inside[zero]:
        return None
    hi = zero
    while hi + 1 < len(ts) and inside[hi + 1]:
        hi += 1
    lo = zero
    while lo - 1 >= 0 and inside[lo - 1]:
        lo -= 1
    return (ts[lo], ts[hi])


def _scan_segment_hits(obj: SimObject, p0: np.ndarray, p1: np.ndarray) -> bool:
    n = max(2, int(np.ceil(np.hypot(*(p1 - p0)) / _SCAN_STEP)) + 1)
    ts = np.linspace(0.0, 1.0, n)
    pts = p0[None] + ts[:, None] * (p1 - p0)[None]
    return bool(contains(obj, pts).any())


def grasp_feasible(obj: SimObject, point, angle_bin: int,
                   gripper_width: float = GRIPPER_WIDTH,
                   plate_halflen: float = PLATE_HALFLEN) -> int:
    """1 when the gripper closing along the bin direction would succeed.

    Disk, bar and ellipse use closed-form chords and exact segment
    tests; polygons fall back to a dense silhouette scan.
    """
    if not 0 <= angle_bin < N_ANGLE_BINS:
        raise ConfigurationError(
            f"angle bin {angle_bin} outside [0, {N_ANGLE_BINS})")
    point = np.asarray(point, float)
    if not contains(obj, point[None])[0]:
        return 0
    u = bin_direction(angle_bin)
    v = np.array([-u[1], u[0]])

    if obj.kind == "polygon":
        itv = _scan_chord(obj, point, u)
    else:
        itv = chord_interval(obj, point, u)
    if itv is None:
        return 0
    if itv[1] - itv[0] >= gripper_width:
        return 0

    for side in (-1.0, 1.0):
        center = point + side * (gripper_width / 2.0) * u
        p0 = center - plate_halflen * v
        p1 = center + plate_halflen * v
        if obj.kind == "polygon":
            hit = _scan_segment_hits(obj, p0, p1)
        else:
            hit = segment_hits(obj, p0, p1)
        if hit:
            return 0
    return 1


def _sample_point_on(obj: SimObject, rng) -> np.ndarray:
    """Uniform point on the silhouette via bounding-box rejection."""
    r = obj.bound_radius
    cx, cy, _ = obj.pose
    for _ in range(400):
        p = np.array([cx, cy]) + rng.uniform(-r, r, 2)
        if contains(obj, p[None])[0]:
            return p
    raise GenerationError("could not place a point on the object")


def _sample_point_near(obj: SimObject, rng) -> np.ndarray:
    r = obj.bound_radius + 0.04
    cx, cy, _ = obj.pose
    return np.array([cx, cy]) + rng.uniform(-r, r, 2)


def gen_grasp_dataset(n: int, seed: int, positive_rate: float = 0.075,
                      gripper_width: float = GRIPPER_WIDTH,
                      image_size: int = 64,
                      patch_half: float = PATCH_HALF) -> list[GraspSample]:
    """n grasp records with a Bernoulli(positive_rate) label mix.

    Each record draws its own generator from (seed, index), so any
    record is reproducible in isolation and the stored label always
    agrees with grasp_feasible recomputed from the metadata.
    """
    if not 0.0 <= positive_rate <= 1.0:
        raise ConfigurationError(f"positive_rate {positive_rate} not in [0,1]")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([0x67A5, seed, i])
        want = 1 if rng.random() < positive_rate else 0
        sample = None
        for _ in range(60):
            obj = spawn_object(int(rng.integers(2 ** 31 - 1)))
            for _ in range(30):
                point = (_sample_point_on(obj, rng) if want
                         else _sample_point_near(obj, rng))
                for b in rng.permutation(N_ANGLE_BINS):
                    if grasp_feasible(obj, point, int(b), gripper_width) == want:
                        view = CameraView((float(point[0]), float(point[1])),
                                          patch_half, image_size)
                        sample = GraspSample(
                            patch=render(obj, view), angle_bin=int(b),
                            label=want, obj_seed=obj.instance_id,
                            pose=obj.pose,
                            point=(float(point[0]), float(point[1])),
                            gripper_width=gripper_width, view=view)
                        break
                if sample is not None:
                    break
            if sample is not None:
                break
        if sample is None:
            raise GenerationError(
                f"grasp sampler exhausted its budget at record {i} "
                f"(want label {want})")
        samples.append(sample)
    return samples
