"""Poke probes: monotone force-ramp profiles summarized by a line fit.

Pushing a probe into an object of given stiffness produces a pressure
ramp whose slope tracks stiffness. The stored regression target is the
least-squares line actually fit to the recorded profile, not the
nominal generating parameters, so targets stay exact under noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError
from .objects import SimObject, spawn_object
from .grasp import _sample_point_on
from .render import CameraView, render

DT = 0.05                 # seconds between force readings
MAX_STEPS = 50
THRESHOLD = 1.0           # ramp stops after first reading at or above this
SLOPE_PER_STIFFNESS = 0.01
VIEW_HALF = 0.25


@dataclass(frozen=True)
class PokeSample:
    img: np.ndarray
    times: np.ndarray          # float64 [T]
    pressures: np.ndarray      # float64 [T]
    target: tuple[float, float]  # least-squares (slope, intercept)
    obj_seed: int
    pose: tuple[float, float, float]
    point: tuple[float, float]
    stiffness: float
    view: CameraView


def fit_line(times, pressures) -> tuple[float, float]:
    """Least-squares (slope, intercept) of pressure against time."""
    times = np.asarray(times, float)
    pressures = np.asarray(pressures, float)
    if times.ndim != 1 or times.shape != pressures.shape or times.size < 2:
        raise ConfigurationError("profile needs at least two (t, p) readings")
    slope, intercept = np.polyfit(times, pressures, 1)
    return float(slope), float(intercept)


def gen_poke_sample(obj: SimObject, seed) -> PokeSample:
    """Probe the object once; profile noise keeps increments positive."""
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    point = _sample_point_on(obj, rng)
    slope = SLOPE_PER_STIFFNESS * obj.stiffness
    p0 = rng.uniform(0.02, 0.08)
    pressures = [p0]
    for _ in range(MAX_STEPS - 1):
        if pressures[-1] >= THRESHOLD:
            break
        wobble = 1.0 + rng.uniform(-0.3, 0.3)
        pressures.append(pressures[-1] + slope * DT * wobble)
    pressures = np.asarray(pressures, float)
    times = np.arange(pressures.size) * DT
    target = fit_line(times, pressures)
    return PokeSample(img=np.empty(0, np.float32), times=times,
                      pressures=pressures, target=target,
                      obj_seed=obj.instance_id, pose=obj.pose,
                      point=(float(point[0]), float(point[1])),
                      stiffness=obj.stiffness,
                      view=CameraView((0.0, 0.0), VIEW_HALF, 0))


def gen_poke_dataset(n: int, seed: int, image_size: int = 64) -> list[PokeSample]:
    samples = []
    for i in range(n):
        rng = np.random.default_rng([0x704B, seed, i])
        obj = spawn_object(int(rng.integers(2 ** 31 - 1)))
        probe = gen_poke_sample(obj, rng)
        cx, cy, _ = obj.pose
        jitter = rng.uniform(-0.05, 0.05, 2)
        view = CameraView((float(cx + jitter[0]), float(cy + jitter[1])),
                          VIEW_HALF, image_size)
        samples.append(PokeSample(
            img=render(obj, view), times=probe.times,
            pressures=probe.pressures, target=probe.target,
            obj_seed=obj.instance_id, pose=obj.pose, point=probe.point,
            stiffness=obj.stiffness, view=view))
    return samples
