"""Orthographic top-down rendering of the tabletop.

Textures are procedural functions of object-local coordinates, so they
translate and rotate rigidly with the object. The families are visually
distinct on purpose: family 0 (soft) gets smooth low-frequency shading,
family 1 (hard) gets fine high-contrast stripes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objects import SimObject, _contains_local, world_to_local


@dataclass(frozen=True)
class CameraView:
    center: tuple[float, float]
    half_extent: float
    resolution: int

    def as_meta(self) -> list[float]:
        return [self.center[0], self.center[1], self.half_extent]


def _object_colors(local: np.ndarray, texture_seed: int) -> np.ndarray:
    trng = np.random.default_rng(texture_seed)
    base = trng.uniform(0.3, 0.95, 3)
    u, v = local[:, 0], local[:, 1]
    if texture_seed % 2 == 0:
        f1 = trng.uniform(4.0, 9.0, 2)
        f2 = trng.uniform(4.0, 9.0, 2)
        ph = trng.uniform(0.0, 2.0 * np.pi, 2)
        w = (np.sin(2 * np.pi * (f1[0] * u + f1[1] * v) + ph[0])
             + np.sin(2 * np.pi * (f2[0] * u - f2[1] * v) + ph[1]))
        shade = 0.75 + 0.125 * w
    else:
        freq = trng.uniform(35.0, 70.0)
        ang = trng.uniform(0.0, 2.0 * np.pi)
        ph = trng.uniform(0.0, 2.0 * np.pi)
        stripe = np.sin(2 * np.pi * freq * (u * np.cos(ang) + v * np.sin(ang))
                        + ph)
        shade = np.where(stripe > 0.0, 1.0, 0.45)
    return np.clip(base[None, :] * shade[:, None], 0.0, 1.0)


def _table_colors(world: np.ndarray) -> np.ndarray:
    wx, wy = world[:, 0], world[:, 1]
    shade = 0.42 + 0.04 * np.sin(2 * np.pi * 3.0 * wx) * np.cos(
        2 * np.pi * 3.0 * wy)
    return np.repeat(shade[:, None], 3, axis=1)


def pixel_grid(view: CameraView) -> np.ndarray:
    """World coordinates of pixel centers, row 0 at the top (y max)."""
    res = view.resolution
    ticks = (np.arange(res) + 0.5) / res * 2.0 * view.half_extent
    xs = view.center[0] - view.half_extent + ticks
    ys = view.center[1] + view.half_extent - ticks
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def render(obj: SimObject, view: CameraView) -> np.ndarray:
    """[3, res, res] float32 image in [0, 1]."""
    world = pixel_grid(view)
    local = world_to_local(obj, world)
    mask = _contains_local(obj, local)
    colors = _table_colors(world)
    if mask.any():
        colors[mask] = _object_colors(local[mask], obj.texture_seed)
    res = view.resolution
    img = colors.reshape(res, res, 3).transpose(2, 0, 1)
    return np.ascontiguousarray(img, dtype=np.float32)
