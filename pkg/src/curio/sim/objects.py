"""Rigid tabletop objects and exact silhouette geometry.

Coordinates are meters on a square table spanning [-0.5, 0.5] on both
axes with the workspace center at the origin. Every object is convex:
a disk, a bar (rectangle), an ellipse, or a convex polygon. Poses are
(x, y, theta) with vertices/extents expressed in the object frame,
centered on the area centroid so pose position doubles as the centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigurationError

TABLE_HALF = 0.5
SPAWN_HALF = 0.25
KINDS = ("disk", "bar", "ellipse", "polygon")
N_TEXTURE_FAMILIES = 2
# Soft objects wear smooth blobby textures, hard ones fine stripes; the
# disjoint stiffness ranges make surface look predictive of compliance.
STIFFNESS_BASE = (20.0, 80.0)


@dataclass(frozen=True)
class SimObject:
    kind: str
    extents: tuple[float, float]          # half-dimensions (radius twice for disk)
    pose: tuple[float, float, float]      # x, y, theta
    stiffness: float
    texture_seed: int
    instance_id: int
    vertices: np.ndarray | None = field(default=None, repr=False)

    @property
    def category_id(self) -> int:
        return KINDS.index(self.kind)

    @property
    def texture_family(self) -> int:
        return self.texture_seed % N_TEXTURE_FAMILIES

    @property
    def class_id(self) -> int:
        """Shape kind crossed with texture family: 8 transfer classes."""
        return self.category_id * N_TEXTURE_FAMILIES + self.texture_family

    @property
    def bound_radius(self) -> float:
        if self.kind == "polygon":
            return float(np.linalg.norm(self.vertices, axis=1).max())
        return float(np.hypot(*self.extents))

    def at_pose(self, pose) -> "SimObject":
        return replace(self, pose=(float(pose[0]), float(pose[1]),
                                   float(pose[2])))


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns CCW vertices."""
    pts = sorted(map(tuple, pts))
    if len(pts) < 3:
        raise ConfigurationError("polygon needs at least 3 points")

    def half(points):
        chain = []
        for p in points:
            while len(chain) >= 2:
                ox, oy = chain[-2]
                ax, ay = chain[-1]
                if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _polygon_centroid(v: np.ndarray) -> np.ndarray:
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = cross.sum() / 2.0
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return np.array([cx, cy])


def random_pose(rng) -> tuple[float, float, float]:
    x, y = rng.uniform(-SPAWN_HALF, SPAWN_HALF, 2)
    return (float(x), float(y), float(rng.uniform(0.0, 2.0 * np.pi)))


def spawn_object(seed: int, pose=None) -> SimObject:
    """Deterministically draw an object from the documented ranges.

    The seed fixes shape, extents, texture and stiffness; it doubles as
    the instance id so stored records can be recomputed exactly.
    """
    rng = np.random.default_rng(seed)
    kind = KINDS[rng.integers(len(KINDS))]
    vertices = None
    if kind == "disk":
        r = float(rng.uniform(0.03, 0.10))
        extents = (r, r)
    elif kind == "bar":
        extents = (float(rng.uniform(0.10, 0.18)),
                   float(rng.uniform(0.008, 0.022)))
    elif kind == "ellipse":
        extents = (float(rng.uniform(0.06, 0.12)),
                   float(rng.uniform(0.025, 0.055)))
    else:
        n = int(rng.integers(5, 9))
        base = rng.uniform(0.05, 0.11)
        angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
        radii = base * rng.uniform(0.75, 1.25, n)
        pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], 1)
        vertices = _convex_hull(pts)
        vertices = vertices - _polygon_centroid(vertices)
        extents = (float(np.abs(vertices[:, 0]).max()),
                   float(np.abs(vertices[:, 1]).max()))
    texture_seed = int(rng.integers(1, 2 ** 31 - 1))
    stiffness = float(STIFFNESS_BASE[texture_seed % N_TEXTURE_FAMILIES]
                      * np.exp(rng.uniform(-0.35, 0.35)))
    if pose is None:
        pose = random_pose(rng)
    return SimObject(kind=kind, extents=extents, pose=tuple(pose),
                     stiffness=stiffness, texture_seed=texture_seed,
                     instance_id=int(seed), vertices=vertices)


# ------------------------------------------------------------- geometry

def world_to_local(obj: SimObject, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(pts)
    x, y, th = obj.pose
    c, s = np.cos(th), np.sin(th)
    dx, dy = pts[:, 0] - x, pts[:, 1] - y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=1)


def _contains_local(obj: SimObject, local: np.ndarray) -> np.ndarray:
    a, b = obj.extents
    if obj.kind == "disk":
        return local[:, 0] ** 2 + local[:, 1] ** 2 <= a * a
    if obj.kind == "bar":
        return (np.abs(local[:, 0]) <= a) & (np.abs(local[:, 1]) <= b)
    if obj.kind == "ellipse":
        return (local[:, 0] / a) ** 2 + (local[:, 1] / b) ** 2 <= 1.0
    v = obj.vertices
    e = np.roll(v, -1, axis=0) - v
    # inside a CCW convex polygon: left of (or on) every edge
    cross = (e[:, 0] * (local[:, None, 1] - v[:, 1])
             - e[:, 1] * (local[:, None, 0] - v[:, 0]))
    return np.all(cross >= -1e-12, axis=1)


def contains(obj: SimObject, pts) -> np.ndarray:
    """Vectorized point-in-silhouette test in world coordinates."""
    return _contains_local(obj, world_to_local(obj, np.asarray(pts, float)))


def chord_interval(obj: SimObject, point, direction):
    """Intersection {t : point + t*direction inside obj} as (t0, t1).

    Exact for every kind (all shapes are convex, so the intersection is
    a single interval). Returns None when the line misses. t is in
    world units regardless of the local-frame scaling.
    """
    point = np.asarray(point, float)
    direction = np.asarray(direction, float)
    x, y, th = obj.pose
    c, s = np.cos(th), np.sin(th)
    p = np.array([c * (point[0] - x) + s * (point[1] - y),
                  -s * (point[0] - x) + c * (point[1] - y)])
    d = np.array([c * direction[0] + s * direction[1],
                  -s * direction[0] + c * direction[1]])
    a, b = obj.extents

    if obj.kind in ("disk", "ellipse"):
        ra, rb = (a, a) if obj.kind == "disk" else (a, b)
        ps = p / (ra, rb)
        ds = d / (ra, rb)
        qa = ds @ ds
        qb = 2.0 * (ps @ ds)
        qc = ps @ ps - 1.0
        disc = qb * qb - 4.0 * qa * qc
        if disc < 0.0 or qa == 0.0:
            return None
        root = np.sqrt(disc)
        return ((-qb - root) / (2 * qa), (-qb + root) / (2 * qa))

    if obj.kind == "bar":
        t0, t1 = -np.inf, np.inf
        for coord, half in ((0, a), (1, b)):
            if abs(d[coord]) < 1e-12:
                if abs(p[coord]) > half:
                    return None
                continue
            lo = (-half - p[coord]) / d[coord]
            hi = (half - p[coord]) / d[coord]
            if lo > hi:
                lo, hi = hi, lo
            t0, t1 = max(t0, lo), min(t1, hi)
        return (t0, t1) if t0 <= t1 else None

    # convex polygon: Cyrus-Beck clipping against each CCW edge
    v = obj.vertices
    e = np.roll(v, -1, axis=0) - v
    normals = np.stack([e[:, 1], -e[:, 0]], axis=1)  # outward for CCW
    t0, t1 = -np.inf, np.inf
    for n, vert in zip(normals, v):
        denom = n @ d
        offset = n @ (p - vert)
        if abs(denom) < 1e-14:
            if offset > 1e-12:
                return None
            continue
        t = -offset / denom
        if denom > 0:
            t1 = min(t1, t)
        else:
            t0 = max(t0, t)
    return (t0, t1) if t0 <= t1 else None


def segment_hits(obj: SimObject, p0, p1) -> bool:
    """True when the closed segment p0..p1 intersects the silhouette."""
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    d = p1 - p0
    length = float(np.hypot(*d))
    if length < 1e-12:
        return bool(contains(obj, p0[None])[0])
    itv = chord_interval(obj, p0, d / length)
    if itv is None:
        return False
    t0, t1 = itv
    return t0 <= length and t1 >= 0.0
