"""
Vectorized ray casting against the scene primitives.

All rays start at the camera origin. Camera frame: x right, y down, z
forward, so the ground is the plane y = ground_height (> 0) and "up" is -y.
"""

# python
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np


_EPS = 1e-9
UP = np.array([0.0, -1.0, 0.0])


@dataclass
class Hits():
    """
    Nearest hit per ray; t = inf and label = -1 where nothing is hit.
    """
    t: np.ndarray
    normals: np.ndarray
    labels: np.ndarray
    albedo: np.ndarray

    @classmethod
    def empty(cls, n: int) -> 'Hits':
        return cls(np.full(n, np.inf), np.zeros((n, 3)), np.full(n, -1, dtype=np.int64), np.zeros((n, 3)))

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.t)


class Primitive():
    """
    A solid with a semantic class and a base colour.
    """

    def __init__(self, label: int, albedo) -> None:
        self.label = label
        self.albedo = np.asarray(albedo, dtype=np.float64)

    def intersect(self, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Return (t, normals) of the first hit along each direction, t = inf on a miss.
        """
        raise NotImplementedError


class GroundPlane(Primitive):

    def __init__(self, label: int, albedo, height: float) -> None:
        super().__init__(label, albedo)
        self.height = height

    def intersect(self, directions):
        dy = directions[:, 1]
        t = np.full(directions.shape[0], np.inf)
        down = dy > _EPS
        t[down] = self.height / dy[down]
        return t, np.broadcast_to(UP, directions.shape).copy()


class Box(Primitive):
    """
    Axis-aligned box given by its centre and half extents.
    """

    def __init__(self, label: int, albedo, centre, half_extents) -> None:
        super().__init__(label, albedo)
        self.lo = np.asarray(centre, dtype=np.float64) - np.asarray(half_extents, dtype=np.float64)
        self.hi = np.asarray(centre, dtype=np.float64) + np.asarray(half_extents, dtype=np.float64)

    def intersect(self, directions):
        with np.errstate(divide='ignore', invalid='ignore'):
            inv = 1.0 / directions
            t1 = self.lo * inv
            t2 = self.hi * inv
        t_near = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        t_far = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
        entry_axis = np.argmax(t_near, axis=1)
        t_enter = t_near.max(axis=1)
        t_exit = t_far.min(axis=1)
        hit = (t_enter <= t_exit) & (t_enter > _EPS)
        t = np.where(hit, t_enter, np.inf)
        normals = np.zeros_like(directions)
        rows = np.arange(directions.shape[0])
        normals[rows, entry_axis] = -np.sign(directions[rows, entry_axis])
        return t, normals


class Sphere(Primitive):

    def __init__(self, label: int, albedo, centre, radius: float) -> None:
        super().__init__(label, albedo)
        self.centre = np.asarray(centre, dtype=np.float64)
        self.radius = radius

    def intersect(self, directions):
        a = (directions ** 2).sum(axis=1)
        b = directions @ self.centre
        c = self.centre @ self.centre - self.radius ** 2
        disc = b * b - a * c
        t = np.full(directions.shape[0], np.inf)
        ok = disc >= 0
        near = (b[ok] - np.sqrt(disc[ok])) / a[ok]
        t[ok] = np.where(near > _EPS, near, np.inf)
        points = directions * np.where(np.isfinite(t), t, 0.0)[:, None]
        normals = (points - self.centre) / self.radius
        return t, normals


class Cylinder(Primitive):
    """
    Vertical cylinder standing on the ground, capped at the top.
    """

    def __init__(self, label: int, albedo, base_centre, radius: float, height: float) -> None:
        super().__init__(label, albedo)
        self.base = np.asarray(base_centre, dtype=np.float64)
        self.radius = radius
        self.top_y = self.base[1] - height

    def intersect(self, directions):
        n = directions.shape[0]
        dx, dy, dz = directions[:, 0], directions[:, 1], directions[:, 2]
        cx, cz = self.base[0], self.base[2]
        # side: (t dx - cx)^2 + (t dz - cz)^2 = r^2
        a = dx * dx + dz * dz
        b = dx * cx + dz * cz
        c = cx * cx + cz * cz - self.radius ** 2
        disc = b * b - a * c
        side = np.full(n, np.inf)
        ok = (disc >= 0) & (a > _EPS)
        near = np.full(n, np.inf)
        near[ok] = (b[ok] - np.sqrt(disc[ok])) / a[ok]
        y = np.where(ok, near, 0.0) * dy
        valid = ok & (near > _EPS) & (y >= self.top_y) & (y <= self.base[1])
        side[valid] = near[valid]
        # top cap
        cap = np.full(n, np.inf)
        with np.errstate(divide='ignore', invalid='ignore'):
            t_cap = self.top_y / dy
            cap_ok = (np.abs(dy) > _EPS) & (t_cap > _EPS)
            px = np.where(cap_ok, t_cap * dx, np.inf) - cx
            pz = np.where(cap_ok, t_cap * dz, np.inf) - cz
        cap_ok &= px * px + pz * pz <= self.radius ** 2
        cap[cap_ok] = t_cap[cap_ok]

        t = np.minimum(side, cap)
        normals = np.zeros_like(directions)
        on_side = np.isfinite(side) & (side <= cap)
        normals[on_side, 0] = (side[on_side] * dx[on_side] - cx) / self.radius
        normals[on_side, 2] = (side[on_side] * dz[on_side] - cz) / self.radius
        normals[~on_side] = UP
        return t, normals


@dataclass
class Scene():
    """
    Ground plane plus solid primitives.
    """
    ground: GroundPlane
    objects: List[Primitive] = field(default_factory=list)

    @property
    def primitives(self) -> List[Primitive]:
        return [self.ground] + list(self.objects)

    def cast(self, directions: np.ndarray, max_range: float) -> Hits:
        """
        Nearest hit within max_range (ray parameter scaled by the direction
        length) for every direction [N,3].
        """
        directions = np.asarray(directions, dtype=np.float64)
        hits = Hits.empty(directions.shape[0])
        lengths = np.linalg.norm(directions, axis=1)
        for primitive in self.primitives:
            t, normals = primitive.intersect(directions)
            closer = (t < hits.t) & (t * lengths <= max_range)
            hits.t[closer] = t[closer]
            hits.normals[closer] = normals[closer]
            hits.labels[closer] = primitive.label
            hits.albedo[closer] = primitive.albedo
        return hits
