"""
Pinhole camera model and the 2D <-> 3D correspondences built on it.

Camera frame: x right, y down, z forward (metres). Pixel (u, v) has u along
the image columns and v along the rows. All ops use the same target pixel
(round-half-up of u and v) and the same nearest-z winner per pixel.
"""

# python
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

# pymm2d3d
from ..autodiff import Tensor, gather_pixels
from ..errors import DimensionError, DomainError, UsageError


IGNORE_LABEL = -1


@dataclass(frozen=True)
class Intrinsics():
    """
    Focal lengths and principal point in pixels, image size in pixels.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError(f'Focal lengths must be > 0, got fx={self.fx} fy={self.fy}')
        if self.width <= 0 or self.height <= 0:
            raise DomainError(f'Image size must be positive, got {self.width}x{self.height}')
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(f'Principal point ({self.cx}, {self.cy}) outside the {self.width}x{self.height} image')

    def as_array(self) -> np.ndarray:
        """
        (fx, fy, cx, cy, width, height) as float32, the on-disk order.
        """
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float32)

    @classmethod
    def from_array(cls, values) -> 'Intrinsics':
        fx, fy, cx, cy, width, height = [float(v) for v in values]
        return cls(fx, fy, cx, cy, int(round(width)), int(round(height)))

    @classmethod
    def centred(cls, width: int, height: int, focal: float) -> 'Intrinsics':
        """
        Principal point at the image centre, (size - 1) / 2.
        """
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


class PointCloud():
    """
    Camera-frame points with optional colours in [0,1] and labels (-1 = ignore).
    """

    def __init__(self,
                 positions: np.ndarray,
                 colors: Optional[np.ndarray] = None,
                 labels: Optional[np.ndarray] = None) -> None:
        self.positions = np.ascontiguousarray(positions, dtype=np.float32)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise DimensionError(f'PointCloud positions must be [N,3], got {self.positions.shape}')
        n = self.positions.shape[0]
        self.colors = None
        if colors is not None:
            self.colors = np.ascontiguousarray(colors, dtype=np.float32)
            if self.colors.shape != (n, 3):
                raise DimensionError(f'PointCloud colors must be [{n},3], got {self.colors.shape}')
        self.labels = None
        if labels is not None:
            self.labels = np.ascontiguousarray(labels, dtype=np.int32)
            if self.labels.shape != (n,):
                raise DimensionError(f'PointCloud labels must be [{n}], got {self.labels.shape}')
            if n and self.labels.min() < IGNORE_LABEL:
                raise DomainError(f'PointCloud labels must be >= {IGNORE_LABEL}')

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def subset(self, index) -> 'PointCloud':
        """
        Points selected by a boolean mask or an index array, in order.
        """
        return PointCloud(
            self.positions[index],
            None if self.colors is None else self.colors[index],
            None if self.labels is None else self.labels[index],
        )

    def with_labels(self, labels: Optional[np.ndarray]) -> 'PointCloud':
        return PointCloud(self.positions, self.colors, labels)

    def __repr__(self) -> str:
        return f'<PointCloud points={len(self)} colors={self.colors is not None} labels={self.has_labels}>'


def _positions(points) -> np.ndarray:
    return np.asarray(getattr(points, 'positions', points), dtype=np.float64)


def round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5).astype(np.int64)


def project(points, K: Intrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """
    u = fx x / z + cx, v = fy y / z + cy.

    Return:
        uv [N,2] real pixel coordinates and the in-bounds mask
        (0 <= round(u) < width and 0 <= round(v) < height)
    """
    xyz = _positions(points)
    if xyz.shape[0] and xyz[:, 2].min() <= 0:
        bad = int(np.argmax(xyz[:, 2] <= 0))
        raise DomainError(f'Point {bad} has z <= 0, only points in front of the camera can be projected')
    z = xyz[:, 2]
    uv = np.empty((xyz.shape[0], 2), dtype=np.float64)
    uv[:, 0] = K.fx * xyz[:, 0] / z + K.cx
    uv[:, 1] = K.fy * xyz[:, 1] / z + K.cy
    cols, rows = round_half_up(uv[:, 0]), round_half_up(uv[:, 1])
    mask = (cols >= 0) & (cols < K.width) & (rows >= 0) & (rows < K.height)
    return uv, mask


def pixel_indices(points, K: Intrinsics) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Target pixel (row, col) of every point and the in-bounds mask.
    """
    uv, mask = project(points, K)
    return round_half_up(uv[:, 1]), round_half_up(uv[:, 0]), mask


def back_project(u, v, z, K: Intrinsics) -> np.ndarray:
    """
    Camera-frame position of pixel (u, v) at depth z, shape [N,3].
    """
    u, v, z = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (u, v, z))
    return np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=1)


def zbuffer_winners(points, K: Intrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest-z point of every hit pixel.

    Ties in z go to the lowest point index.
    Return:
        (linear pixel index row * width + col, winning point index), one
        entry per hit pixel in increasing pixel order
    """
    rows, cols, mask = pixel_indices(points, K)
    candidates = np.flatnonzero(mask)
    if candidates.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    pixels = rows[candidates] * K.width + cols[candidates]
    z = _positions(points)[candidates, 2]
    order = np.lexsort((candidates, z, pixels))
    sorted_pixels = pixels[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = sorted_pixels[1:] != sorted_pixels[:-1]
    return sorted_pixels[first], candidates[order[first]]


def make_sparse_depth(points, K: Intrinsics) -> np.ndarray:
    """
    Sparse depth map [1,H,W] in metres, 0 where no point lands.
    """
    depth = np.zeros(K.height * K.width, dtype=np.float32)
    pixels, winners = zbuffer_winners(points, K)
    depth[pixels] = _positions(points)[winners, 2]
    return depth.reshape(1, K.height, K.width)


def project_labels(cloud: PointCloud, K: Intrinsics) -> np.ndarray:
    """
    Label map [H,W] of the z-buffer winners, -1 on pixels without a point.
    """
    if cloud.labels is None:
        raise UsageError('project_labels: the point cloud carries no labels')
    labels = np.full(K.height * K.width, IGNORE_LABEL, dtype=np.int64)
    pixels, winners = zbuffer_winners(cloud, K)
    labels[pixels] = cloud.labels[winners]
    return labels.reshape(K.height, K.width)


def sample_colors(image: np.ndarray, points, K: Intrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest-pixel colour of every point from an image [3,H,W].

    Return:
        colors [N,3] (zeros out of bounds) and the in-bounds flag
    """
    image = np.asarray(image)
    if image.shape != (3, K.height, K.width):
        raise DimensionError(f'sample_colors: image {image.shape} does not match intrinsics {K.width}x{K.height}')
    rows, cols, mask = pixel_indices(points, K)
    colors = np.zeros((rows.shape[0], 3), dtype=image.dtype)
    colors[mask] = image[:, rows[mask], cols[mask]].T
    return colors, mask


def gather_point_features(feature_map: Tensor, points, K: Intrinsics) -> Tensor:
    """
    Differentiable nearest-pixel gather of a decoder map [C,H,W] to [N,C].
    Out-of-bounds points get zero features.
    """
    if feature_map.ndim != 3 or feature_map.shape[1:] != (K.height, K.width):
        raise DimensionError(
            f'gather_point_features: map {feature_map.shape} does not match intrinsics {K.width}x{K.height}')
    rows, cols, mask = pixel_indices(points, K)
    return gather_pixels(feature_map, rows, cols, mask)
