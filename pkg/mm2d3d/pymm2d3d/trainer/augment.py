"""
Per-branch data augmentation. The 2D branch and the 3D branch each get
their own independently drawn view of a sample.
"""

# python
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

# pymm2d3d
from ..errors import UsageError
from ..forge import Sample
from ..geometry import Intrinsics, PointCloud, project


MODES = ('2d', '3d')


@dataclass(frozen=True)
class AugmentConfig():
    flip_2d: bool = True
    jitter: Tuple[float, float] = (0.8, 1.25)
    flip_3d: bool = True
    scale: Tuple[float, float] = (0.95, 1.05)
    rotation_deg: float = 10.0


def hflip(image: np.ndarray, cloud: PointCloud, K: Intrinsics) -> Tuple[np.ndarray, PointCloud]:
    """
    Mirror the image columns and move every point so that it projects to
    u' = width - 1 - u at the same depth.
    """
    positions = cloud.positions.astype(np.float64)
    z = positions[:, 2]
    uv, _ = project(positions, K)
    flipped_u = (K.width - 1) - uv[:, 0]
    moved = positions.copy()
    moved[:, 0] = (flipped_u - K.cx) * z / K.fx
    return image[:, :, ::-1].copy(), PointCloud(moved, cloud.colors, cloud.labels)


def jitter_colors(image: np.ndarray, gains: np.ndarray) -> np.ndarray:
    return np.clip(image * np.asarray(gains, dtype=np.float32).reshape(3, 1, 1), 0.0, 1.0)


def transform_3d(positions: np.ndarray, mirror: bool, scale: float, angle_deg: float) -> np.ndarray:
    """
    Optional x -> -x mirror, uniform scale, then rotation about the camera's
    vertical (y) axis.
    """
    out = np.asarray(positions, dtype=np.float64).copy()
    if mirror:
        out[:, 0] = -out[:, 0]
    out *= scale
    return Rotation.from_euler('y', angle_deg, degrees=True).apply(out)


def augment_2d(sample: Sample, rng: np.random.Generator, config: AugmentConfig) -> Tuple[np.ndarray, PointCloud]:
    image, cloud = sample.image, sample.cloud
    if config.flip_2d and rng.random() < 0.5:
        image, cloud = hflip(image, cloud, sample.K)
    gains = rng.uniform(config.jitter[0], config.jitter[1], size=3)
    return jitter_colors(image, gains), cloud


def augment_3d(cloud: PointCloud, rng: np.random.Generator, config: AugmentConfig) -> PointCloud:
    mirror = config.flip_3d and rng.random() < 0.5
    scale = rng.uniform(config.scale[0], config.scale[1])
    angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
    return PointCloud(transform_3d(cloud.positions, mirror, scale, angle), cloud.colors, cloud.labels)


def augment(sample: Sample, mode: str, seed: int, config: AugmentConfig = AugmentConfig()) -> Sample:
    """
    One branch's augmented copy of a sample. Labels are never changed.
    """
    rng = np.random.default_rng(seed)
    if mode == '2d':
        image, cloud = augment_2d(sample, rng, config)
        return Sample(image, cloud, sample.K, sample.domain)
    if mode == '3d':
        return Sample(sample.image, augment_3d(sample.cloud, rng, config), sample.K, sample.domain)
    raise UsageError(f'Unknown augmentation mode <{mode}>, use one of {MODES}')
