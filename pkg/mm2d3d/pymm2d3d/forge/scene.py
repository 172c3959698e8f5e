"""
Procedural street scenes: layout, RGB rendering and simulated LiDAR.

A scene is a ground plane plus boxes (buildings, vehicles), spheres and
cylinders (vegetation). The image is ray cast per pixel with Lambertian
shading under one directional light; the LiDAR casts rays from the camera
origin against the same geometry. Generation is a pure function of
(spec, sample index).
"""

# python
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, Optional, Tuple

import numpy as np
from tqdm import tqdm

# pymm2d3d
from ..errors import ConfigError
from ..geometry import Intrinsics, PointCloud, project, sample_colors
from .dataset import Dataset, Sample, DOMAINS
from .raycast import Box, Cylinder, GroundPlane, Scene, Sphere


logger = logging.getLogger('pymm2d3d.forge')


CLASS_NAMES = ('ground', 'building', 'vehicle', 'vegetation')
GROUND, BUILDING, VEHICLE, VEGETATION = range(len(CLASS_NAMES))

GROUND_HEIGHT = 1.6
MAX_RANGE = 60.0
LIDAR_ELEVATION_DEG = (-24.0, 2.0)
LIDAR_AZIMUTH_STEPS = 100
AMBIENT = 0.35
LIGHT_DIRECTION = np.array([0.3, -1.0, -0.5]) / np.linalg.norm([0.3, -1.0, -0.5])
SKY_COLOR = np.array([0.55, 0.7, 0.9])
# per-unit colour temperature gain on red and blue
TEMPERATURE_GAIN = 0.25

LAYOUTS = ('random', 'occlusion')

LAYOUT_STREAM, LIDAR_STREAM, PIXEL_STREAM = 0, 1, 2

VEHICLE_PALETTE = np.array([
    [0.80, 0.10, 0.10],
    [0.15, 0.25, 0.75],
    [0.85, 0.85, 0.85],
    [0.20, 0.20, 0.22],
    [0.85, 0.70, 0.15],
])


@dataclass(frozen=True)
class SceneSpec():
    """
    Layout priors and domain knobs of a generated dataset.

    Object counts are inclusive [min, max] ranges, scaled by density; sizes
    are scaled by size_scale.
    """
    seed: int = 0
    width: int = 64
    height: int = 64
    focal: float = 48.0
    layout: str = 'random'
    buildings: Tuple[int, int] = (1, 3)
    vehicles: Tuple[int, int] = (1, 4)
    vegetation: Tuple[int, int] = (1, 4)
    density: float = 1.0
    size_scale: float = 1.0
    brightness: float = 1.0
    color_temperature: float = 0.0
    pixel_noise: float = 0.0
    lidar_lines: int = 64
    range_noise: float = 0.02
    domain: str = 'source'

    def __post_init__(self) -> None:
        errors = []
        if self.width < 16 or self.height < 16 or self.width % 16 or self.height % 16:
            errors.append(f'image size {self.width}x{self.height} must be a positive multiple of 16')
        if self.focal <= 0:
            errors.append(f'focal must be > 0, got {self.focal}')
        if self.layout not in LAYOUTS:
            errors.append(f'layout must be one of {LAYOUTS}, got {self.layout}')
        for name in ('buildings', 'vehicles', 'vegetation'):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                errors.append(f'{name} count range [{lo}, {hi}] is invalid')
        if not 0.0 <= self.density <= 4.0:
            errors.append(f'density must be in [0, 4], got {self.density}')
        if not 0.0 < self.size_scale <= 4.0:
            errors.append(f'size_scale must be in (0, 4], got {self.size_scale}')
        if not 0.0 < self.brightness <= 1.0:
            errors.append(f'brightness must be in (0, 1], got {self.brightness}')
        if not -1.0 <= self.color_temperature <= 1.0:
            errors.append(f'color_temperature must be in [-1, 1], got {self.color_temperature}')
        if not 0.0 <= self.pixel_noise <= 0.5:
            errors.append(f'pixel_noise must be in [0, 0.5], got {self.pixel_noise}')
        if not 1 <= self.lidar_lines <= 256:
            errors.append(f'lidar_lines must be in [1, 256], got {self.lidar_lines}')
        if not 0.0 <= self.range_noise <= 1.0:
            errors.append(f'range_noise must be in [0, 1] m, got {self.range_noise}')
        if self.domain not in DOMAINS:
            errors.append(f'domain must be one of {DOMAINS}, got {self.domain}')
        if errors:
            raise ConfigError('Invalid scene spec: ' + '; '.join(errors))

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics.centred(self.width, self.height, self.focal)

    @classmethod
    def from_dict(cls, values: Optional[dict]) -> 'SceneSpec':
        """
        Build a spec from a mapping; an optional 'preset' key names the base.
        """
        values = dict(values or {})
        preset = values.pop('preset', None)
        base = preset_spec(preset) if preset else cls()
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f'Unknown scene spec keys: {unknown}')
        for name in ('buildings', 'vehicles', 'vegetation'):
            if name in values:
                pair = values[name]
                if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                    raise ConfigError(f'{name} must be a [min, max] pair, got {pair}')
                values[name] = (int(pair[0]), int(pair[1]))
        try:
            return replace(base, **values)
        except TypeError as exc:
            raise ConfigError(f'Invalid scene spec: {exc}') from exc

    def to_dict(self) -> dict:
        values = asdict(self)
        for name in ('buildings', 'vehicles', 'vegetation'):
            values[name] = list(values[name])
        return values


PRESETS: Dict[str, dict] = {
    'day': {},
    'night': {'brightness': 0.15, 'color_temperature': -0.6, 'pixel_noise': 0.02, 'domain': 'target'},
    'usa': {'density': 0.7, 'size_scale': 1.2},
    'singapore': {'density': 1.5, 'size_scale': 0.85, 'domain': 'target'},
    'lidar64': {'lidar_lines': 64},
    'lidar16': {'lidar_lines': 16, 'domain': 'target'},
    'occlusion': {'layout': 'occlusion'},
}


def preset_spec(name: str, **overrides) -> SceneSpec:
    if name not in PRESETS:
        raise ConfigError(f'Unknown scene preset <{name}>, use one of {sorted(PRESETS)}')
    return replace(SceneSpec(**PRESETS[name]), **overrides)


def _rng(spec: SceneSpec, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index, stream])


def _jitter(rng: np.random.Generator, base, spread: float) -> np.ndarray:
    return np.clip(np.asarray(base) + rng.uniform(-spread, spread, size=3), 0.0, 0.9)


def _placement(rng: np.random.Generator, spec: SceneSpec, z_range: Tuple[float, float]) -> Tuple[float, float]:
    z = rng.uniform(*z_range)
    half_fov = (spec.width / 2.0) / spec.focal
    x = rng.uniform(-0.9, 0.9) * half_fov * z
    return x, z


def _count(rng: np.random.Generator, bounds: Tuple[int, int], density: float) -> int:
    return int(round(rng.integers(bounds[0], bounds[1] + 1) * density))


def _building(rng, spec, x, z, width=None) -> Box:
    s = spec.size_scale
    w = width if width is not None else rng.uniform(3.0, 6.0) * s
    h, d = rng.uniform(3.0, 7.0) * s, rng.uniform(3.0, 6.0) * s
    return Box(BUILDING, _jitter(rng, [0.75, 0.65, 0.5], 0.1),
               (x, GROUND_HEIGHT - h / 2, z + d / 2), (w / 2, h / 2, d / 2))


def _vehicle(rng, spec, x, z) -> Box:
    s = spec.size_scale
    w, h, l = rng.uniform(1.7, 2.0) * s, rng.uniform(1.4, 1.7) * s, rng.uniform(3.8, 4.8) * s
    albedo = _jitter(rng, VEHICLE_PALETTE[rng.integers(len(VEHICLE_PALETTE))], 0.05)
    return Box(VEHICLE, albedo, (x, GROUND_HEIGHT - h / 2, z + l / 2), (w / 2, h / 2, l / 2))


def _plant(rng, spec, x, z):
    s = spec.size_scale
    albedo = _jitter(rng, [0.2, 0.55, 0.2], 0.1)
    if rng.random() < 0.5:
        r = rng.uniform(0.7, 1.5) * s
        return Sphere(VEGETATION, albedo, (x, GROUND_HEIGHT - r, z), r)
    return Cylinder(VEGETATION, albedo, (x, GROUND_HEIGHT, z), rng.uniform(0.4, 0.9) * s, rng.uniform(2.0, 4.0) * s)


def build_scene(spec: SceneSpec, index: int) -> Scene:
    """
    Scene geometry of sample `index`. Depends only on the layout knobs.
    """
    rng = _rng(spec, index, LAYOUT_STREAM)
    ground = GroundPlane(GROUND, _jitter(rng, [0.45, 0.45, 0.42], 0.05), GROUND_HEIGHT)
    objects = []
    if spec.layout == 'occlusion':
        # a wide building behind a foreground vehicle, plants at the sides
        objects.append(_building(rng, spec, rng.uniform(-1.0, 1.0), rng.uniform(16.0, 20.0), width=10.0 * spec.size_scale))
        objects.append(_vehicle(rng, spec, rng.uniform(-0.5, 0.5), rng.uniform(6.0, 8.0)))
        for side in (-1.0, 1.0):
            objects.append(_plant(rng, spec, side * rng.uniform(3.0, 4.5), rng.uniform(9.0, 12.0)))
        return Scene(ground, objects)

    for _ in range(_count(rng, spec.buildings, spec.density)):
        objects.append(_building(rng, spec, *_placement(rng, spec, (14.0, 35.0))))
    for _ in range(_count(rng, spec.vehicles, spec.density)):
        objects.append(_vehicle(rng, spec, *_placement(rng, spec, (6.0, 25.0))))
    for _ in range(_count(rng, spec.vegetation, spec.density)):
        objects.append(_plant(rng, spec, *_placement(rng, spec, (6.0, 30.0))))
    return Scene(ground, objects)


def _color_gains(spec: SceneSpec) -> np.ndarray:
    t = spec.color_temperature
    return np.array([1.0 + TEMPERATURE_GAIN * t, 1.0, 1.0 - TEMPERATURE_GAIN * t])


def render(scene: Scene, spec: SceneSpec, index: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Ray cast one ray through every pixel centre.

    Return:
        image float32 [3,H,W] in [0,1] and the class map [H,W] (-1 = sky)
    """
    K = spec.intrinsics
    rows, cols = np.meshgrid(np.arange(K.height), np.arange(K.width), indexing='ij')
    directions = np.stack([(cols - K.cx) / K.fx, (rows - K.cy) / K.fy, np.ones_like(rows, dtype=np.float64)], axis=-1)
    hits = scene.cast(directions.reshape(-1, 3), MAX_RANGE)

    shading = AMBIENT + (1.0 - AMBIENT) * np.clip(hits.normals @ LIGHT_DIRECTION, 0.0, None)
    color = hits.albedo * shading[:, None]
    color[~hits.hit] = SKY_COLOR
    color = color * spec.brightness * _color_gains(spec)
    if spec.pixel_noise > 0:
        color = color + _rng(spec, index, PIXEL_STREAM).normal(0.0, spec.pixel_noise, size=color.shape)
    image = np.clip(color, 0.0, 1.0).reshape(K.height, K.width, 3).transpose(2, 0, 1)
    return np.ascontiguousarray(image, dtype=np.float32), hits.labels.reshape(K.height, K.width)


def lidar_directions(spec: SceneSpec) -> np.ndarray:
    """
    Unit beam directions: lidar_lines elevations times a fixed azimuth sweep
    over the camera's horizontal field of view, both at bin midpoints.
    """
    lo, hi = np.radians(LIDAR_ELEVATION_DEG)
    elevation = lo + (np.arange(spec.lidar_lines) + 0.5) * (hi - lo) / spec.lidar_lines
    half_fov = np.arctan((spec.width / 2.0) / spec.focal)
    azimuth = -half_fov + (np.arange(LIDAR_AZIMUTH_STEPS) + 0.5) * (2 * half_fov) / LIDAR_AZIMUTH_STEPS
    e, a = np.meshgrid(elevation, azimuth, indexing='ij')
    return np.stack([np.cos(e) * np.sin(a), -np.sin(e), np.cos(e) * np.cos(a)], axis=-1).reshape(-1, 3)


def scan(scene: Scene, spec: SceneSpec, index: int = 0) -> PointCloud:
    """
    Simulated LiDAR returns with Gaussian range noise, restricted to points
    that project inside the image.
    """
    directions = lidar_directions(spec)
    hits = scene.cast(directions, MAX_RANGE)
    t = hits.t[hits.hit]
    if spec.range_noise > 0:
        t = t + _rng(spec, index, LIDAR_STREAM).normal(0.0, spec.range_noise, size=t.shape)
    positions = (directions[hits.hit] * t[:, None]).astype(np.float32)
    labels = hits.labels[hits.hit].astype(np.int32)
    keep = positions[:, 2] > 0
    positions, labels = positions[keep], labels[keep]
    _, in_view = project(positions, spec.intrinsics)
    return PointCloud(positions[in_view], labels=labels[in_view])


def generate_sample(spec: SceneSpec, index: int) -> Sample:
    """
    One sample; point colours are the rendered pixels the points project to.
    """
    scene = build_scene(spec, index)
    image, _ = render(scene, spec, index)
    cloud = scan(scene, spec, index)
    colors, _ = sample_colors(image, cloud, spec.intrinsics)
    cloud = PointCloud(cloud.positions, colors, cloud.labels)
    logger.debug("[Forge] Sample %s: %s objects, %s points", index, len(scene.objects), len(cloud))
    return Sample(image, cloud, spec.intrinsics, spec.domain)


def generate(spec: SceneSpec, n: int, workers: int = 1, progress: bool = False) -> Dataset:
    """
    Generate n samples. Samples are independent, so they may be built on
    worker threads; the result does not depend on the worker count.
    """
    if n < 1:
        raise ConfigError(f'Sample count must be >= 1, got {n}')
    logger.info("[Forge] Generating %s %s samples (seed %s, layout %s)", n, spec.domain, spec.seed, spec.layout)
    indices = range(n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(tqdm(pool.map(lambda i: generate_sample(spec, i), indices),
                                total=n, desc='generate', disable=not progress))
    else:
        samples = [generate_sample(spec, i) for i in tqdm(indices, desc='generate', disable=not progress)]
    dataset = Dataset(samples)
    logger.info("[Forge] Generated %s samples, %s points", len(dataset), dataset.num_points)
    return dataset
