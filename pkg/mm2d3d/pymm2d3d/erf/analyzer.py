"""
Effective receptive fields of the two branches at one anchor point.

The ERF of a branch is the magnitude of the gradient of the anchor's
predicted-class main logit with respect to the branch input: the voxel
input features for the 3D branch, the RGB image for the 2D branch. Both
masses are carried onto the points so they can be compared in metres.
"""

# python
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from tqdm import tqdm

# pymm2d3d
from ..autodiff import Tensor, index_rows, is_grad_enabled, pick, sum as tsum
from ..errors import DomainError, UsageError
from ..forge import Dataset, Sample
from ..forge.scene import GROUND
from ..geometry import pixel_indices, project
from ..nets import MM2D3D


logger = logging.getLogger('pymm2d3d.erf')


DEFAULT_RADII = (0.5, 1.0, 2.0, 4.0, 8.0)
COMPLEMENTARITY_RADIUS = 2.0
BRANCHES = ('2d', '3d')


def _normalized(mass: np.ndarray) -> np.ndarray:
    total = mass.sum()
    return mass / total if total > 0 else np.zeros_like(mass)


@dataclass
class ErfResult():
    """
    Normalized ERF masses of one anchor.

    Args:
        mass_3d: [N] 3D-branch mass per input point (a voxel's mass sits on
            the point that won the voxel)
        mass_2d: [H,W] 2D-branch mass per pixel
        mass_2d_points: [N] the pixel mass moved to the nearest projected point
    """
    anchor: int
    positions: np.ndarray
    mass_3d: np.ndarray
    mass_2d: np.ndarray
    mass_2d_points: np.ndarray
    predicted_2d: int
    predicted_3d: int
    radii: Tuple[float, ...] = DEFAULT_RADII
    distances: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.distances = np.linalg.norm(self.positions - self.positions[self.anchor], axis=1)

    @property
    def anchor_position(self) -> np.ndarray:
        return self.positions[self.anchor]

    @property
    def diameter(self) -> float:
        """
        Largest anchor distance, the radius at which both curves reach 1.
        """
        return float(self.distances.max())

    def point_mass(self, branch: str) -> np.ndarray:
        if branch not in BRANCHES:
            raise UsageError(f'Unknown branch <{branch}>, use one of {BRANCHES}')
        return self.mass_2d_points if branch == '2d' else self.mass_3d

    def locality(self, branch: str, radius: float) -> float:
        """
        Fraction of the branch's mass within radius metres of the anchor.
        """
        mass = self.point_mass(branch)
        total = mass.sum()
        if total <= 0:
            return 0.0
        return float(mass[self.distances <= radius].sum() / total)

    def curve(self, branch: str) -> List[Tuple[float, float]]:
        radii = sorted(set(self.radii) | {self.diameter})
        return [(r, self.locality(branch, r)) for r in radii]


def _seed_backward(logits: Tensor, index: int) -> int:
    """
    Backward from the anchor's predicted-class logit; returns that class.
    """
    row = index_rows(logits, np.array([index]))
    predicted = int(np.argmax(row.data[0]))
    tsum(pick(row, np.array([predicted]))).backward()
    return predicted


def _grad_mass(x: Tensor, axis: int) -> np.ndarray:
    """
    L1 norm of the input gradient over the channel axis.
    """
    if x.grad is None:
        return np.zeros(np.delete(x.shape, axis), dtype=np.float64)
    return np.abs(x.grad).sum(axis=axis).astype(np.float64)


def reproject_pixels(mass_2d: np.ndarray, cloud, K) -> np.ndarray:
    """
    Move every pixel's mass to the point whose projection lies nearest to the
    pixel centre. Points outside the image receive nothing.
    """
    uv, mask = project(cloud, K)
    out = np.zeros(len(uv), dtype=np.float64)
    inside = np.flatnonzero(mask)
    if inside.size == 0:
        return out
    rows, cols = np.nonzero(mass_2d > 0)
    if rows.size == 0:
        return out
    _, nearest = cKDTree(uv[inside]).query(np.stack([cols, rows], axis=1).astype(np.float64))
    np.add.at(out, inside[nearest], mass_2d[rows, cols])
    return out


def compute_erf(model: MM2D3D,
                sample: Sample,
                point_index: int,
                radii: Sequence[float] = DEFAULT_RADII) -> ErfResult:
    """
    ERF of both branches at one point of a sample.

    Args:
        point_index: anchor row in sample.cloud; it must project into the image
    Return:
        ErfResult with normalized masses
    """
    if not is_grad_enabled():
        raise UsageError('compute_erf needs gradients, it cannot run under no_grad')
    num_points = sample.num_points
    if not 0 <= point_index < num_points:
        raise UsageError(f'Anchor {point_index} is out of range for {num_points} points')
    _, _, mask = pixel_indices(sample.cloud, sample.K)
    if not mask[point_index]:
        raise DomainError(f'Anchor {point_index} projects outside the {sample.K.width}x{sample.K.height} image')

    model.zero_grad()
    out_3d = model.forward_3d(sample.cloud, track_inputs=True)
    predicted_3d = _seed_backward(out_3d.main_logits, point_index)
    voxel_mass = _grad_mass(out_3d.inputs, axis=1)
    mass_3d = np.zeros(num_points, dtype=np.float64)
    mass_3d[out_3d.voxels.winners] = voxel_mass

    image = Tensor(sample.image, requires_grad=True)
    out_2d = model.forward_2d(image, sample.cloud, sample.K)
    predicted_2d = _seed_backward(out_2d.main_logits, point_index)
    mass_2d = _normalized(_grad_mass(image, axis=0))
    model.zero_grad()

    result = ErfResult(
        anchor=point_index,
        positions=np.asarray(sample.cloud.positions, dtype=np.float64),
        mass_3d=_normalized(mass_3d),
        mass_2d=mass_2d,
        mass_2d_points=reproject_pixels(mass_2d, sample.cloud, sample.K),
        predicted_2d=predicted_2d,
        predicted_3d=predicted_3d,
        radii=tuple(radii),
    )
    logger.debug("[Erf] Anchor %s: locality at %.1f m 2D %.3f, 3D %.3f", point_index,
                 COMPLEMENTARITY_RADIUS, result.locality('2d', COMPLEMENTARITY_RADIUS),
                 result.locality('3d', COMPLEMENTARITY_RADIUS))
    return result


@dataclass
class ComplementarityReport():
    """
    Locality fractions at one radius over many anchors.
    """
    radius: float
    anchors: List[Tuple[int, int]] = field(default_factory=list)
    fractions_2d: List[float] = field(default_factory=list)
    fractions_3d: List[float] = field(default_factory=list)

    @property
    def median_2d(self) -> float:
        return float(np.median(self.fractions_2d))

    @property
    def median_3d(self) -> float:
        return float(np.median(self.fractions_3d))

    @property
    def majority(self) -> float:
        """
        Share of anchors whose 3D ERF is more local than their 2D ERF.
        """
        return float(np.mean(np.array(self.fractions_3d) > np.array(self.fractions_2d)))

    @property
    def holds(self) -> bool:
        return self.median_3d > self.median_2d

    def to_dict(self) -> dict:
        return {
            'radius': self.radius,
            'anchors': [list(a) for a in self.anchors],
            'locality_2d': self.fractions_2d,
            'locality_3d': self.fractions_3d,
            'median_2d': self.median_2d,
            'median_3d': self.median_3d,
            'majority': self.majority,
        }


def pick_anchors(dataset: Dataset, count: int, seed: int = 0,
                 foreground: bool = True) -> List[Tuple[int, int]]:
    """
    (sample, point) pairs drawn without replacement among the points that
    project into their image; foreground skips ground points of labeled clouds.
    """
    candidates = []
    for s, sample in enumerate(dataset):
        _, _, mask = pixel_indices(sample.cloud, sample.K)
        if foreground and sample.cloud.labels is not None:
            mask &= sample.cloud.labels != GROUND
        candidates.extend((s, int(p)) for p in np.flatnonzero(mask))
    if not candidates:
        raise UsageError('No anchor candidates: no point projects into its image')
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(candidates), size=min(count, len(candidates)), replace=False)
    return [candidates[i] for i in sorted(chosen)]


def complementarity(model: MM2D3D,
                    dataset: Dataset,
                    anchors: int = 20,
                    radius: float = COMPLEMENTARITY_RADIUS,
                    seed: int = 0,
                    progress: bool = False) -> ComplementarityReport:
    """
    Compare how local the two branches' ERFs are over anchors drawn from
    the dataset's foreground points.
    """
    if anchors < 1:
        raise UsageError(f'anchors must be >= 1, got {anchors}')
    report = ComplementarityReport(radius)
    for s, p in tqdm(pick_anchors(dataset, anchors, seed), disable=not progress, desc='erf', unit='anchor'):
        result = compute_erf(model, dataset[s], p)
        report.anchors.append((s, p))
        report.fractions_2d.append(result.locality('2d', radius))
        report.fractions_3d.append(result.locality('3d', radius))
    logger.info("[Erf] %s anchors: median locality at %.1f m 2D %.3f, 3D %.3f",
                len(report.anchors), radius, report.median_2d, report.median_3d)
    return report
