"""
Late fusion of the two branches.
"""

# python
import numpy as np

# pymm2d3d
from ..autodiff import Tensor, concat, scale
from ..errors import ContractError, DimensionError
from .layers import Linear, Module


ROW_SUM_TOLERANCE = 1e-4


def _check_probabilities(name: str, p: Tensor) -> None:
    sums = p.data.astype(np.float64).sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOLERANCE)
    if bad.size:
        raise ContractError(f'fuse: row {bad[0]} of {name} sums to {sums[bad[0]]:.6f}, expected 1')


def fuse(p2d: Tensor, p3d: Tensor) -> Tensor:
    """
    Mean of the two softmax outputs; rows stay probability vectors.
    """
    if p2d.shape != p3d.shape or p2d.ndim != 2:
        raise DimensionError(f'fuse: shapes {p2d.shape} and {p3d.shape} differ')
    _check_probabilities('p2d', p2d)
    _check_probabilities('p3d', p3d)
    return scale(p2d + p3d, 0.5)


class FusionHead(Module):
    """
    One linear classifier over the concatenated per-point features of both
    decoders.
    """

    def __init__(self, rng: np.random.Generator, width_2d: int, width_3d: int, num_classes: int) -> None:
        self.width_2d = width_2d
        self.width_3d = width_3d
        self.classifier = Linear(rng, width_2d + width_3d, num_classes)

    def __call__(self, f2d: Tensor, f3d: Tensor) -> Tensor:
        if f2d.ndim != 2 or f3d.ndim != 2 or f2d.shape[0] != f3d.shape[0]:
            raise DimensionError(f'FusionHead: features {f2d.shape} and {f3d.shape} are not row-aligned')
        if f2d.shape[1] != self.width_2d or f3d.shape[1] != self.width_3d:
            raise DimensionError(
                f'FusionHead: expects widths ({self.width_2d}, {self.width_3d}), got ({f2d.shape[1]}, {f3d.shape[1]})')
        return self.classifier(concat([f2d, f3d], axis=1))
