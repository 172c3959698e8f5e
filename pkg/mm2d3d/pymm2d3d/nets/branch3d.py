"""
3D branch: colour-gated voxel inputs and a three-level sparse U-Net.
"""

# python
import logging
from typing import Optional, Sequence

import numpy as np

# pymm2d3d
from ..autodiff import Tensor, broadcast_to, concat, index_rows, mul, sigmoid
from ..errors import DimensionError
from ..sparse import SparseTensor, build_rulebook, voxelize
from .branch2d import BranchOutput
from .layers import Linear, Module, SparseConv, SparseDown, SparseUp


logger = logging.getLogger('pymm2d3d.nets')


DEFAULT_WIDTHS_3D = (16, 32, 64)
VOXEL_SIZE = 0.2


class Branch3D(Module):
    """
    Per point alpha = sigmoid(w . rgb + b); the voxel input feature is
    alpha * rgb of the point that won the voxel. With rgb_3d disabled every
    voxel gets the constant 1 instead.

    Logits are computed per voxel and read back per point, so points that
    share a voxel share their logit rows.
    """

    def __init__(self,
                 rng: np.random.Generator,
                 num_classes: int,
                 widths: Sequence[int] = DEFAULT_WIDTHS_3D,
                 voxel_size: float = VOXEL_SIZE,
                 rgb_3d: bool = True) -> None:
        self.widths = tuple(widths)
        self.voxel_size = voxel_size
        self.rgb_3d = rgb_3d
        self.alpha = Linear(rng, 3, 1) if rgb_3d else None

        self.stem = SparseConv(rng, 3 if rgb_3d else 1, self.widths[0])
        self.enc = [SparseConv(rng, self.widths[0], self.widths[0])]
        self.down = []
        for level in range(1, len(self.widths)):
            self.down.append(SparseDown(rng, self.widths[level - 1], self.widths[level]))
            self.enc.append(SparseConv(rng, self.widths[level], self.widths[level]))

        self.up = []
        self.dec = []
        for level in reversed(range(len(self.widths) - 1)):
            self.up.append(SparseUp(rng, self.widths[level + 1], self.widths[level]))
            self.dec.append(SparseConv(rng, 2 * self.widths[level], self.widths[level]))

        self.main_head = Linear(rng, self.widths[0], num_classes)
        self.aux_head = Linear(rng, self.widths[0], num_classes)

    @property
    def feature_width(self) -> int:
        return self.widths[0]

    def gate(self, colors: Tensor) -> Tensor:
        """
        alpha per point, [N,1] strictly inside (0, 1).
        """
        return sigmoid(self.alpha(colors))

    def voxel_inputs(self,
                     positions: np.ndarray,
                     colors: Optional[np.ndarray],
                     track_inputs: bool = False) -> SparseTensor:
        """
        Voxelize the points with their input features.

        Args:
            track_inputs: make the voxel features a leaf that requires grad,
                so a backward pass leaves d(output)/d(input) in its .grad
        """
        if self.rgb_3d:
            if colors is None:
                raise DimensionError('Branch3D: the colour-gated input needs per-point colours')
            colors = np.asarray(colors)
            if colors.shape != positions.shape:
                raise DimensionError(
                    f'Branch3D: {colors.shape[0]} colours for {positions.shape[0]} points')
            rgb = Tensor(colors)
            gated = mul(broadcast_to(self.gate(rgb), rgb.shape), rgb)
            voxels = voxelize(positions, self.voxel_size, point_features=gated)
        else:
            voxels = voxelize(positions, self.voxel_size)
        if track_inputs:
            voxels = voxels.with_features(Tensor(voxels.features.data, requires_grad=True))
        return voxels

    def unet(self, voxels: SparseTensor) -> SparseTensor:
        rulebook, _ = build_rulebook(voxels)
        x = self.enc[0](self.stem(voxels, rulebook), rulebook)
        skips = [x]
        for down, conv in zip(self.down, self.enc[1:]):
            x = down(x)
            x = conv(x)
            skips.append(x)
        for i, level in enumerate(reversed(range(len(self.widths) - 1))):
            x = self.up[i](x)
            x = x.with_features(concat([x.features, skips[level].features], axis=1))
            x = self.dec[i](x)
        return x

    def __call__(self, points, colors=None, track_inputs: bool = False) -> BranchOutput:
        """
        Args:
            points: PointCloud or [N,3] positions
            colors: [N,3] per-point colours, defaults to the cloud's own
        """
        positions = np.asarray(getattr(points, 'positions', points), dtype=np.float64)
        if colors is None:
            colors = getattr(points, 'colors', None)
        voxels = self.voxel_inputs(positions, colors, track_inputs)
        decoded = self.unet(voxels)
        logger.debug("[Nets] 3D forward over %s points in %s voxels", positions.shape[0], voxels.num_active)

        features = index_rows(decoded.features, voxels.point_to_voxel)
        return BranchOutput(self.main_head(features), self.aux_head(features), features,
                            inputs=voxels.features, voxels=voxels)
