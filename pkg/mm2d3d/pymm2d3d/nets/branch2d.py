"""
2D branch: dual-stream (RGB + sparse depth) encoder U-Net with point-wise heads.
"""

# python
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

# pymm2d3d
from ..autodiff import Tensor, concat, relu, reshape
from ..errors import DimensionError
from ..geometry import Intrinsics, gather_point_features
from ..sparse import SparseTensor
from .layers import Conv2d, ConvTranspose2d, Linear, Module


DEFAULT_WIDTHS_2D = (16, 32, 64, 128)
DEPTH_SCALE = 20.0


@dataclass
class BranchOutput():
    """
    Per-point logits of one branch.

    inputs is the tensor the branch consumed (the image for 2D, the voxel
    input features for 3D); voxels is the voxelized input of the 3D branch.
    """
    main_logits: Tensor
    aux_logits: Tensor
    features: Tensor
    inputs: Optional[Tensor] = None
    voxels: Optional[SparseTensor] = None

    @property
    def num_points(self) -> int:
        return self.main_logits.shape[0]


class Encoder(Module):
    """
    One stream: per scale a stride-2 conv then a stride-1 conv, each with ReLU.
    Produces features at 1/2, 1/4, 1/8 and 1/16 of the input resolution.
    """

    def __init__(self, rng, in_channels: int, widths: Sequence[int]) -> None:
        self.down = []
        self.conv = []
        channels = in_channels
        for width in widths:
            self.down.append(Conv2d(rng, channels, width, stride=2))
            self.conv.append(Conv2d(rng, width, width))
            channels = width

    def __call__(self, x: Tensor) -> List[Tensor]:
        scales = []
        for down, conv in zip(self.down, self.conv):
            x = relu(conv(relu(down(x))))
            scales.append(x)
        return scales


class Branch2D(Module):
    """
    RGB and depth encoders, a decoder that upsamples back to full resolution
    with concatenated skips from both streams, and main/aux linear heads over
    the decoder features gathered at the projected points.
    """

    def __init__(self,
                 rng: np.random.Generator,
                 num_classes: int,
                 widths: Sequence[int] = DEFAULT_WIDTHS_2D,
                 depth_input: str = 'sparse',
                 depth_scale: float = DEPTH_SCALE) -> None:
        self.widths = tuple(widths)
        self.depth_input = depth_input
        self.depth_scale = depth_scale
        self.rgb_encoder = Encoder(rng, 3, self.widths)
        self.depth_encoder = Encoder(rng, 1, self.widths)

        self.up = []
        self.fuse = []
        channels = 2 * self.widths[-1]
        for level in reversed(range(len(self.widths) - 1)):
            width = self.widths[level]
            self.up.append(ConvTranspose2d(rng, channels, width))
            self.fuse.append(Conv2d(rng, 3 * width, width))
            channels = width
        self.final_up = ConvTranspose2d(rng, channels, self.widths[0])
        self.final_conv = Conv2d(rng, self.widths[0], self.widths[0])
        self.main_head = Linear(rng, self.widths[0], num_classes)
        self.aux_head = Linear(rng, self.widths[0], num_classes)

    @property
    def feature_width(self) -> int:
        return self.widths[0]

    def normalize_depth(self, sparse_depth: np.ndarray) -> np.ndarray:
        """
        z / depth_scale; the 0 "no measurement" sentinel stays 0.
        Returns zeros when the depth stream is ablated.
        """
        if self.depth_input == 'zeros':
            return np.zeros_like(sparse_depth)
        return sparse_depth / self.depth_scale

    def dense_features(self, image: Tensor, sparse_depth: np.ndarray) -> Tensor:
        """
        Full-resolution decoder features [C,H,W].
        """
        _, height, width = image.shape
        if sparse_depth.shape != (1, height, width):
            raise DimensionError(f'Branch2D: depth {sparse_depth.shape} does not match image {image.shape}')
        scale = 2 ** len(self.widths)
        if height % scale or width % scale:
            raise DimensionError(f'Branch2D: image size {width}x{height} must be divisible by {scale}')

        rgb = self.rgb_encoder(reshape(image, (1, 3, height, width)))
        depth = self.depth_encoder(Tensor(self.normalize_depth(sparse_depth).reshape(1, 1, height, width)))

        x = concat([rgb[-1], depth[-1]], axis=1)
        for i, level in enumerate(reversed(range(len(self.widths) - 1))):
            x = relu(self.up[i](x))
            x = relu(self.fuse[i](concat([x, rgb[level], depth[level]], axis=1)))
        x = relu(self.final_conv(relu(self.final_up(x))))
        return reshape(x, x.shape[1:])

    def __call__(self,
                 image,
                 sparse_depth: np.ndarray,
                 points,
                 K: Intrinsics) -> BranchOutput:
        """
        Args:
            image: [3,H,W] array or Tensor (pass a Tensor requiring grad to
                measure input gradients)
            sparse_depth: [1,H,W] metres from make_sparse_depth
            points: the cloud whose per-point logits are produced
        """
        if not isinstance(image, Tensor):
            image = Tensor(image)
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError(f'Branch2D: image must be [3,H,W], got {image.shape}')
        if image.shape[1:] != (K.height, K.width):
            raise DimensionError(f'Branch2D: image {image.shape} does not match intrinsics {K.width}x{K.height}')
        dense = self.dense_features(image, np.asarray(sparse_depth, dtype=np.float64))
        features = gather_point_features(dense, points, K)
        return BranchOutput(self.main_head(features), self.aux_head(features), features, inputs=image)
