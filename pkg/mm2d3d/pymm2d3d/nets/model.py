"""
The two-branch segmentation model.
"""

# python
import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Tuple

import numpy as np

# pymm2d3d
from ..autodiff import Tensor, no_grad, softmax
from ..errors import ConfigError
from ..forge import CLASS_NAMES, Sample
from ..geometry import Intrinsics, PointCloud, make_sparse_depth
from .branch2d import DEFAULT_WIDTHS_2D, DEPTH_SCALE, Branch2D, BranchOutput
from .branch3d import DEFAULT_WIDTHS_3D, VOXEL_SIZE, Branch3D
from .heads import FusionHead, fuse
from .layers import Module


logger = logging.getLogger('pymm2d3d.nets')


DEPTH_INPUTS = ('sparse', 'zeros')


@dataclass(frozen=True)
class ModelConfig():
    """
    Architecture and ablation switches:
        depth_input: 'zeros' feeds the depth encoder nothing (RGB-only 2D branch)
        rgb_3d: False gives every voxel the constant feature 1
        fusion_head: add a classifier over the concatenated branch features
    """
    num_classes: int = len(CLASS_NAMES)
    widths_2d: Tuple[int, ...] = DEFAULT_WIDTHS_2D
    widths_3d: Tuple[int, ...] = DEFAULT_WIDTHS_3D
    voxel_size: float = VOXEL_SIZE
    depth_input: str = 'sparse'
    depth_scale: float = DEPTH_SCALE
    rgb_3d: bool = True
    fusion_head: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        errors = []
        if self.num_classes < 2:
            errors.append(f'num_classes must be >= 2, got {self.num_classes}')
        if len(self.widths_2d) < 1 or min(self.widths_2d) < 1:
            errors.append(f'widths_2d must be positive, got {self.widths_2d}')
        if len(self.widths_3d) < 1 or min(self.widths_3d) < 1:
            errors.append(f'widths_3d must be positive, got {self.widths_3d}')
        if self.voxel_size <= 0:
            errors.append(f'voxel_size must be > 0, got {self.voxel_size}')
        if self.depth_input not in DEPTH_INPUTS:
            errors.append(f'depth_input must be one of {DEPTH_INPUTS}, got {self.depth_input}')
        if self.depth_scale <= 0:
            errors.append(f'depth_scale must be > 0, got {self.depth_scale}')
        if errors:
            raise ConfigError('Invalid model config: ' + '; '.join(errors))

    @classmethod
    def from_dict(cls, values: Optional[dict]) -> 'ModelConfig':
        values = dict(values or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f'Unknown model keys: {unknown}')
        for name in ('widths_2d', 'widths_3d'):
            if name in values:
                values[name] = tuple(int(w) for w in values[name])
        try:
            return replace(cls(), **values)
        except TypeError as exc:
            raise ConfigError(f'Invalid model config: {exc}') from exc

    def to_dict(self) -> dict:
        values = asdict(self)
        values['widths_2d'] = list(self.widths_2d)
        values['widths_3d'] = list(self.widths_3d)
        return values


@dataclass
class ModelOutput():
    out_2d: BranchOutput
    out_3d: BranchOutput
    fusion_logits: Optional[Tensor] = None


@dataclass
class Prediction():
    """
    Softmax outputs of one sample as arrays [N,C], plus the late-fused mean
    and, when the model has one, the fusion head's output.
    """
    probs_2d: np.ndarray
    probs_3d: np.ndarray
    probs_avg: np.ndarray
    probs_fusion: Optional[np.ndarray] = None

    @property
    def labels_2d(self) -> np.ndarray:
        return self.probs_2d.argmax(axis=1)

    @property
    def labels_3d(self) -> np.ndarray:
        return self.probs_3d.argmax(axis=1)

    @property
    def labels_avg(self) -> np.ndarray:
        return self.probs_avg.argmax(axis=1)

    @property
    def labels_fusion(self) -> Optional[np.ndarray]:
        return None if self.probs_fusion is None else self.probs_fusion.argmax(axis=1)


class MM2D3D(Module):
    """
    2D and 3D branches with main and auxiliary heads, and the optional fusion
    head. Parameters are initialised from config.seed.
    """

    def __init__(self, config: ModelConfig = None) -> None:
        self.config = config or ModelConfig()
        rng = np.random.default_rng(self.config.seed)
        self.branch_2d = Branch2D(rng, self.config.num_classes, self.config.widths_2d,
                                  depth_input=self.config.depth_input,
                                  depth_scale=self.config.depth_scale)
        self.branch_3d = Branch3D(rng, self.config.num_classes, self.config.widths_3d,
                                  voxel_size=self.config.voxel_size,
                                  rgb_3d=self.config.rgb_3d)
        self.fusion = None
        if self.config.fusion_head:
            self.fusion = FusionHead(rng, self.branch_2d.feature_width,
                                     self.branch_3d.feature_width, self.config.num_classes)
        logger.debug("[Nets] Built model with %s parameters", self.num_parameters)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def forward_2d(self, image, cloud: PointCloud, K: Intrinsics) -> BranchOutput:
        """
        The sparse depth map is rendered from the same points the logits are
        read at.
        """
        return self.branch_2d(image, make_sparse_depth(cloud, K), cloud, K)

    def forward_3d(self, cloud: PointCloud, track_inputs: bool = False) -> BranchOutput:
        return self.branch_3d(cloud, cloud.colors, track_inputs=track_inputs)

    def __call__(self,
                 sample: Sample,
                 image_2d=None,
                 cloud_2d: Optional[PointCloud] = None,
                 cloud_3d: Optional[PointCloud] = None) -> ModelOutput:
        """
        Both branches on one sample. Each branch may get its own augmented
        view; rows of all outputs follow the sample's point order.
        """
        image_2d = sample.image if image_2d is None else image_2d
        out_2d = self.forward_2d(image_2d, sample.cloud if cloud_2d is None else cloud_2d, sample.K)
        out_3d = self.forward_3d(sample.cloud if cloud_3d is None else cloud_3d)
        fusion_logits = None
        if self.fusion is not None:
            fusion_logits = self.fusion(out_2d.features, out_3d.features)
        return ModelOutput(out_2d, out_3d, fusion_logits)

    def predict(self, sample: Sample) -> Prediction:
        with no_grad():
            output = self(sample)
            p2d = softmax(output.out_2d.main_logits, axis=1)
            p3d = softmax(output.out_3d.main_logits, axis=1)
            avg = fuse(p2d, p3d)
            fusion = None
            if output.fusion_logits is not None:
                fusion = softmax(output.fusion_logits, axis=1).data.copy()
        return Prediction(p2d.data.copy(), p3d.data.copy(), avg.data.copy(), fusion)
