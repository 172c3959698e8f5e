from .layers import (
    Module,
    Linear,
    Conv2d,
    ConvTranspose2d,
    SparseConv,
    SparseDown,
    SparseUp,
)
from .branch2d import Branch2D, BranchOutput
from .branch3d import Branch3D
from .heads import FusionHead, fuse
from .model import MM2D3D, ModelConfig, ModelOutput, Prediction
from .checkpoint import load_checkpoint, save_checkpoint
