from .voxel import (
    SparseTensor,
    VoxelHashIndex,
    pack_coords,
    unpack_keys,
    voxelize,
    COORD_LIMIT,
)
from .rulebook import Rulebook, build_rulebook, kernel_offsets
from .conv import sparse_conv, sparse_upsample, submanifold_conv, strided_conv
