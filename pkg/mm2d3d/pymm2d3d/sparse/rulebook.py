"""
Rulebooks: per kernel offset, the (input row, output row) pairs a sparse
convolution gathers from and scatters to.
"""

# python
import itertools
import logging
from typing import List, Optional, Tuple

import numpy as np

# pymm2d3d
from ..errors import UsageError
from .voxel import SparseTensor, pack_coords, unpack_keys


logger = logging.getLogger('pymm2d3d.sparse')


def kernel_offsets(extent: int, centred: bool = True) -> np.ndarray:
    """
    Offsets of a cubic kernel in (dx, dy, dz) lexicographic order.
    A centred kernel of extent 3 spans -1..1; an uncentred one of extent 2 spans 0..1.
    """
    if centred:
        half = extent // 2
        axis = range(-half, half + 1)
    else:
        axis = range(extent)
    return np.array(list(itertools.product(axis, axis, axis)), dtype=np.int64)


class Rulebook():
    """
    Gather-scatter pairs for every kernel offset.

    Within one offset every output row and every input row appears at most
    once, so the per-offset scatter never writes a row twice.
    """

    def __init__(self,
                 offsets: np.ndarray,
                 pairs: List[Tuple[np.ndarray, np.ndarray]],
                 num_inputs: int,
                 num_outputs: int,
                 stride: int,
                 submanifold: bool) -> None:
        self.offsets = offsets
        self.pairs = pairs
        self.num_inputs = num_inputs
        self.num_outputs = num_outputs
        self.stride = stride
        self.submanifold = submanifold
        # output skeleton, set by build_rulebook
        self.output: Optional[SparseTensor] = None

    @property
    def kernel_volume(self) -> int:
        """
        Number of kernel offsets, the leading dimension of the weights.
        """
        return len(self.offsets)

    @property
    def num_pairs(self) -> int:
        return sum(len(inp) for inp, _ in self.pairs)

    def offset_index(self, offset) -> int:
        hits = np.flatnonzero((self.offsets == np.asarray(offset)).all(axis=1))
        if hits.size == 0:
            raise UsageError(f'Offset {tuple(offset)} is not part of this kernel')
        return int(hits[0])

    def pairs_for(self, offset) -> Tuple[np.ndarray, np.ndarray]:
        return self.pairs[self.offset_index(offset)]

    def __repr__(self) -> str:
        return (f'<Rulebook offsets={self.kernel_volume} pairs={self.num_pairs} '
                f'in={self.num_inputs} out={self.num_outputs} stride={self.stride}>')


def _with_offset(coords: np.ndarray, offset: np.ndarray) -> np.ndarray:
    shifted = coords.copy()
    shifted[:, 1:] += offset
    return shifted


def build_rulebook(sparse: SparseTensor,
                   kernel_extent: Optional[int] = None,
                   stride: int = 1,
                   submanifold: bool = True) -> Tuple[Rulebook, SparseTensor]:
    """
    Build the rulebook and the output skeleton of one sparse convolution.

    Modes:
        - stride 1, submanifold: output coords are the input coords, pair
          (i -> o) at offset d iff coord(o) + d == coord(i)
        - stride 1, not submanifold: every voxel within reach of an input
          becomes active (output o receives input o + d)
        - stride 2: 2x2x2 kernel, output coords are the unique floor(coord / 2),
          each input feeds its pooled output at offset coord - 2 * floor(coord / 2).
          The output skeleton retains the input skeleton and this rulebook for
          sparse_upsample.
    Args:
        kernel_extent: 3 (default) for stride 1, 2 (default) for stride 2
    Return:
        (rulebook, output skeleton without features)
    """
    coords = sparse.coords
    if stride == 1:
        extent = 3 if kernel_extent is None else kernel_extent
        if extent < 1 or extent % 2 == 0:
            raise UsageError(f'Stride-1 sparse convolution needs an odd kernel extent, got {extent}')
        offsets = kernel_offsets(extent)
        if submanifold:
            rulebook, out = _submanifold(sparse, offsets)
        else:
            rulebook, out = _dilating(sparse, offsets)
    elif stride == 2:
        extent = 2 if kernel_extent is None else kernel_extent
        if extent != 2:
            raise UsageError(f'Stride-2 sparse convolution uses a 2x2x2 kernel, got extent {extent}')
        rulebook, out = _strided(sparse)
    else:
        raise UsageError(f'Unsupported sparse convolution stride {stride}, use 1 or 2')

    rulebook.output = out
    logger.debug("[Sparse] Rulebook stride=%s submanifold=%s: %s active -> %s active, %s pairs",
                 stride, submanifold, coords.shape[0], out.num_active, rulebook.num_pairs)
    return rulebook, out


def _submanifold(sparse: SparseTensor, offsets: np.ndarray) -> Tuple[Rulebook, SparseTensor]:
    coords = sparse.coords
    out_rows = np.arange(coords.shape[0], dtype=np.int64)
    pairs = []
    for offset in offsets:
        in_rows = sparse.rows_of(_with_offset(coords, offset))
        found = in_rows >= 0
        pairs.append((in_rows[found], out_rows[found]))
    rulebook = Rulebook(offsets, pairs, coords.shape[0], coords.shape[0], 1, True)
    return rulebook, sparse.skeleton()


def _dilating(sparse: SparseTensor, offsets: np.ndarray) -> Tuple[Rulebook, SparseTensor]:
    coords = sparse.coords
    reached = np.concatenate([_with_offset(coords, -offset) for offset in offsets])
    out = SparseTensor(unpack_keys(np.unique(pack_coords(reached))),
                       tensor_stride=sparse.tensor_stride)
    in_rows = np.arange(coords.shape[0], dtype=np.int64)
    pairs = []
    for offset in offsets:
        pairs.append((in_rows, out.rows_of(_with_offset(coords, -offset))))
    rulebook = Rulebook(offsets, pairs, coords.shape[0], out.num_active, 1, False)
    return rulebook, out


def _strided(sparse: SparseTensor) -> Tuple[Rulebook, SparseTensor]:
    coords = sparse.coords
    pooled = coords.copy()
    pooled[:, 1:] = np.floor_divide(coords[:, 1:], 2)
    out = SparseTensor(unpack_keys(np.unique(pack_coords(pooled))),
                       tensor_stride=sparse.tensor_stride * 2)
    targets = out.rows_of(pooled)
    local = coords[:, 1:] - 2 * pooled[:, 1:]
    local_index = local[:, 0] * 4 + local[:, 1] * 2 + local[:, 2]
    offsets = kernel_offsets(2, centred=False)
    pairs = []
    for k in range(len(offsets)):
        members = np.flatnonzero(local_index == k)
        pairs.append((members, targets[members]))
    rulebook = Rulebook(offsets, pairs, coords.shape[0], out.num_active, 2, False)
    out.finer = sparse.skeleton()
    out.down_rulebook = rulebook
    return rulebook, out
