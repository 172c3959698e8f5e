"""
Voxel coordinates, the open-addressing hash index and SparseTensor.

Coordinates are rows (batch, x, y, z) packed into one 64-bit key with
16-bit fields, so the lexicographic order of coordinates equals the
numeric order of keys.
"""

# python
import logging
from typing import Optional

import numpy as np

# pymm2d3d
from ..autodiff import Tensor, index_rows
from ..errors import ConsistencyError, DimensionError, DomainError


logger = logging.getLogger('pymm2d3d.sparse')


FIELD_BITS = 16
COORD_OFFSET = 32768
COORD_LIMIT = 32767
# batch 0xFFFF together with x=y=z=32767 would collide with the empty marker
MAX_BATCH = 65534

EMPTY_KEY = np.uint64(0xFFFFFFFFFFFFFFFF)
_HASH_MULTIPLIER = np.uint64(0x9E3779B97F4A7C15)
_MIN_CAPACITY = 8


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """
    Pack integer coords [N,4] (batch, x, y, z) into uint64 keys.

    Raise DomainError for x, y, z outside +-32767 or a batch outside [0, 65534].
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 4:
        raise DimensionError(f'Voxel coords must be [N,4] (batch,x,y,z), got {coords.shape}')
    if coords.size:
        xyz = coords[:, 1:]
        if np.abs(xyz).max() > COORD_LIMIT:
            raise DomainError(f'Voxel coordinate outside +-{COORD_LIMIT}, increase the voxel size')
        if coords[:, 0].min() < 0 or coords[:, 0].max() > MAX_BATCH:
            raise DomainError(f'Batch index outside [0, {MAX_BATCH}]')
    fields = coords.copy()
    fields[:, 1:] += COORD_OFFSET
    fields = fields.astype(np.uint64)
    keys = fields[:, 0] << np.uint64(3 * FIELD_BITS)
    keys |= fields[:, 1] << np.uint64(2 * FIELD_BITS)
    keys |= fields[:, 2] << np.uint64(FIELD_BITS)
    keys |= fields[:, 3]
    return keys


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    """
    Inverse of pack_coords.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    mask = np.uint64((1 << FIELD_BITS) - 1)
    coords = np.empty((keys.size, 4), dtype=np.int64)
    coords[:, 0] = (keys >> np.uint64(3 * FIELD_BITS)) & mask
    coords[:, 1] = ((keys >> np.uint64(2 * FIELD_BITS)) & mask).astype(np.int64) - COORD_OFFSET
    coords[:, 2] = ((keys >> np.uint64(FIELD_BITS)) & mask).astype(np.int64) - COORD_OFFSET
    coords[:, 3] = (keys & mask).astype(np.int64) - COORD_OFFSET
    return coords


class VoxelHashIndex():
    """
    Open-addressing (linear probing) map from packed voxel keys to row numbers.

    Inserts and lookups run vectorized over all keys, one probe step per round.
    Contested free slots go to the lowest key position, so the table layout is
    a pure function of the key sequence.
    """

    def __init__(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys, dtype=np.uint64)
        if np.unique(keys).size != keys.size:
            raise ConsistencyError('VoxelHashIndex: duplicate voxel keys')
        capacity = _MIN_CAPACITY
        while capacity < 2 * keys.size:
            capacity *= 2
        self._capacity = capacity
        self._mask = capacity - 1
        self._shift = np.uint64(64 - int(np.log2(capacity)))
        self._keys = np.full(capacity, EMPTY_KEY, dtype=np.uint64)
        self._rows = np.full(capacity, -1, dtype=np.int64)
        self._size = keys.size
        self._insert(keys, np.arange(keys.size, dtype=np.int64))

    def _home(self, keys: np.ndarray) -> np.ndarray:
        return ((keys * _HASH_MULTIPLIER) >> self._shift).astype(np.int64)

    def _insert(self, keys: np.ndarray, rows: np.ndarray) -> None:
        pending = np.arange(keys.size)
        home = self._home(keys)
        probe = 0
        while pending.size:
            slots = (home[pending] + probe) & self._mask
            free = self._keys[slots] == EMPTY_KEY
            candidates, candidate_slots = pending[free], slots[free]
            taken, first = np.unique(candidate_slots, return_index=True)
            placed = candidates[first]
            self._keys[taken] = keys[placed]
            self._rows[taken] = rows[placed]
            pending = np.setdiff1d(pending, placed, assume_unique=True)
            probe += 1

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """
        Return the row of every key, -1 where the key is absent.
        """
        keys = np.asarray(keys, dtype=np.uint64)
        result = np.full(keys.size, -1, dtype=np.int64)
        pending = np.arange(keys.size)
        home = self._home(keys)
        probe = 0
        while pending.size:
            slots = (home[pending] + probe) & self._mask
            stored = self._keys[slots]
            hit = stored == keys[pending]
            result[pending[hit]] = self._rows[slots[hit]]
            pending = pending[~(hit | (stored == EMPTY_KEY))]
            probe += 1
        return result

    def lookup_coords(self, coords: np.ndarray) -> np.ndarray:
        """
        lookup() for unpacked coords [N,4]. Coords outside the packable
        range cannot be active and return -1.
        """
        coords = np.asarray(coords, dtype=np.int64)
        result = np.full(coords.shape[0], -1, dtype=np.int64)
        inside = (np.abs(coords[:, 1:]) <= COORD_LIMIT).all(axis=1)
        result[inside] = self.lookup(pack_coords(coords[inside]))
        return result

    @property
    def capacity(self) -> int:
        return self._capacity

    @property
    def load_factor(self) -> float:
        return self._size / self._capacity

    def __len__(self) -> int:
        return self._size


class SparseTensor():
    """
    Active voxels with one feature row each.

    Besides coords and features the tensor may carry:
        - point_to_voxel: row of every original point (set by voxelize)
        - winners: original point index that donated each row (set by voxelize)
        - finer / down_rulebook: the finer level and the stride-2 rulebook that
          produced this level, retained for the matching upsample
    """

    def __init__(self,
                 coords: np.ndarray,
                 features: Optional[Tensor] = None,
                 index: Optional[VoxelHashIndex] = None,
                 point_to_voxel: Optional[np.ndarray] = None,
                 tensor_stride: int = 1) -> None:
        self.coords = np.ascontiguousarray(coords, dtype=np.int64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 4:
            raise DimensionError(f'SparseTensor coords must be [N,4], got {self.coords.shape}')
        self.index = index if index is not None else VoxelHashIndex(pack_coords(self.coords))
        if len(self.index) != self.coords.shape[0]:
            raise ConsistencyError('SparseTensor: index size does not match coords')
        if features is not None and (features.ndim != 2 or features.shape[0] != self.coords.shape[0]):
            raise DimensionError(
                f'SparseTensor: features {features.shape} do not match {self.coords.shape[0]} active voxels')
        self.features = features
        self.point_to_voxel = point_to_voxel
        self.winners: Optional[np.ndarray] = None
        self.tensor_stride = tensor_stride
        self.finer: Optional['SparseTensor'] = None
        self.down_rulebook = None

    @property
    def num_active(self) -> int:
        """
        Number of active voxels.
        """
        return self.coords.shape[0]

    @property
    def num_channels(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def with_features(self, features: Tensor) -> 'SparseTensor':
        """
        Same active set and bookkeeping, new feature rows.
        """
        out = SparseTensor(self.coords, features, index=self.index,
                           point_to_voxel=self.point_to_voxel,
                           tensor_stride=self.tensor_stride)
        out.winners = self.winners
        out.finer = self.finer
        out.down_rulebook = self.down_rulebook
        return out

    def skeleton(self) -> 'SparseTensor':
        """
        Coordinates only, sharing the index.
        """
        out = SparseTensor(self.coords, None, index=self.index,
                           point_to_voxel=self.point_to_voxel,
                           tensor_stride=self.tensor_stride)
        out.winners = self.winners
        out.finer = self.finer
        out.down_rulebook = self.down_rulebook
        return out

    def rows_of(self, coords: np.ndarray) -> np.ndarray:
        return self.index.lookup_coords(coords)

    def __repr__(self) -> str:
        return f'<SparseTensor active={self.num_active} channels={self.num_channels} stride={self.tensor_stride}>'


def voxelize(positions: np.ndarray,
             voxel_size: float,
             point_features: Optional[Tensor] = None,
             batch: int = 0) -> SparseTensor:
    """
    Discretize points [N,3] onto the grid coord = floor(p / voxel_size).

    One point per voxel: the point nearest its voxel centre wins, ties go to
    the lowest point index. Rows are ordered by coordinate. Every point, winner
    or not, is mapped to its voxel's row in point_to_voxel.

    Args:
        positions: [N,3] metres, or any object with a .positions array
        voxel_size: edge length in metres
        point_features: per-point Tensor [N,C]; the voxel takes its winner's
            row (differentiably). Without it every voxel gets the constant 1.
        batch: batch field of every coordinate
    Return:
        SparseTensor with point_to_voxel and winners set
    """
    positions = np.asarray(getattr(positions, 'positions', positions), dtype=np.float64)
    if voxel_size <= 0:
        raise DomainError(f'voxel_size must be > 0, got {voxel_size}')
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise DimensionError(f'voxelize: positions must be [N,3], got {positions.shape}')
    if positions.shape[0] == 0:
        raise DomainError('voxelize: empty point cloud')

    cells = np.floor(positions / voxel_size).astype(np.int64)
    coords = np.concatenate([np.full((cells.shape[0], 1), batch, dtype=np.int64), cells], axis=1)
    keys = pack_coords(coords)
    centre = (cells + 0.5) * voxel_size
    dist = ((positions - centre) ** 2).sum(axis=1)

    # sort by key, then distance to centre, then point index
    order = np.lexsort((np.arange(keys.size), dist, keys))
    sorted_keys = keys[order]
    first = np.ones(keys.size, dtype=bool)
    first[1:] = sorted_keys[1:] != sorted_keys[:-1]
    winners = order[first]
    point_to_voxel = np.cumsum(first) - 1
    point_to_voxel_by_point = np.empty(keys.size, dtype=np.int64)
    point_to_voxel_by_point[order] = point_to_voxel

    if point_features is None:
        features = Tensor(np.ones((winners.size, 1)))
    else:
        if point_features.shape[0] != positions.shape[0]:
            raise DimensionError(
                f'voxelize: {point_features.shape[0]} feature rows for {positions.shape[0]} points')
        features = index_rows(point_features, winners)

    out = SparseTensor(coords[winners], features, point_to_voxel=point_to_voxel_by_point)
    out.winners = winners
    logger.debug("[Sparse] Voxelized %s points into %s voxels (size %s m)",
                 positions.shape[0], winners.size, voxel_size)
    return out
