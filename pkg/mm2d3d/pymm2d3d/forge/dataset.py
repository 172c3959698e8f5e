"""
Samples, datasets and the binary dataset file.

File layout (little-endian):
    magic "MM23", version u32 = 1, sample count u32
    per sample:
        H u32, W u32, image float32[3*H*W]
        N u32, positions float32[N*3], colors float32[N*3], labels int32[N]
        intrinsics float32[6] (fx, fy, cx, cy, width, height)
        domain u8 (0 = source, 1 = target)
"""

# python
import logging
import os
import struct
from typing import Iterator, List, Optional

import numpy as np

# pymm2d3d
from ..errors import DimensionError, FormatError, TruncationError
from ..geometry import IGNORE_LABEL, Intrinsics, PointCloud


logger = logging.getLogger('pymm2d3d.forge')


MAGIC = b'MM23'
VERSION = 1
SOURCE, TARGET = 'source', 'target'
DOMAINS = (SOURCE, TARGET)
_DOMAIN_CODES = {SOURCE: 0, TARGET: 1}


class Sample():
    """
    One scene: image [3,H,W] in [0,1], camera-frame cloud, intrinsics, domain tag.
    """

    def __init__(self,
                 image: np.ndarray,
                 cloud: PointCloud,
                 K: Intrinsics,
                 domain: str = SOURCE) -> None:
        self.image = np.ascontiguousarray(image, dtype=np.float32)
        if self.image.shape != (3, K.height, K.width):
            raise DimensionError(f'Sample image {self.image.shape} does not match intrinsics {K.width}x{K.height}')
        if domain not in DOMAINS:
            raise DimensionError(f'Unknown domain tag <{domain}>')
        self.cloud = cloud
        self.K = K
        self.domain = domain

    @property
    def num_points(self) -> int:
        return len(self.cloud)

    def __repr__(self) -> str:
        return f'<Sample {self.domain} {self.K.width}x{self.K.height} points={self.num_points}>'


class Dataset():
    """
    Ordered list of samples.
    """

    def __init__(self, samples: Optional[List[Sample]] = None) -> None:
        self.samples = list(samples or [])

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    @property
    def num_points(self) -> int:
        """
        Total point count over all samples.
        """
        return sum(s.num_points for s in self.samples)

    @property
    def domains(self) -> List[str]:
        return sorted({s.domain for s in self.samples})


def _encode_sample(sample: Sample) -> bytes:
    K, cloud = sample.K, sample.cloud
    n = len(cloud)
    colors = cloud.colors if cloud.colors is not None else np.zeros((n, 3), dtype=np.float32)
    labels = cloud.labels if cloud.labels is not None else np.full(n, IGNORE_LABEL, dtype=np.int32)
    return b''.join([
        struct.pack('<II', K.height, K.width),
        sample.image.astype('<f4').tobytes(),
        struct.pack('<I', n),
        cloud.positions.astype('<f4').tobytes(),
        colors.astype('<f4').tobytes(),
        labels.astype('<i4').tobytes(),
        K.as_array().astype('<f4').tobytes(),
        struct.pack('<B', _DOMAIN_CODES[sample.domain]),
    ])


def save(dataset: Dataset, path: str) -> None:
    """
    Write the dataset file; the parent directory is created when missing.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<II', VERSION, len(dataset)))
        for sample in dataset:
            f.write(_encode_sample(sample))
    logger.info("[Forge] Saved %s samples to %s", len(dataset), path)


class ByteReader():
    """
    Bounds-checked little-endian cursor over file bytes.
    """

    def __init__(self, buffer: bytes) -> None:
        self.buffer = buffer
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.buffer):
            raise TruncationError(
                f'Truncated file: {what} needs {size} bytes, {len(self.buffer) - self.offset} left',
                offset=self.offset)
        chunk = self.buffer[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack('<I', self.take(4, what))[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count, what), dtype=dtype).copy()


def _decode_sample(reader: ByteReader, index: int) -> Sample:
    start = reader.offset
    height, width = reader.u32(f'sample {index} height'), reader.u32(f'sample {index} width')
    image = reader.array('<f4', 3 * height * width, f'sample {index} image').reshape(3, height, width)
    n = reader.u32(f'sample {index} point count')
    positions = reader.array('<f4', 3 * n, f'sample {index} positions').reshape(n, 3)
    colors = reader.array('<f4', 3 * n, f'sample {index} colors').reshape(n, 3)
    labels = reader.array('<i4', n, f'sample {index} labels')
    intrinsics = reader.array('<f4', 6, f'sample {index} intrinsics')
    domain_offset = reader.offset
    domain_code = struct.unpack('<B', reader.take(1, f'sample {index} domain'))[0]
    if domain_code not in (0, 1):
        raise FormatError(f'Sample {index}: unknown domain code {domain_code}', offset=domain_offset)
    try:
        K = Intrinsics.from_array(intrinsics)
        cloud = PointCloud(positions, colors, labels)
        return Sample(image.astype(np.float32), cloud, K, DOMAINS[domain_code])
    except (ValueError, DimensionError) as exc:
        raise FormatError(f'Sample {index} is inconsistent: {exc}', offset=start) from exc


def load(path: str) -> Dataset:
    """
    Read a dataset file. Any defect raises FormatError (TruncationError for a
    short payload) and no partial dataset is returned.
    """
    try:
        with open(path, 'rb') as f:
            buffer = f.read()
    except OSError as exc:
        raise FormatError(f'Cannot read dataset <{path}>: {exc.strerror}') from exc

    reader = ByteReader(buffer)
    magic = reader.take(4, 'magic')
    if magic != MAGIC:
        raise FormatError(f'Bad magic {magic!r} in <{path}>, expected {MAGIC!r}', offset=0)
    version = reader.u32('version')
    if version != VERSION:
        raise FormatError(f'Unsupported dataset version {version}', offset=4)
    count = reader.u32('sample count')
    samples = [_decode_sample(reader, i) for i in range(count)]
    if reader.offset != len(buffer):
        raise FormatError(f'{len(buffer) - reader.offset} trailing bytes after {count} samples', offset=reader.offset)
    logger.info("[Forge] Loaded %s samples from %s", count, path)
    return Dataset(samples)


def dataset_path(directory: str) -> str:
    """
    Location of the dataset file inside a generated data directory.
    """
    return os.path.join(directory, 'dataset.mm23')
