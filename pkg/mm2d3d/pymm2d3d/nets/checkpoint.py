"""
Parameter checkpoint file.

Layout (little-endian), same container style as the dataset file:
    magic "MMCK", version u32 = 1, tensor count u32
    per tensor: name length u32, name utf-8, rank u32, dims u32[rank], float32 payload

Tensors named "meta.*" carry the architecture so a checkpoint can be loaded
without its training config.
"""

# python
import logging
import os
import struct
from typing import Dict

import numpy as np

# pymm2d3d
from ..errors import ConfigError, FormatError
from ..forge.dataset import ByteReader
from .model import DEPTH_INPUTS, MM2D3D, ModelConfig


logger = logging.getLogger('pymm2d3d.nets')


MAGIC = b'MMCK'
VERSION = 1
META_PREFIX = 'meta.'


def _meta_tensors(config: ModelConfig) -> Dict[str, np.ndarray]:
    return {
        'meta.num_classes': np.array([config.num_classes]),
        'meta.widths_2d': np.array(config.widths_2d),
        'meta.widths_3d': np.array(config.widths_3d),
        'meta.voxel_size': np.array([config.voxel_size]),
        'meta.depth_input': np.array([DEPTH_INPUTS.index(config.depth_input)]),
        'meta.depth_scale': np.array([config.depth_scale]),
        'meta.rgb_3d': np.array([float(config.rgb_3d)]),
        'meta.fusion_head': np.array([float(config.fusion_head)]),
    }


def _decimal(value) -> float:
    # shortest decimal that round-trips the stored float32
    return float(str(np.float32(value)))


def _config_from_meta(meta: Dict[str, np.ndarray]) -> ModelConfig:
    try:
        return ModelConfig(
            num_classes=int(meta['meta.num_classes'][0]),
            widths_2d=tuple(int(w) for w in meta['meta.widths_2d']),
            widths_3d=tuple(int(w) for w in meta['meta.widths_3d']),
            voxel_size=_decimal(meta['meta.voxel_size'][0]),
            depth_input=DEPTH_INPUTS[int(meta['meta.depth_input'][0])],
            depth_scale=_decimal(meta['meta.depth_scale'][0]),
            rgb_3d=bool(meta['meta.rgb_3d'][0]),
            fusion_head=bool(meta['meta.fusion_head'][0]),
        )
    except (KeyError, IndexError, ConfigError) as exc:
        raise FormatError(f'Checkpoint architecture record is incomplete: {exc}') from exc


def encode(model: MM2D3D) -> bytes:
    tensors = dict(_meta_tensors(model.config))
    tensors.update(model.state_dict())
    chunks = [MAGIC, struct.pack('<II', VERSION, len(tensors))]
    for name, value in tensors.items():
        raw = name.encode('utf-8')
        value = np.asarray(value)
        chunks.append(struct.pack('<I', len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack('<I', value.ndim))
        chunks.append(struct.pack(f'<{value.ndim}I', *value.shape))
        chunks.append(value.astype('<f4').tobytes())
    return b''.join(chunks)


def save_checkpoint(model: MM2D3D, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(encode(model))
    logger.info("[Nets] Saved checkpoint with %s parameters to %s", model.num_parameters, path)


def decode(buffer: bytes) -> Dict[str, np.ndarray]:
    """
    All named tensors of a checkpoint, in file order.
    """
    reader = ByteReader(buffer)
    magic = reader.take(4, 'magic')
    if magic != MAGIC:
        raise FormatError(f'Bad checkpoint magic {magic!r}, expected {MAGIC!r}', offset=0)
    version = reader.u32('version')
    if version != VERSION:
        raise FormatError(f'Unsupported checkpoint version {version}', offset=4)
    count = reader.u32('tensor count')
    tensors = {}
    for i in range(count):
        start = reader.offset
        length = reader.u32(f'tensor {i} name length')
        try:
            name = reader.take(length, f'tensor {i} name').decode('utf-8')
        except UnicodeDecodeError as exc:
            raise FormatError(f'Tensor {i} name is not utf-8', offset=start) from exc
        if name in tensors:
            raise FormatError(f'Duplicate tensor <{name}>', offset=start)
        rank = reader.u32(f'tensor <{name}> rank')
        shape = tuple(reader.u32(f'tensor <{name}> dim {d}') for d in range(rank))
        count_values = int(np.prod(shape)) if shape else 1
        tensors[name] = reader.array('<f4', count_values, f'tensor <{name}> payload').reshape(shape)
    if reader.offset != len(buffer):
        raise FormatError(f'{len(buffer) - reader.offset} trailing bytes after {count} tensors',
                          offset=reader.offset)
    return tensors


def load_checkpoint(path: str) -> MM2D3D:
    """
    Rebuild the model recorded in a checkpoint and load its parameters.
    """
    try:
        with open(path, 'rb') as f:
            buffer = f.read()
    except OSError as exc:
        raise FormatError(f'Cannot read checkpoint <{path}>: {exc.strerror}') from exc
    tensors = decode(buffer)
    meta = {k: v for k, v in tensors.items() if k.startswith(META_PREFIX)}
    state = {k: v for k, v in tensors.items() if not k.startswith(META_PREFIX)}
    model = MM2D3D(_config_from_meta(meta))
    model.load_state_dict(state)
    logger.info("[Nets] Loaded checkpoint %s", path)
    return model
