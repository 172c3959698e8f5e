"""
ERF files: an ASCII PLY cloud with both masses per point, a P6 heatmap of
the 2D mass and a tab-separated table of the locality curves.
"""

# python
import logging
import os
from typing import Dict, Tuple

import numpy as np
from PIL import Image

# pymm2d3d
from ..errors import FormatError
from .analyzer import ErfResult


logger = logging.getLogger('pymm2d3d.erf')


PLY_NAME = 'erf.ply'
HEATMAP_NAME = 'erf2d.ppm'
LOCALITY_NAME = 'locality.tsv'
PLY_PROPERTIES = ('x', 'y', 'z', 'erf2d', 'erf3d')


def heat_colors(values: np.ndarray) -> np.ndarray:
    """
    Black-red-yellow-white ramp of values in [0, 1], as uint8 [..., 3].
    """
    t = np.clip(values, 0.0, 1.0)[..., None]
    ramp = np.clip(3.0 * t - np.array([0.0, 1.0, 2.0]), 0.0, 1.0)
    return np.round(255.0 * ramp).astype(np.uint8)


def write_ply(result: ErfResult, path: str) -> None:
    lines = ['ply', 'format ascii 1.0', f'element vertex {len(result.positions)}']
    lines += [f'property float {name}' for name in PLY_PROPERTIES]
    lines.append('end_header')
    columns = np.column_stack([result.positions, result.mass_2d_points, result.mass_3d])
    lines += [' '.join(f'{v:.9g}' for v in row) for row in columns]
    with open(path, 'w') as f:
        f.write('\n'.join(lines) + '\n')


def read_ply(path: str) -> Dict[str, np.ndarray]:
    """
    Read the vertex properties of an ASCII PLY file written by write_ply.
    """
    try:
        with open(path) as f:
            text = f.read().splitlines()
    except OSError as exc:
        raise FormatError(f'Cannot read <{path}>: {exc.strerror}') from exc
    if not text or text[0] != 'ply' or 'end_header' not in text:
        raise FormatError(f'<{path}> is not an ASCII PLY file')
    end = text.index('end_header')
    names, count = [], 0
    for line in text[1:end]:
        parts = line.split()
        if parts[:2] == ['element', 'vertex']:
            count = int(parts[2])
        elif parts[:1] == ['property']:
            names.append(parts[-1])
    body = text[end + 1:end + 1 + count]
    if len(body) != count:
        raise FormatError(f'<{path}> announces {count} vertices but holds {len(body)}')
    values = np.array([[float(v) for v in line.split()] for line in body]).reshape(count, len(names))
    return {name: values[:, i] for i, name in enumerate(names)}


def write_heatmap(mass_2d: np.ndarray, path: str, upscale: int = 1) -> None:
    """
    Heatmap of the 2D mass scaled so that its maximum is white.
    """
    peak = mass_2d.max() if mass_2d.size else 0.0
    scaled = mass_2d / peak if peak > 0 else np.zeros_like(mass_2d)
    image = Image.fromarray(heat_colors(scaled))
    if upscale > 1:
        image = image.resize((image.width * upscale, image.height * upscale), Image.NEAREST)
    image.save(path, format='PPM')


def write_locality(result: ErfResult, path: str) -> None:
    curve_2d = dict(result.curve('2d'))
    curve_3d = dict(result.curve('3d'))
    with open(path, 'w') as f:
        f.write('radius_m\terf2d\terf3d\n')
        for radius in sorted(curve_2d):
            f.write(f'{radius:.4f}\t{curve_2d[radius]:.6f}\t{curve_3d[radius]:.6f}\n')


def export_erf(result: ErfResult, directory: str, upscale: int = 1) -> Tuple[str, str, str]:
    """
    Write the three ERF files of one anchor into directory.

    Return:
        (ply path, heatmap path, locality table path)
    """
    paths = (os.path.join(directory, PLY_NAME),
             os.path.join(directory, HEATMAP_NAME),
             os.path.join(directory, LOCALITY_NAME))
    try:
        os.makedirs(directory, exist_ok=True)
        write_ply(result, paths[0])
        write_heatmap(result.mass_2d, paths[1], upscale)
        write_locality(result, paths[2])
    except OSError as exc:
        raise FormatError(f'Cannot write ERF files to <{directory}>: {exc.strerror or exc}') from exc
    logger.info("[Erf] Wrote %s", ', '.join(paths))
    return paths
