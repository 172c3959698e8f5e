"""
Pseudo labels for self-training on the target domain.
"""

# python
import logging
import math
import os
import zipfile
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

# pymm2d3d
from ..errors import FormatError, UsageError
from ..forge import Dataset
from ..geometry import IGNORE_LABEL
from ..nets import MM2D3D


logger = logging.getLogger('pymm2d3d.trainer')


VARIANTS = ('branch', 'fused')
DEFAULT_KEEP_FRACTION = 0.66


def select_confident(predicted: np.ndarray, confidence: np.ndarray, keep_fraction: float) -> np.ndarray:
    """
    Per predicted class c keep the ceil(keep_fraction * n_c) most confident
    points; ties go to the earlier point. Everything else becomes IGNORE_LABEL.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise UsageError(f'keep_fraction must be in (0, 1], got {keep_fraction}')
    predicted = np.asarray(predicted, dtype=np.int64)
    confidence = np.asarray(confidence, dtype=np.float64)
    out = np.full(predicted.shape, IGNORE_LABEL, dtype=np.int64)
    for c in np.unique(predicted):
        members = np.flatnonzero(predicted == c)
        keep = math.ceil(keep_fraction * members.size)
        order = np.argsort(-confidence[members], kind='stable')
        out[members[order[:keep]]] = c
    return out


@dataclass
class PseudoLabelSet():
    """
    Per target sample the labels that supervise the 2D and the 3D branch.
    provenance names the stream each set was taken from.
    """
    labels_2d: List[np.ndarray]
    labels_3d: List[np.ndarray]
    keep_fraction: float
    variant: str = 'branch'

    def __len__(self) -> int:
        return len(self.labels_3d)

    @property
    def provenance(self) -> Tuple[str, str]:
        return ('avg', 'avg') if self.variant == 'fused' else ('2d', '3d')

    def for_sample(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.labels_2d[index], self.labels_3d[index]

    @property
    def num_kept(self) -> int:
        return int(sum((labels != IGNORE_LABEL).sum() for labels in self.labels_3d))


def _split(values: np.ndarray, sizes: List[int]) -> List[np.ndarray]:
    return np.split(values, np.cumsum(sizes)[:-1])


def generate_pseudo_labels(model: MM2D3D,
                           dataset: Dataset,
                           keep_fraction: float = DEFAULT_KEEP_FRACTION,
                           variant: str = 'branch') -> PseudoLabelSet:
    """
    Label the target set with the model's own confident predictions.

    'branch' keeps each branch's own argmax for that branch; 'fused' gives
    both branches the argmax of the averaged probabilities.
    """
    if len(dataset) == 0:
        raise UsageError('generate_pseudo_labels: the target dataset is empty')
    if variant not in VARIANTS:
        raise UsageError(f'Unknown pseudo-label variant <{variant}>, use one of {VARIANTS}')

    predictions = [model.predict(sample) for sample in dataset]
    sizes = [sample.num_points for sample in dataset]

    def confident(probs: List[np.ndarray]) -> List[np.ndarray]:
        stacked = np.concatenate(probs, axis=0)
        return _split(select_confident(stacked.argmax(axis=1), stacked.max(axis=1), keep_fraction), sizes)

    if variant == 'fused':
        fused = confident([p.probs_avg for p in predictions])
        result = PseudoLabelSet(fused, [labels.copy() for labels in fused], keep_fraction, variant)
    else:
        result = PseudoLabelSet(confident([p.probs_2d for p in predictions]),
                                confident([p.probs_3d for p in predictions]),
                                keep_fraction, variant)
    logger.info("[Trainer] Kept %s of %s pseudo labels (keep %.2f, %s)",
                result.num_kept, sum(sizes), keep_fraction, variant)
    return result


def save_pseudo_labels(labels: PseudoLabelSet, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    arrays = {'keep_fraction': np.array(labels.keep_fraction),
              'variant': np.array(labels.variant),
              'count': np.array(len(labels))}
    for i, (l2d, l3d) in enumerate(zip(labels.labels_2d, labels.labels_3d)):
        arrays[f'labels_2d_{i}'] = l2d.astype(np.int32)
        arrays[f'labels_3d_{i}'] = l3d.astype(np.int32)
    with open(path, 'wb') as f:
        np.savez_compressed(f, **arrays)
    logger.info("[Trainer] Saved pseudo labels for %s samples to %s", len(labels), path)


def load_pseudo_labels(path: str) -> PseudoLabelSet:
    try:
        with np.load(path, allow_pickle=False) as archive:
            count = int(archive['count'])
            variant = str(archive['variant'])
            if variant not in VARIANTS:
                raise FormatError(f'Pseudo-label file <{path}> has unknown variant <{variant}>')
            return PseudoLabelSet(
                [archive[f'labels_2d_{i}'].astype(np.int64) for i in range(count)],
                [archive[f'labels_3d_{i}'].astype(np.int64) for i in range(count)],
                float(archive['keep_fraction']),
                variant,
            )
    except (OSError, KeyError, ValueError, TypeError, AttributeError, zipfile.BadZipFile) as exc:
        raise FormatError(f'Cannot read pseudo labels <{path}>: {exc}') from exc
