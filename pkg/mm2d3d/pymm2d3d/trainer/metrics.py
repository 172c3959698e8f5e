"""
Confusion matrices, IoU and the three-stream evaluation report.
"""

# python
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from tabulate import tabulate

# pymm2d3d
from ..errors import DimensionError, UsageError
from ..forge import CLASS_NAMES, Dataset
from ..geometry import IGNORE_LABEL
from ..nets import MM2D3D


logger = logging.getLogger('pymm2d3d.trainer')


STREAMS = ('2d', '3d', 'avg')
FUSION_STREAM = 'fusion'
STREAM_TITLES = {'2d': '2D', '3d': '3D', 'avg': 'Avg', FUSION_STREAM: 'Fusion'}


class ConfusionMatrix():
    """
    C x C counts, rows are ground truth and columns predictions.
    """

    def __init__(self, num_classes: int) -> None:
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, labels: np.ndarray, predictions: np.ndarray) -> None:
        labels = np.asarray(labels, dtype=np.int64)
        predictions = np.asarray(predictions, dtype=np.int64)
        if labels.shape != predictions.shape:
            raise DimensionError(f'ConfusionMatrix: {labels.shape} labels for {predictions.shape} predictions')
        keep = labels != IGNORE_LABEL
        labels, predictions = labels[keep], predictions[keep]
        if labels.size and (labels.max() >= self.num_classes or predictions.max() >= self.num_classes):
            raise DimensionError(f'ConfusionMatrix: class index out of range for {self.num_classes} classes')
        flat = labels * self.num_classes + predictions
        self.counts += np.bincount(flat, minlength=self.num_classes ** 2).reshape(self.num_classes, self.num_classes)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """
        TP / (TP + FP + FN) per class; NaN for classes that never occur in
        either ground truth or predictions.
        """
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        with np.errstate(invalid='ignore', divide='ignore'):
            return np.where(denom > 0, tp / denom, np.nan)

    def present(self) -> np.ndarray:
        return self.counts.sum(axis=1) > 0

    def miou(self) -> float:
        """
        Mean IoU over the classes present in the ground truth.
        """
        present = self.present()
        if not present.any():
            raise UsageError('mIoU: no labeled points were evaluated')
        return float(np.nan_to_num(self.iou()[present]).mean())


@dataclass
class EvalReport():
    class_names: Sequence[str]
    matrices: Dict[str, ConfusionMatrix] = field(default_factory=dict)

    def miou(self, stream: str) -> float:
        return self.matrices[stream].miou()

    def to_dict(self) -> dict:
        out = {}
        for stream, matrix in self.matrices.items():
            iou = matrix.iou()
            out[stream] = {
                'miou': matrix.miou(),
                'iou': {name: (None if np.isnan(v) else float(v)) for name, v in zip(self.class_names, iou)},
                'points': matrix.total,
            }
        return out

    def table(self) -> str:
        """
        One row per class and a final mIoU row, one column per stream, in percent.
        """
        rows = []
        ious = {stream: m.iou() for stream, m in self.matrices.items()}
        present = self.matrices[STREAMS[0]].present()
        for c, name in enumerate(self.class_names):
            row = [name]
            for stream in self.matrices:
                row.append('-' if not present[c] else f'{100.0 * np.nan_to_num(ious[stream][c]):.1f}')
            rows.append(row)
        rows.append(['mIoU'] + [f'{100.0 * m.miou():.1f}' for m in self.matrices.values()])
        headers = ['class'] + [STREAM_TITLES[stream] for stream in self.matrices]
        return tabulate(rows, headers=headers, tablefmt='github')


def streams_of(model: MM2D3D) -> Tuple[str, ...]:
    return STREAMS + ((FUSION_STREAM,) if model.fusion is not None else ())


def evaluate(model: MM2D3D,
             dataset: Dataset,
             class_names: Optional[Sequence[str]] = None) -> EvalReport:
    """
    Score the 2D, 3D and averaged predictions against the point labels, and
    the fusion head's predictions when the model has one.
    """
    class_names = list(class_names or CLASS_NAMES[:model.num_classes])
    report = EvalReport(class_names, {s: ConfusionMatrix(model.num_classes) for s in streams_of(model)})
    labeled = 0
    for sample in dataset:
        labels = sample.cloud.labels
        if labels is None:
            continue
        labeled += int((labels != IGNORE_LABEL).sum())
        prediction = model.predict(sample)
        report.matrices['2d'].update(labels, prediction.labels_2d)
        report.matrices['3d'].update(labels, prediction.labels_3d)
        report.matrices['avg'].update(labels, prediction.labels_avg)
        if FUSION_STREAM in report.matrices:
            report.matrices[FUSION_STREAM].update(labels, prediction.labels_fusion)
    if labeled == 0:
        raise UsageError('evaluate: the dataset has no labeled points')
    logger.info("[Trainer] Evaluated %s points: %s", labeled,
                ' '.join(f'{stream} {report.miou(stream):.4f}' for stream in report.matrices))
    return report
