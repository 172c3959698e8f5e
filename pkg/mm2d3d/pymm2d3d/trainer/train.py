"""
Training loop: alternating source and target batches, AdamW with the
one-cycle schedule, a JSON-lines metrics log.
"""

# python
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

# pymm2d3d
from ..autodiff import scale
from ..errors import ConfigError, FormatError, NumericError
from ..forge import Dataset, Sample, dataset_path, load
from ..geometry import IGNORE_LABEL, PointCloud, pixel_indices, project_labels
from ..nets import MM2D3D
from .augment import AugmentConfig, augment_2d, augment_3d
from .config import ExperimentConfig
from .losses import total_loss
from .metrics import EvalReport, evaluate
from .optim import AdamW, OneCycleSchedule
from .pseudo import PseudoLabelSet


logger = logging.getLogger('pymm2d3d.trainer')


SOURCE_STREAM, TARGET_STREAM = 0, 1


def point_labels_2d(cloud: PointCloud, K) -> np.ndarray:
    """
    Supervision of the 2D branch: the projected label map (z-buffer winners)
    read at every point's pixel.
    """
    label_map = project_labels(cloud, K)
    rows, cols, mask = pixel_indices(cloud, K)
    labels = np.full(len(cloud), IGNORE_LABEL, dtype=np.int64)
    labels[mask] = label_map[rows[mask], cols[mask]]
    return labels


@dataclass
class PreparedSample():
    """
    One sample ready for a step: a view per branch and the labels of both.
    """
    sample: Sample
    image_2d: np.ndarray
    cloud_2d: PointCloud
    cloud_3d: PointCloud
    labels_2d: Optional[np.ndarray]
    labels_3d: Optional[np.ndarray]


@dataclass
class TrainResult():
    model: MM2D3D
    records: List[dict] = field(default_factory=list)
    report: Optional[EvalReport] = None

    @property
    def losses(self) -> List[float]:
        return [r['loss'] for r in self.records if r.get('split') == 'train']


class Trainer():
    """
    Each step runs batch_size source samples and, when adapting, batch_size
    target samples, then one optimizer update. The shorter dataset is cycled
    to the length of the longer one.

    threads > 1 assembles the next step's samples (augmentation, projection)
    on worker threads while the current step trains. Every sample draws its
    augmentation from its own seeded stream, so the result does not depend
    on the thread count.
    """

    def __init__(self,
                 config: ExperimentConfig,
                 source: Dataset,
                 target: Optional[Dataset] = None,
                 pseudo_labels: Optional[PseudoLabelSet] = None,
                 threads: int = 1,
                 progress: bool = False) -> None:
        if config.adapts and target is None:
            raise ConfigError('Adaptation needs a target dataset')
        if pseudo_labels is not None:
            if not config.adapts:
                raise ConfigError('Pseudo labels need a [uda] section')
            self._check_pseudo(pseudo_labels, target)
        elif config.adapts and config.uda.lambda_t_explicit and config.uda.lambda_t > 0:
            raise ConfigError('uda.lambda_t > 0 needs a pseudo-label file')
        if len(source) == 0:
            raise ConfigError('The training dataset is empty')

        self.config = config
        self.source = source
        self.target = target if config.adapts else None
        self.pseudo = pseudo_labels
        self.threads = max(1, threads)
        self.progress = progress
        self.augment = AugmentConfig() if config.train.augment else None

        model_config = config.model
        if pseudo_labels is not None and pseudo_labels.variant == 'fused':
            model_config = replace(model_config, fusion_head=True)
        self.model = MM2D3D(model_config)
        self.optimizer = AdamW(self.model.parameters(), lr=config.train.lr,
                               weight_decay=config.train.weight_decay)
        total = config.train.epochs * self.steps_per_epoch
        if config.train.max_steps:
            total = min(total, config.train.max_steps)
        self.total_steps = total
        self.schedule = OneCycleSchedule(total, peak=config.train.lr, warmup=config.train.warmup,
                                         floor=config.train.floor_lr)

    @staticmethod
    def _check_pseudo(pseudo: PseudoLabelSet, target: Optional[Dataset]) -> None:
        if target is None or len(pseudo) != len(target):
            raise FormatError(f'Pseudo labels cover {len(pseudo)} samples, the target set has '
                              f'{0 if target is None else len(target)}')
        for i, sample in enumerate(target):
            if pseudo.labels_3d[i].shape != (sample.num_points,) or pseudo.labels_2d[i].shape != (sample.num_points,):
                raise FormatError(f'Pseudo labels of target sample {i} do not match its {sample.num_points} points')

    @property
    def steps_per_epoch(self) -> int:
        longest = max(len(self.source), len(self.target) if self.target is not None else 0)
        return math.ceil(longest / self.config.train.batch_size)

    def _order(self, dataset: Dataset, epoch: int, stream: int) -> np.ndarray:
        """
        Shuffled sample indices for one epoch, cycled to steps_per_epoch batches.
        """
        rng = np.random.default_rng([self.config.train.seed, epoch, stream])
        needed = self.steps_per_epoch * self.config.train.batch_size
        chunks = []
        while sum(c.size for c in chunks) < needed:
            chunks.append(rng.permutation(len(dataset)))
        return np.concatenate(chunks)[:needed]

    def prepare(self, dataset: Dataset, index: int, epoch: int, stream: int, slot: int = 0) -> PreparedSample:
        """
        Augment one sample. slot is its position in the epoch order, so a
        sample repeated by cycling gets a fresh augmentation each time.
        """
        sample = dataset[index]
        image, cloud_2d, cloud_3d = sample.image, sample.cloud, sample.cloud
        if self.augment is not None:
            rng = np.random.default_rng([self.config.train.seed, epoch, slot, index, stream])
            image, cloud_2d = augment_2d(sample, rng, self.augment)
            cloud_3d = augment_3d(sample.cloud, rng, self.augment)

        labels_2d = labels_3d = None
        if stream == SOURCE_STREAM and sample.cloud.labels is not None:
            labels_3d = sample.cloud.labels.astype(np.int64)
            labels_2d = point_labels_2d(cloud_2d, sample.K)
        elif stream == TARGET_STREAM and self.pseudo is not None:
            labels_2d, labels_3d = self.pseudo.for_sample(index)
        return PreparedSample(sample, image, cloud_2d, cloud_3d, labels_2d, labels_3d)

    def _assemble(self, executor: Optional[ThreadPoolExecutor], epoch: int, step: int,
                  orders: Tuple[np.ndarray, Optional[np.ndarray]]):
        batch = self.config.train.batch_size
        slots = range(step * batch, (step + 1) * batch)
        jobs = [(self.source, int(orders[0][s]), epoch, SOURCE_STREAM, s) for s in slots]
        if orders[1] is not None:
            jobs += [(self.target, int(orders[1][s]), epoch, TARGET_STREAM, s) for s in slots]
        if executor is None:
            return [self.prepare(*job) for job in jobs]
        return [executor.submit(self.prepare, *job) for job in jobs]

    def train_step(self, step: int, prepared: List[PreparedSample]) -> dict:
        batch = self.config.train.batch_size
        sources = prepared[:batch]
        targets = prepared[batch:]
        weights = self.config.weights
        detach = self.config.train.detach_target

        self.optimizer.zero_grad()
        lr = self.schedule.apply(self.optimizer, step)
        record = {'split': 'train', 'step': step, 'lr': lr}
        totals = {}
        for i, src in enumerate(sources):
            if src.labels_3d is None:
                raise FormatError(f'Training sample {i} of step {step} has no labels')
            source_out = self.model(src.sample, src.image_2d, src.cloud_2d, src.cloud_3d)
            target_out, pseudo = None, None
            if i < len(targets):
                tgt = targets[i]
                target_out = self.model(tgt.sample, tgt.image_2d, tgt.cloud_2d, tgt.cloud_3d)
                if tgt.labels_3d is not None:
                    pseudo = (tgt.labels_2d, tgt.labels_3d)
            terms = total_loss(source_out, (src.labels_2d, src.labels_3d), target_out, pseudo,
                               weights, detach_target=detach)
            if not np.isfinite(terms.total.item()):
                raise NumericError(f'Non-finite loss at step {step}: {terms.as_record()}')
            scale(terms.total, 1.0 / len(sources)).backward()
            for name, value in terms.as_record().items():
                totals[name] = totals.get(name, 0.0) + value / len(sources)

        self.optimizer.step()
        record.update(totals)
        return record

    def fit(self, metrics_path: Optional[str] = None, eval_set: Optional[Dataset] = None) -> TrainResult:
        result = TrainResult(self.model)
        log = _MetricsLog(metrics_path)
        logger.info("[Trainer] %s steps (%s per epoch), %s source samples%s",
                    self.total_steps, self.steps_per_epoch, len(self.source),
                    f', {len(self.target)} target samples' if self.target is not None else '')
        if self.target is not None:
            logger.info("[Trainer] Loss weights %s", self.config.weights)

        executor = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None
        bar = tqdm(total=self.total_steps, disable=not self.progress, desc='train', unit='step')
        try:
            schedule = [(epoch, step) for epoch in range(self.config.train.epochs)
                        for step in range(self.steps_per_epoch)][:self.total_steps]
            orders = {}
            pending = None
            for global_step, (epoch, step) in enumerate(schedule):
                if epoch not in orders:
                    orders = {epoch: (self._order(self.source, epoch, SOURCE_STREAM),
                                      None if self.target is None else
                                      self._order(self.target, epoch, TARGET_STREAM))}
                if pending is None:
                    pending = self._assemble(executor, epoch, step, orders[epoch])
                prepared = [job.result() for job in pending] if executor is not None else pending
                pending = None
                if executor is not None and global_step + 1 < len(schedule):
                    next_epoch, next_step = schedule[global_step + 1]
                    if next_epoch == epoch:
                        pending = self._assemble(executor, next_epoch, next_step, orders[epoch])

                record = self.train_step(global_step, prepared)
                record['epoch'] = epoch
                result.records.append(record)
                log.write(record)
                bar.update(1)
                bar.set_postfix(loss=f"{record['loss']:.4f}")
        finally:
            bar.close()
            if executor is not None:
                executor.shutdown(wait=True)

        if eval_set is not None:
            result.report = evaluate(self.model, eval_set)
            record = {'split': 'eval', 'step': self.total_steps}
            for stream, values in result.report.to_dict().items():
                record[f'miou_{stream}'] = values['miou']
                record[f'iou_{stream}'] = values['iou']
            result.records.append(record)
            log.write(record)
        log.close()
        logger.info("[Trainer] Finished: first loss %.4f, last loss %.4f",
                    result.losses[0], result.losses[-1])
        return result


class _MetricsLog():
    """
    Append-only JSON lines; a no-op without a path.
    """

    def __init__(self, path: Optional[str]) -> None:
        self._file = None
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self._file = open(path, 'a')

    def write(self, record: dict) -> None:
        if self._file is not None:
            self._file.write(json.dumps(record, sort_keys=True) + '\n')
            self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


def load_datasets(config: ExperimentConfig) -> Tuple[Dataset, Optional[Dataset], Optional[Dataset]]:
    """
    (training set, target set or None, evaluation set or None) for a config.
    The oracle setting trains on the labeled target set.
    """
    config.check()
    if config.data.target_labels_for_training:
        source, target = load(dataset_path(config.data.target)), None
    else:
        source = load(dataset_path(config.data.source))
        target = load(dataset_path(config.data.target)) if config.adapts else None
    eval_set = load(dataset_path(config.data.eval)) if config.data.eval else None
    return source, target, eval_set
