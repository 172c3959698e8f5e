"""
Experiment protocols on the synthetic day -> night shift: source-only
against adaptation, dual-stream against RGB-only 2D, and one round of
self-training, plus the ERF locality comparison on occlusion scenes.
"""

# python
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

# pymm2d3d
from ..erf import ComplementarityReport, complementarity
from ..forge import Dataset, generate, preset_spec
from .config import ExperimentConfig, TrainSettings, UdaConfig
from .metrics import FUSION_STREAM
from .pseudo import generate_pseudo_labels
from .train import Trainer


logger = logging.getLogger('pymm2d3d.trainer')


@dataclass(frozen=True)
class ProtocolSettings():
    num_source: int = 200
    num_target: int = 200
    num_eval: int = 50
    epochs: int = 15
    seeds: Tuple[int, ...] = (0, 1, 2)
    workers: int = 1
    anchors: int = 20


def day_night(seed: int, settings: ProtocolSettings) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Labeled day source, unlabeled-in-use night target and a held-out night
    evaluation set, each from its own scene seed.
    """
    source = generate(preset_spec('day', seed=1000 * seed), settings.num_source, workers=settings.workers)
    target = generate(preset_spec('night', seed=1000 * seed + 1), settings.num_target, workers=settings.workers)
    held_out = generate(preset_spec('night', seed=1000 * seed + 2), settings.num_eval, workers=settings.workers)
    return source, target, held_out


def _config(seed: int, settings: ProtocolSettings, adapt: bool, **model) -> ExperimentConfig:
    config = ExperimentConfig(train=TrainSettings(epochs=settings.epochs, seed=seed),
                              uda=UdaConfig() if adapt else None)
    return replace(config, model=replace(config.model, seed=seed, **model))


def _mean(values: List[float]) -> float:
    return float(np.mean(values)) if values else float('nan')


def source_only_vs_adaptation(settings: ProtocolSettings = ProtocolSettings()) -> Dict[str, dict]:
    """
    Avg-stream target mIoU of source-only training and of adaptation
    (target mimicry, no pseudo labels), per seed and averaged.
    """
    results = {'source_only': [], 'adapted': []}
    for seed in settings.seeds:
        source, target, held_out = day_night(seed, settings)
        for name, adapt in (('source_only', False), ('adapted', True)):
            trainer = Trainer(_config(seed, settings, adapt), source, target if adapt else None)
            report = trainer.fit(eval_set=held_out).report
            results[name].append(report.miou('avg'))
            logger.info("[Protocol] seed %s %s: Avg mIoU %.4f", seed, name, results[name][-1])
    return {name: {'per_seed': values, 'mean': _mean(values)} for name, values in results.items()}


def depth_ablation(settings: ProtocolSettings = ProtocolSettings()) -> Dict[str, dict]:
    """
    2D-stream target mIoU of the dual-stream 2D branch and of the RGB-only one.
    """
    results = {'rgb_depth': [], 'rgb_only': []}
    for seed in settings.seeds:
        source, target, held_out = day_night(seed, settings)
        for name, depth_input in (('rgb_depth', 'sparse'), ('rgb_only', 'zeros')):
            trainer = Trainer(_config(seed, settings, True, depth_input=depth_input), source, target)
            results[name].append(trainer.fit(eval_set=held_out).report.miou('2d'))
            logger.info("[Protocol] seed %s %s: 2D mIoU %.4f", seed, name, results[name][-1])
    return {name: {'per_seed': values, 'mean': _mean(values)} for name, values in results.items()}


def self_training(settings: ProtocolSettings = ProtocolSettings(),
                  variants: Sequence[str] = ('branch', 'fused')) -> Dict[str, dict]:
    """
    Round 1 adapts without pseudo labels; round 2 retrains from scratch with
    the round-1 pseudo labels of every variant. Round 1 and the 'branch'
    variant are scored on the Avg stream, 'fused' on its fusion head.
    """
    results = {'round1': []}
    results.update({f'round2_{v}': [] for v in variants})
    for seed in settings.seeds:
        source, target, held_out = day_night(seed, settings)
        config = _config(seed, settings, True)
        first = Trainer(config, source, target)
        results['round1'].append(first.fit(eval_set=held_out).report.miou('avg'))
        for variant in variants:
            pseudo = generate_pseudo_labels(first.model, target, config.uda.keep_fraction, variant)
            second = Trainer(config, source, target, pseudo_labels=pseudo)
            stream = FUSION_STREAM if variant == 'fused' else 'avg'
            results[f'round2_{variant}'].append(second.fit(eval_set=held_out).report.miou(stream))
            logger.info("[Protocol] seed %s round 2 %s: %s mIoU %.4f", seed, variant, stream,
                        results[f'round2_{variant}'][-1])
    return {name: {'per_seed': values, 'mean': _mean(values)} for name, values in results.items()}


def erf_complementarity(settings: ProtocolSettings = ProtocolSettings(), seed: int = 0) -> ComplementarityReport:
    """
    Train source-only on occlusion scenes, then compare the locality of both
    branches' ERFs over foreground anchors of held-out occlusion scenes.
    """
    source = generate(preset_spec('occlusion', seed=1000 * seed + 3), settings.num_source, workers=settings.workers)
    held_out = generate(preset_spec('occlusion', seed=1000 * seed + 4), settings.num_eval, workers=settings.workers)
    trainer = Trainer(_config(seed, settings, False), source)
    trainer.fit()
    report = complementarity(trainer.model, held_out, settings.anchors, seed=seed)
    logger.info("[Protocol] seed %s ERF locality medians: 2D %.4f 3D %.4f", seed, report.median_2d, report.median_3d)
    return report


PROTOCOLS = {
    'uda': source_only_vs_adaptation,
    'depth': depth_ablation,
    'self-training': self_training,
    'erf': erf_complementarity,
}
