"""
Experiment configuration: YAML file with the sections data, model, train
and uda. A config without a uda section trains on the source domain only.
"""

# python
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

# pymm2d3d
from ..errors import ConfigError, FormatError
from ..nets import ModelConfig
from .losses import LossWeights
from .pseudo import DEFAULT_KEEP_FRACTION, VARIANTS


logger = logging.getLogger('pymm2d3d.trainer')


SECTIONS = ('data', 'model', 'train', 'uda')


def _build(cls, section: str, values: Optional[dict]):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f'Unknown keys in [{section}]: {unknown}')
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f'Invalid [{section}] section: {exc}') from exc


@dataclass(frozen=True)
class DataConfig():
    """
    Directories written by `generate`. eval is scored after training when set.
    target_labels_for_training trains supervised on the target set instead
    of the source set (the oracle reference).
    """
    source: str = ''
    target: str = ''
    eval: str = ''
    target_labels_for_training: bool = False


@dataclass(frozen=True)
class TrainSettings():
    epochs: int = 15
    batch_size: int = 1
    lr: float = 1e-3
    warmup: float = 0.3
    floor_lr: float = 1e-5
    weight_decay: float = 0.01
    augment: bool = True
    detach_target: bool = True
    max_steps: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        errors = []
        if self.epochs < 1:
            errors.append(f'epochs must be >= 1, got {self.epochs}')
        if self.batch_size < 1:
            errors.append(f'batch_size must be >= 1, got {self.batch_size}')
        if self.lr <= 0 or not 0 <= self.floor_lr <= self.lr:
            errors.append(f'need 0 <= floor_lr <= lr and lr > 0, got lr={self.lr} floor_lr={self.floor_lr}')
        if not 0.0 <= self.warmup < 1.0:
            errors.append(f'warmup must be in [0, 1), got {self.warmup}')
        if self.weight_decay < 0:
            errors.append(f'weight_decay must be >= 0, got {self.weight_decay}')
        if self.max_steps < 0:
            errors.append(f'max_steps must be >= 0, got {self.max_steps}')
        if errors:
            raise ConfigError('Invalid [train] section: ' + '; '.join(errors))


@dataclass(frozen=True)
class UdaConfig():
    """
    lambda_t only weighs the pseudo-label term, which exists only when a
    pseudo-label file is supplied.
    """
    lambda_s: float = 0.8
    lambda_t: float = 0.1
    lambda_xs: float = 0.1
    lambda_xt: float = 0.01
    keep_fraction: float = DEFAULT_KEEP_FRACTION
    pseudo_source: str = 'branch'
    pseudo_labels: str = ''
    lambda_t_explicit: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        self.weights()
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError(f'keep_fraction must be in (0, 1], got {self.keep_fraction}')
        if self.pseudo_source not in VARIANTS:
            raise ConfigError(f'pseudo_source must be one of {VARIANTS}, got {self.pseudo_source}')

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_s, self.lambda_t, self.lambda_xs, self.lambda_xt)


@dataclass(frozen=True)
class ExperimentConfig():
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainSettings = TrainSettings()
    uda: Optional[UdaConfig] = None

    @property
    def weights(self) -> LossWeights:
        return self.uda.weights() if self.uda is not None else LossWeights()

    @property
    def adapts(self) -> bool:
        return self.uda is not None

    def with_pseudo_labels(self, path: str) -> 'ExperimentConfig':
        uda = self.uda or UdaConfig()
        return replace(self, uda=replace(uda, pseudo_labels=path))

    def check(self) -> None:
        """
        Cross-section rules that a single section cannot check.
        """
        if self.uda is not None and not self.data.target:
            raise ConfigError('[uda] needs data.target')
        if self.data.target_labels_for_training and not self.data.target:
            raise ConfigError('data.target_labels_for_training needs data.target')
        if self.data.target_labels_for_training and self.uda is not None:
            raise ConfigError('data.target_labels_for_training trains supervised on the target set and cannot adapt')
        if not self.data.target_labels_for_training and not self.data.source:
            raise ConfigError('data.source is required')
        if self.uda is not None and self.uda.lambda_t_explicit and self.uda.lambda_t > 0 \
                and not self.uda.pseudo_labels:
            raise ConfigError('uda.lambda_t > 0 needs a pseudo-label file')

    @classmethod
    def from_dict(cls, values: Optional[dict]) -> 'ExperimentConfig':
        values = dict(values or {})
        unknown = sorted(set(values) - set(SECTIONS))
        if unknown:
            raise ConfigError(f'Unknown config sections: {unknown}, use {list(SECTIONS)}')
        for name, section in values.items():
            if section is not None and not isinstance(section, dict):
                raise ConfigError(f'[{name}] must be a mapping')
        uda = None
        if 'uda' in values:
            uda_values = dict(values['uda'] or {})
            uda_values['lambda_t_explicit'] = 'lambda_t' in uda_values
            uda = _build(UdaConfig, 'uda', uda_values)
        return cls(data=_build(DataConfig, 'data', values.get('data')),
                   model=ModelConfig.from_dict(values.get('model')),
                   train=_build(TrainSettings, 'train', values.get('train')),
                   uda=uda)


def load_yaml(path: str) -> dict:
    """
    Parse a YAML mapping; unreadable files are FormatErrors.
    """
    yaml = YAML(typ='safe', pure=True)
    try:
        with open(path) as f:
            content = yaml.load(f)
    except OSError as exc:
        raise FormatError(f'Cannot read <{path}>: {exc.strerror}') from exc
    except YAMLError as exc:
        raise ConfigError(f'<{path}> is not valid YAML: {exc}') from exc
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ConfigError(f'<{path}> must hold a mapping at the top level')
    return content


def load_config(path: str) -> ExperimentConfig:
    config = ExperimentConfig.from_dict(load_yaml(path))
    logger.debug("[Trainer] Loaded config %s: %s", path, config)
    return config
