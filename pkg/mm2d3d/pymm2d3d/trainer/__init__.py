from .losses import LossTerms, LossWeights, mimicry, pseudo_supervised, seg_loss, supervised, total_loss, xm_loss
from .augment import AugmentConfig, augment, hflip, jitter_colors, transform_3d
from .optim import AdamW, OneCycleSchedule
from .pseudo import (
    PseudoLabelSet,
    generate_pseudo_labels,
    load_pseudo_labels,
    save_pseudo_labels,
    select_confident,
)
from .metrics import FUSION_STREAM, STREAMS, ConfusionMatrix, EvalReport, evaluate
from .config import (
    DataConfig,
    ExperimentConfig,
    TrainSettings,
    UdaConfig,
    load_config,
    load_yaml,
)
from .train import Trainer, TrainResult, load_datasets, point_labels_2d
