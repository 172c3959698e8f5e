"""
Training objectives: segmentation cross-entropy, cross-modal mimicry and the
weighted domain adaptation total.
"""

# python
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

# pymm2d3d
from ..autodiff import Tensor, add, index_rows, log_softmax, mean, pick, record, scale, softmax
from ..errors import ConfigError, ContractError, DimensionError, DomainError
from ..geometry import IGNORE_LABEL
from ..nets import ModelOutput


@dataclass(frozen=True)
class LossWeights():
    """
    lambda_s is recorded for completeness; the source segmentation term
    always has unit weight.
    """
    lambda_s: float = 0.8
    lambda_t: float = 0.1
    lambda_xs: float = 0.1
    lambda_xt: float = 0.01

    def __post_init__(self) -> None:
        negative = [name for name, value in vars(self).items() if value < 0]
        if negative:
            raise ConfigError(f'Loss weights must be >= 0: {negative}')


def seg_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean cross-entropy over the points whose label is not IGNORE_LABEL.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f'seg_loss: labels {labels.shape} do not match logits {logits.shape}')
    rows = np.flatnonzero(labels != IGNORE_LABEL)
    if rows.size == 0:
        raise ContractError('seg_loss: every label is ignored, the loss is undefined')
    kept = labels[rows]
    if kept.min() < 0 or kept.max() >= logits.shape[1]:
        raise DomainError(f'seg_loss: labels must be in [0, {logits.shape[1]}) or {IGNORE_LABEL}')
    return -mean(pick(log_softmax(index_rows(logits, rows), axis=1), kept))


def _kl_div(target: Tensor, mimic_logits: Tensor) -> Tensor:
    """
    (1/N) sum_n sum_c p log(p / q) with q = softmax(mimic_logits).
    """
    p = target.data.astype(np.float64)
    z = mimic_logits.data.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_q = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    q = np.exp(log_q)
    positive = p > 0
    log_p = np.log(np.where(positive, p, 1.0))
    n = p.shape[0]
    value = np.where(positive, p * (log_p - log_q), 0.0).sum() / n

    def backward_fn(g):
        grad_p = g * np.where(positive, log_p - log_q + 1.0, 0.0) / n
        grad_z = g * (q * p.sum(axis=1, keepdims=True) - p) / n
        return (grad_p.astype(target.data.dtype), grad_z.astype(mimic_logits.data.dtype))

    return record('kl_div', np.asarray(value, dtype=mimic_logits.data.dtype), (target, mimic_logits), backward_fn)


def xm_loss(target_dist: Tensor, mimic_logits: Tensor, detach_target: bool = True) -> Tensor:
    """
    KL(P || softmax(mimic_logits)) averaged over points.

    Args:
        target_dist: P [N,C], probability rows from the other branch's main head
        detach_target: treat P as a constant, so no gradient reaches the
            branch that produced it
    """
    if target_dist.shape != mimic_logits.shape or target_dist.ndim != 2:
        raise DimensionError(f'xm_loss: shapes {target_dist.shape} and {mimic_logits.shape} differ')
    if target_dist.shape[0] == 0:
        raise ContractError('xm_loss: no points')
    sums = target_dist.data.sum(axis=1)
    if (sums <= 0).any() or (target_dist.data < 0).any():
        raise ContractError(f'xm_loss: target row {int(np.argmin(sums))} is not a probability vector')
    if detach_target:
        target_dist = target_dist.detach()
    return _kl_div(target_dist, mimic_logits)


def mimicry(output: ModelOutput, detach_target: bool = True) -> Tensor:
    """
    Both directions summed: the 2D aux head mimics the 3D main head and the
    3D aux head mimics the 2D main head.
    """
    p2d = softmax(output.out_2d.main_logits, axis=1)
    p3d = softmax(output.out_3d.main_logits, axis=1)
    return add(xm_loss(p3d, output.out_2d.aux_logits, detach_target),
               xm_loss(p2d, output.out_3d.aux_logits, detach_target))


def supervised(output: ModelOutput, labels_2d: np.ndarray, labels_3d: np.ndarray) -> Tensor:
    """
    Segmentation losses of both branches (and the fusion head when present)
    summed. labels_2d are the projected labels read at each point's pixel.
    """
    loss = add(seg_loss(output.out_2d.main_logits, labels_2d),
               seg_loss(output.out_3d.main_logits, labels_3d))
    if output.fusion_logits is not None:
        loss = add(loss, seg_loss(output.fusion_logits, labels_3d))
    return loss


def _has_labels(labels: Optional[np.ndarray]) -> bool:
    return labels is not None and bool((np.asarray(labels) != IGNORE_LABEL).any())


def pseudo_supervised(output: ModelOutput,
                      labels_2d: Optional[np.ndarray],
                      labels_3d: Optional[np.ndarray]) -> Optional[Tensor]:
    """
    Like supervised, but each branch is supervised only when it kept at
    least one pseudo label; the fusion head follows the 3D labels. None
    when neither branch kept any.
    """
    terms = []
    if _has_labels(labels_2d):
        terms.append(seg_loss(output.out_2d.main_logits, labels_2d))
    if _has_labels(labels_3d):
        terms.append(seg_loss(output.out_3d.main_logits, labels_3d))
        if output.fusion_logits is not None:
            terms.append(seg_loss(output.fusion_logits, labels_3d))
    if not terms:
        return None
    loss = terms[0]
    for term in terms[1:]:
        loss = add(loss, term)
    return loss


@dataclass
class LossTerms():
    """
    The scalar objective and its unweighted parts, for logging.
    """
    total: Tensor
    parts: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        return dict({'loss': self.total.item()}, **self.parts)


def total_loss(source: ModelOutput,
               source_labels: Tuple[np.ndarray, np.ndarray],
               target: Optional[ModelOutput] = None,
               pseudo_labels: Optional[Tuple[np.ndarray, np.ndarray]] = None,
               weights: LossWeights = LossWeights(),
               detach_target: bool = True) -> LossTerms:
    """
    L = L_seg(source) + lambda_t L_seg(target, pseudo) + lambda_xs L_xM(source) + lambda_xt L_xM(target)

    Args:
        source_labels: (labels for the 2D branch, labels for the 3D branch)
        target: None for source-only training
        pseudo_labels: (2D, 3D) pseudo labels of the target sample; a branch
            without kept labels gets no target term, and the term is dropped
            when absent or when neither branch kept a label
    """
    parts = {}
    seg_source = supervised(source, *source_labels)
    parts['seg_source'] = seg_source.item()
    total = seg_source

    if weights.lambda_xs > 0:
        xm_source = mimicry(source, detach_target)
        parts['xm_source'] = xm_source.item()
        total = add(total, scale(xm_source, weights.lambda_xs))

    if target is not None:
        if weights.lambda_xt > 0:
            xm_target = mimicry(target, detach_target)
            parts['xm_target'] = xm_target.item()
            total = add(total, scale(xm_target, weights.lambda_xt))
        if pseudo_labels is not None and weights.lambda_t > 0:
            seg_target = pseudo_supervised(target, *pseudo_labels)
            if seg_target is not None:
                parts['seg_target'] = seg_target.item()
                total = add(total, scale(seg_target, weights.lambda_t))
    return LossTerms(total, parts)
