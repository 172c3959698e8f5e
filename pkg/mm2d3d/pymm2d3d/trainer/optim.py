"""
AdamW with decoupled weight decay and the one-cycle learning-rate policy.
"""

# python
import math
from typing import List, Sequence

import numpy as np

# pymm2d3d
from ..autodiff import Tensor
from ..errors import ConfigError


class AdamW():

    def __init__(self,
                 params: Sequence[Tensor],
                 lr: float = 1e-3,
                 betas=(0.9, 0.999),
                 eps: float = 1e-8,
                 weight_decay: float = 0.01) -> None:
        if lr < 0 or eps <= 0 or weight_decay < 0 or not all(0.0 <= b < 1.0 for b in betas):
            raise ConfigError(f'Invalid AdamW settings lr={lr} betas={betas} eps={eps} weight_decay={weight_decay}')
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self._m = [np.zeros(p.shape) for p in self.params]
        self._v = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        """
        One update; parameters without a gradient are left untouched.
        """
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            value = p.data.astype(np.float64) * (1.0 - self.lr * self.weight_decay) - self.lr * update
            p.data[...] = value


class OneCycleSchedule():
    """
    Cosine warmup from peak / div to peak over the first warmup fraction of
    the steps, then cosine annealing from peak to floor.
    """

    def __init__(self,
                 total_steps: int,
                 peak: float = 1e-3,
                 warmup: float = 0.3,
                 div: float = 25.0,
                 floor: float = 1e-5) -> None:
        if total_steps < 1:
            raise ConfigError(f'One-cycle schedule needs at least one step, got {total_steps}')
        if not 0.0 <= warmup < 1.0 or peak <= 0 or div < 1 or not 0 <= floor <= peak:
            raise ConfigError(f'Invalid one-cycle settings peak={peak} warmup={warmup} div={div} floor={floor}')
        self.total_steps = total_steps
        self.peak = peak
        self.start = peak / div
        self.floor = floor
        self.warmup_steps = int(round(warmup * total_steps))

    def lr(self, step: int) -> float:
        if step < self.warmup_steps:
            frac = step / self.warmup_steps
            return self.start + (self.peak - self.start) * (1.0 - math.cos(math.pi * frac)) / 2.0
        span = max(1, self.total_steps - self.warmup_steps - 1)
        frac = min(1.0, (step - self.warmup_steps) / span)
        return self.floor + (self.peak - self.floor) * (1.0 + math.cos(math.pi * frac)) / 2.0

    def apply(self, optimizer: AdamW, step: int) -> float:
        optimizer.lr = self.lr(step)
        return optimizer.lr
