"""
Central finite-difference gradient checking.
"""

# python
import logging
from typing import Callable, Sequence

import numpy as np

# pymm2d3d
from .tensor import Tensor, precision


logger = logging.getLogger('pymm2d3d.autodiff')


DEFAULT_STEP = 1e-4
DEFAULT_RTOL = 1e-3
DEFAULT_ATOL = 1e-6


def numerical_grad(fn: Callable[[], Tensor],
                   tensor: Tensor,
                   step: float = DEFAULT_STEP) -> np.ndarray:
    """
    Central differences of the scalar fn() w.r.t. every element of tensor.
    fn must rebuild its graph on every call.
    """
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn().item()
        flat[i] = original - step
        minus = fn().item()
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = DEFAULT_ATOL) -> float:
    """
    max |a - n| / max(|a|, |n|, atol) over all elements.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def gradcheck(fn: Callable[[], Tensor],
              inputs: Sequence[Tensor],
              step: float = DEFAULT_STEP,
              rtol: float = DEFAULT_RTOL,
              atol: float = DEFAULT_ATOL):
    """
    Compare backward() gradients against central differences.

    Inputs must be float64 leaves (build them under precision('float64')).
    Return (passed, errors) with one max relative error per input.
    """
    errors = []
    with precision('float64'):
        for tensor in inputs:
            tensor.zero_grad()
        out = fn()
        out.backward()
        analytic = [np.array(t.grad, dtype=np.float64) for t in inputs]
        for tensor, grad in zip(inputs, analytic):
            numeric = numerical_grad(fn, tensor, step)
            # absolute agreement is enough where both are near zero
            close = np.abs(grad - numeric) <= atol * 10
            err = max_relative_error(np.where(close, 0.0, grad), np.where(close, 0.0, numeric), atol)
            errors.append(err)
    passed = all(err < rtol for err in errors)
    if not passed:
        logger.warning("[GradCheck] Failed with relative errors %s", errors)
    return passed, errors
