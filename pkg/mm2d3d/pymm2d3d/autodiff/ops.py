"""
Differentiable ops on Tensor.

Convolutions use the cross-correlation convention (no kernel flip) everywhere.
Shapes must agree exactly; the only broadcasting is the explicit broadcast_to op.
"""

# python
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# pymm2d3d
from ..errors import DimensionError, NumericError, UsageError
from .tensor import Tensor, record


__all__ = [
    'add', 'mul', 'scale', 'relu', 'sigmoid', 'broadcast_to', 'reshape',
    'concat', 'linear', 'sum', 'mean', 'pick', 'index_rows', 'gather_pixels',
    'softmax', 'log_softmax', 'conv2d', 'conv2d_transpose', 'constant',
    'parameters_grad_norm',
]


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f'{op}: shape mismatch {a.shape} vs {b.shape}')


### ELEMENTWISE ###
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape('add', a, b)
    return record('add', a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape('mul', a, b)
    a_data, b_data = a.data, b.data
    return record('mul', a_data * b_data, (a, b),
                  lambda g: (g * b_data, g * a_data))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return record('scale', x.data * s, (x,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record('relu', np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return record('sigmoid', out, (x,), lambda g: (g * out * (1.0 - out),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """
    Explicit broadcast, e.g. a per-row gate [N,1] to [N,3].
    """
    shape = tuple(shape)
    if len(shape) != x.ndim:
        raise DimensionError(f'broadcast_to: rank mismatch {x.shape} -> {shape}')
    axes = []
    for axis, (src, dst) in enumerate(zip(x.shape, shape)):
        if src == dst:
            continue
        if src != 1:
            raise DimensionError(f'broadcast_to: cannot expand {x.shape} -> {shape}')
        axes.append(axis)
    axes = tuple(axes)
    out = np.broadcast_to(x.data, shape).copy()
    return record('broadcast_to', out, (x,),
                  lambda g: (g.sum(axis=axes, keepdims=True),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src_shape = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f'reshape: {exc}') from exc
    return record('reshape', out, (x,), lambda g: (g.reshape(src_shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """
    Concatenate along axis; all other axes must agree.
    """
    tensors = list(tensors)
    if not tensors:
        raise DimensionError('concat: empty tensor list')
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f'concat: axis {axis} out of range for rank {ndim}')
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise DimensionError('concat: rank mismatch')
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise DimensionError(f'concat: shape mismatch on axis {ax}: {tensors[0].shape} vs {t.shape}')
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        grads = []
        for start, stop in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * ndim
            index[axis] = slice(start, stop)
            grads.append(g[tuple(index)])
        return grads

    return record('concat', out, tensors, backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    x [N, Fin], weight [Fout, Fin], bias [Fout] -> [N, Fout]
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f'linear: input {x.shape} does not match weight {weight.shape}')
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f'linear: bias {bias.shape} does not match weight {weight.shape}')
    x_data, w_data = x.data, weight.data
    out = x_data @ w_data.T
    if bias is not None:
        out = out + bias.data
        inputs = (x, weight, bias)
    else:
        inputs = (x, weight)

    def backward_fn(g):
        grads = [g @ w_data, g.T @ x_data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record('linear', out, inputs, backward_fn)


### REDUCTIONS AND INDEXING ###
def sum(x: Tensor) -> Tensor:
    shape = x.shape
    return record('sum', np.asarray(x.data.sum()), (x,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise UsageError('mean of an empty tensor')
    return scale(sum(x), 1.0 / x.size)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """
    Row-wise selection: out[n] = x[n, index[n]].
    """
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f'pick: index {index.shape} does not match {x.shape}')
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward_fn(g):
        grad = np.zeros(shape, dtype=g.dtype)
        grad[rows, index] = g
        return (grad,)

    return record('pick', x.data[rows, index], (x,), backward_fn)


def index_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """
    out = x[index]; repeated indices accumulate gradient.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise DimensionError(f'index_rows: index out of range for {x.shape[0]} rows')
    shape = x.shape

    def backward_fn(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.add.at(grad, index, g)
        return (grad,)

    return record('index_rows', x.data[index], (x,), backward_fn)


def gather_pixels(feature_map: Tensor,
                  rows: np.ndarray,
                  cols: np.ndarray,
                  valid: Optional[np.ndarray] = None) -> Tensor:
    """
    Nearest-pixel gather from a [C,H,W] map to [N,C]. Invalid points get zeros
    and scatter no gradient.
    """
    if feature_map.ndim != 3:
        raise DimensionError(f'gather_pixels: expected [C,H,W], got {feature_map.shape}')
    channels, height, width = feature_map.shape
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if valid is None:
        valid = np.ones(rows.shape, dtype=bool)
    valid = valid & (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    linear_index = np.where(valid, rows * width + cols, 0)
    flat = feature_map.data.reshape(channels, height * width)
    out = flat[:, linear_index].T.copy()
    out[~valid] = 0
    shape = feature_map.shape

    def backward_fn(g):
        grad = np.zeros((height * width, channels), dtype=g.dtype)
        np.add.at(grad, linear_index[valid], g[valid])
        return (grad.T.reshape(shape),)

    return record('gather_pixels', out, (feature_map,), backward_fn)


### SOFTMAX ###
def _check_finite(op: str, data: np.ndarray) -> None:
    if np.isnan(data).any():
        raise NumericError(f'{op}: NaN in input')


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    _check_finite('softmax', logits.data)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record('softmax', out, (logits,), backward_fn)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    _check_finite('log_softmax', logits.data)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward_fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return record('log_softmax', out, (logits,), backward_fn)


### CONVOLUTION ###
def _pair(value) -> Tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """
    [B,C,Hp,Wp] -> [B,H',W',C*kh*kw] with (C,kh,kw) flattening order.
    """
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    batch, channels, out_h, out_w = windows.shape[:4]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch, out_h, out_w, channels * kh * kw)


def _col2im(cols: np.ndarray,
            padded_shape: Tuple[int, int, int, int],
            kh: int, kw: int, stride: int) -> np.ndarray:
    """
    Adjoint of _im2col: scatter-add [B,H',W',C*kh*kw] back into [B,C,Hp,Wp].
    """
    batch, channels = padded_shape[:2]
    _, out_h, out_w, _ = cols.shape
    patches = cols.reshape(batch, out_h, out_w, channels, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += patches[:, :, i, j]
    return out


def _check_conv_args(op: str, x: Tensor, kernel: Tensor, stride: int, padding: int, channel_axis_in: int) -> None:
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f'{op}: expected 4D input and kernel, got {x.shape} and {kernel.shape}')
    if x.shape[1] != kernel.shape[channel_axis_in]:
        raise DimensionError(f'{op}: input channels {x.shape[1]} do not match kernel {kernel.shape}')
    if stride < 1:
        raise UsageError(f'{op}: stride must be >= 1, got {stride}')
    if padding < 0:
        raise UsageError(f'{op}: padding must be >= 0, got {padding}')


def conv2d(x: Tensor,
           kernel: Tensor,
           bias: Optional[Tensor] = None,
           stride: int = 1,
           padding: int = 0) -> Tensor:
    """
    x [B,Cin,H,W], kernel [Cout,Cin,kh,kw] -> [B,Cout,H',W'],
    H' = floor((H + 2*padding - kh) / stride) + 1.
    """
    _check_conv_args('conv2d', x, kernel, stride, padding, channel_axis_in=1)
    c_out, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise UsageError(f'conv2d: kernel extent must be odd, got {kh}x{kw}')
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f'conv2d: bias {bias.shape} does not match {c_out} output channels')
    p = padding
    padded = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    if padded.shape[2] < kh or padded.shape[3] < kw:
        raise DimensionError(f'conv2d: input {x.shape} smaller than kernel {kernel.shape}')
    cols = _im2col(padded, kh, kw, stride)
    w_mat = kernel.data.reshape(c_out, c_in * kh * kw)
    out = cols @ w_mat.T
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 3, 1, 2)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    x_shape, padded_shape = x.shape, padded.shape

    def backward_fn(g):
        g_mat = g.transpose(0, 2, 3, 1)
        d_kernel = (g_mat.reshape(-1, c_out).T @ cols.reshape(-1, c_in * kh * kw)).reshape(kernel.shape)
        d_padded = _col2im(g_mat @ w_mat, padded_shape, kh, kw, stride)
        d_x = d_padded[:, :, p:p + x_shape[2], p:p + x_shape[3]]
        grads = [d_x, d_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return record('conv2d', out, inputs, backward_fn)


def conv2d_transpose(x: Tensor,
                     kernel: Tensor,
                     bias: Optional[Tensor] = None,
                     stride: int = 1,
                     padding: int = 0) -> Tensor:
    """
    Adjoint of conv2d with the same kernel layout [Cout,Cin,kh,kw]:
    maps [B,Cout,H',W'] -> [B,Cin,H,W] with H = (H'-1)*stride - 2*padding + kh.
    bias, when given, has Cin entries.
    """
    _check_conv_args('conv2d_transpose', x, kernel, stride, padding, channel_axis_in=0)
    c_out, c_in, kh, kw = kernel.shape
    if bias is not None and bias.shape != (c_in,):
        raise DimensionError(f'conv2d_transpose: bias {bias.shape} does not match {c_in} output channels')
    batch, _, in_h, in_w = x.shape
    p = padding
    padded_shape = (batch, c_in, (in_h - 1) * stride + kh, (in_w - 1) * stride + kw)
    out_h, out_w = padded_shape[2] - 2 * p, padded_shape[3] - 2 * p
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f'conv2d_transpose: padding {p} leaves no output for input {x.shape}')
    x_mat = x.data.transpose(0, 2, 3, 1)
    w_mat = kernel.data.reshape(c_out, c_in * kh * kw)
    out = _col2im(x_mat @ w_mat, padded_shape, kh, kw, stride)[:, :, p:p + out_h, p:p + out_w]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(g):
        g_padded = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _im2col(g_padded, kh, kw, stride)
        d_x = (cols @ w_mat.T).transpose(0, 3, 1, 2)
        d_kernel = (x_mat.reshape(-1, c_out).T @ cols.reshape(-1, c_in * kh * kw)).reshape(kernel.shape)
        grads = [d_x, d_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return record('conv2d_transpose', np.ascontiguousarray(out), inputs, backward_fn)


def constant(data) -> Tensor:
    """
    Tensor that never requires grad.
    """
    return Tensor(data, requires_grad=False)


def parameters_grad_norm(params: List[Tensor]) -> float:
    total = 0.0
    for param in params:
        if param.grad is not None:
            total += float((param.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))
