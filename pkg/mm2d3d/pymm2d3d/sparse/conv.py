"""
Gather-scatter sparse convolution and its adjoint upsample.
"""

# python
from typing import Optional

import numpy as np

# pymm2d3d
from ..autodiff import Tensor, record
from ..errors import ConsistencyError, DimensionError, UsageError
from .rulebook import Rulebook, build_rulebook
from .voxel import SparseTensor


def _check_rulebook(rulebook: Rulebook, num_inputs: int, num_outputs: int) -> None:
    if rulebook.num_inputs != num_inputs:
        raise ConsistencyError(
            f'Stale rulebook: built for {rulebook.num_inputs} input rows, tensor has {num_inputs}')
    for in_rows, out_rows in rulebook.pairs:
        if in_rows.size == 0:
            continue
        if in_rows.min() < 0 or in_rows.max() >= num_inputs:
            raise ConsistencyError('Stale rulebook: input row out of range')
        if out_rows.min() < 0 or out_rows.max() >= num_outputs:
            raise ConsistencyError('Stale rulebook: output row out of range')


def _check_weights(op: str, weights: Tensor, rulebook: Rulebook, channels_in: int) -> None:
    if weights.ndim != 3 or weights.shape[0] != rulebook.kernel_volume:
        raise DimensionError(
            f'{op}: weights must be [{rulebook.kernel_volume}, Cin, Cout], got {weights.shape}')
    if weights.shape[1] != channels_in:
        raise DimensionError(f'{op}: weights expect {weights.shape[1]} input channels, got {channels_in}')


def _gather_scatter(op: str,
                    features: Tensor,
                    weights: Tensor,
                    bias: Optional[Tensor],
                    pairs,
                    num_outputs: int) -> Tensor:
    """
    out[dst] += src[from] @ W[k] for every offset k and pair (from, dst).

    Offsets are visited in order; the per-offset destination rows are unique.
    """
    src, w = features.data, weights.data
    out = np.zeros((num_outputs, w.shape[2]), dtype=src.dtype)
    for k, (from_rows, dst_rows) in enumerate(pairs):
        if from_rows.size:
            out[dst_rows] += src[from_rows] @ w[k]
    if bias is not None:
        out += bias.data
    inputs = (features, weights) if bias is None else (features, weights, bias)

    def backward_fn(g):
        d_src = np.zeros_like(src)
        d_w = np.zeros_like(w)
        for k, (from_rows, dst_rows) in enumerate(pairs):
            if from_rows.size == 0:
                continue
            g_k = g[dst_rows]
            d_src[from_rows] += g_k @ w[k].T
            d_w[k] = src[from_rows].T @ g_k
        grads = [d_src, d_w]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record(op, out, inputs, backward_fn)


def sparse_conv(sparse: SparseTensor,
                weights: Tensor,
                rulebook: Rulebook,
                bias: Optional[Tensor] = None,
                output: Optional[SparseTensor] = None) -> SparseTensor:
    """
    out[o] = sum over pairs (i -> o, offset d) of W[d]^T in[i].

    Args:
        sparse: input with features [Nin, Cin]
        weights: [K, Cin, Cout] with K the rulebook's kernel volume
        rulebook: as returned by build_rulebook(sparse, ...)
        bias: optional [Cout]
        output: output skeleton, defaults to the one recorded on the rulebook
    Return:
        output skeleton carrying the new features
    """
    if sparse.features is None:
        raise UsageError('sparse_conv: input has no features')
    output = rulebook.output if output is None else output
    if output is None:
        raise UsageError('sparse_conv: rulebook carries no output skeleton')
    _check_rulebook(rulebook, sparse.num_active, output.num_active)
    _check_weights('sparse_conv', weights, rulebook, sparse.num_channels)
    if bias is not None and bias.shape != (weights.shape[2],):
        raise DimensionError(f'sparse_conv: bias {bias.shape} does not match {weights.shape[2]} channels')
    features = _gather_scatter('sparse_conv', sparse.features, weights, bias,
                               rulebook.pairs, output.num_active)
    return output.with_features(features)


def submanifold_conv(sparse: SparseTensor,
                     weights: Tensor,
                     bias: Optional[Tensor] = None,
                     rulebook: Optional[Rulebook] = None) -> SparseTensor:
    """
    Stride-1 submanifold convolution; builds the rulebook unless one is given.
    """
    if rulebook is None:
        extent = round(weights.shape[0] ** (1.0 / 3.0))
        rulebook, _ = build_rulebook(sparse, kernel_extent=extent, stride=1, submanifold=True)
    return sparse_conv(sparse, weights, rulebook, bias)


def strided_conv(sparse: SparseTensor,
                 weights: Tensor,
                 bias: Optional[Tensor] = None) -> SparseTensor:
    """
    Stride-2 downsample with a 2x2x2 kernel. The result retains the finer
    skeleton for sparse_upsample.
    """
    rulebook, _ = build_rulebook(sparse, stride=2)
    return sparse_conv(sparse, weights, rulebook, bias)


def sparse_upsample(sparse: SparseTensor,
                    finer: Optional[SparseTensor],
                    weights: Tensor,
                    bias: Optional[Tensor] = None) -> SparseTensor:
    """
    Adjoint pairing of the stride-2 convolution that produced `sparse`:
    fine[i] += coarse[o] @ W[d] for every retained pair (i -> o, offset d).

    Output coords are exactly the retained finer coords, so the result can be
    concatenated with the encoder skip of that level.

    Args:
        sparse: coarse level produced by a stride-2 convolution
        finer: the finer skeleton; None uses the retained one
        weights: [8, Ccoarse, Cfine]
    """
    rulebook = sparse.down_rulebook
    if rulebook is None or sparse.finer is None:
        raise UsageError('sparse_upsample: no finer skeleton retained, the input did not come from a stride-2 convolution')
    if sparse.features is None:
        raise UsageError('sparse_upsample: input has no features')
    target = sparse.finer if finer is None else finer
    if target.num_active != rulebook.num_inputs:
        raise ConsistencyError(
            f'sparse_upsample: finer skeleton has {target.num_active} voxels, the retained rulebook {rulebook.num_inputs}')
    _check_rulebook(rulebook, rulebook.num_inputs, sparse.num_active)
    _check_weights('sparse_upsample', weights, rulebook, sparse.num_channels)
    if bias is not None and bias.shape != (weights.shape[2],):
        raise DimensionError(f'sparse_upsample: bias {bias.shape} does not match {weights.shape[2]} channels')
    reversed_pairs = [(out_rows, in_rows) for in_rows, out_rows in rulebook.pairs]
    features = _gather_scatter('sparse_upsample', sparse.features, weights, bias,
                               reversed_pairs, target.num_active)
    return target.with_features(features)
