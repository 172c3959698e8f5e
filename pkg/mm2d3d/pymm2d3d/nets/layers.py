"""
Parameter containers and the layers the branches are built from.
"""

# python
from typing import Dict, Iterator, List, Tuple

import numpy as np

# pymm2d3d
from ..autodiff import Tensor, conv2d, conv2d_transpose, linear, relu
from ..errors import FormatError
from ..sparse import SparseTensor, sparse_conv, sparse_upsample, build_rulebook


class Module():
    """
    Base class: parameters are the Tensor attributes that require grad, in
    attribute definition order, followed by those of sub-modules (also in
    definition order, lists of modules included).
    """

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f'{prefix}{name}.')
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f'{prefix}{name}.{i}.')

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Copy values into the existing parameters; names and shapes must match exactly.
        """
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise FormatError(f'Checkpoint does not match the model: missing {missing}, unexpected {unexpected}')
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise FormatError(f'Checkpoint tensor <{name}> has shape {value.shape}, model expects {param.shape}')
            param.data[...] = value


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):

    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int) -> None:
        self.weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_out, fan_in)), requires_grad=True)
        self.bias = zeros(fan_out)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    """
    k x k convolution with 'same' padding at stride 1, halving at stride 2.
    """

    def __init__(self, rng, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1) -> None:
        self.kernel = he_normal(rng, (out_channels, in_channels, kernel, kernel), in_channels * kernel * kernel)
        self.bias = zeros(out_channels)
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """
    2 x 2 transposed convolution at stride 2: doubles the resolution.
    """

    def __init__(self, rng, in_channels: int, out_channels: int) -> None:
        self.kernel = he_normal(rng, (in_channels, out_channels, 2, 2), in_channels)
        self.bias = zeros(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_transpose(x, self.kernel, self.bias, stride=2)


class SparseConv(Module):
    """
    Submanifold 3 x 3 x 3 convolution followed by ReLU.
    """

    def __init__(self, rng, in_channels: int, out_channels: int) -> None:
        self.weights = he_normal(rng, (27, in_channels, out_channels), 27 * in_channels)
        self.bias = zeros(out_channels)

    def __call__(self, x: SparseTensor, rulebook=None) -> SparseTensor:
        if rulebook is None:
            rulebook, _ = build_rulebook(x)
        out = sparse_conv(x, self.weights, rulebook, self.bias)
        return out.with_features(relu(out.features))


class SparseDown(Module):
    """
    Stride-2 2 x 2 x 2 convolution followed by ReLU.
    """

    def __init__(self, rng, in_channels: int, out_channels: int) -> None:
        self.weights = he_normal(rng, (8, in_channels, out_channels), 8 * in_channels)
        self.bias = zeros(out_channels)

    def __call__(self, x: SparseTensor) -> SparseTensor:
        rulebook, _ = build_rulebook(x, stride=2)
        out = sparse_conv(x, self.weights, rulebook, self.bias)
        return out.with_features(relu(out.features))


class SparseUp(Module):
    """
    Adjoint of SparseDown onto the retained finer level, followed by ReLU.
    """

    def __init__(self, rng, in_channels: int, out_channels: int) -> None:
        self.weights = he_normal(rng, (8, in_channels, out_channels), in_channels)
        self.bias = zeros(out_channels)

    def __call__(self, x: SparseTensor) -> SparseTensor:
        out = sparse_upsample(x, None, self.weights, self.bias)
        return out.with_features(relu(out.features))
