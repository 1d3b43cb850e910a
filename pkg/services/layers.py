"""
Layers - parameter-holding building blocks over the tensor core.

Every layer owns uniquely named Parameters ("backbone.conv1.weight", ...).
Initialization draws from a caller-supplied numpy Generator so that a model
built from the same seed is bit-identical.
"""

import math
from typing import Dict, Iterator, List

import numpy as np

from services import tensor_core as tc
from services.errors import ShapeError, WeightsFormatError
from services.tensor_core import Parameter, Tensor


class Module:
    """
    Base class for layers and models.

    Parameters and sub-modules are discovered from instance attributes in
    assignment order (lists of modules are walked too).
    """

    def __init__(self, name: str):
        self.name = name
        self.training = False

    def _children(self) -> Iterator[object]:
        for value in vars(self).values():
            if isinstance(value, (Parameter, Module)):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, (Parameter, Module)):
                        yield item

    def state(self) -> List[Parameter]:
        """All Parameters, trainable weights and buffers alike."""
        found = []
        for child in self._children():
            if isinstance(child, Parameter):
                found.append(child)
            else:
                found.extend(child.state())
        return found

    def parameters(self) -> List[Parameter]:
        return [p for p in self.state() if p.trainable]

    def named_state(self) -> Dict[str, Parameter]:
        named: Dict[str, Parameter] = {}
        for param in self.state():
            if param.name in named:
                raise ShapeError(f'Duplicate parameter name {param.name!r}')
            named[param.name] = param
        return named

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_state().items()}

    def load_state_dict(self, weights: Dict[str, np.ndarray], strict: bool = True):
        named = self.named_state()
        if strict:
            missing = sorted(set(named) - set(weights))
            unexpected = sorted(set(weights) - set(named))
            if missing or unexpected:
                raise WeightsFormatError(f'Weights do not match the model: missing={missing} unexpected={unexpected}')
        for name, param in named.items():
            if name not in weights:
                continue
            value = np.asarray(weights[name], dtype=np.float32)
            if value.shape != param.shape:
                raise WeightsFormatError(f'{name}: stored shape {value.shape}, model expects {param.shape}')
            param.data = value.copy()

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def train(self, mode: bool = True) -> 'Module':
        self.training = mode
        for child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self) -> 'Module':
        return self.train(False)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__(name)
        fan_in = in_channels * kernel * kernel
        self.stride, self.padding = stride, padding
        self.weight = Parameter(f'{name}.weight',
                                kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        self.bias = None
        if bias:
            bound = 1.0 / math.sqrt(fan_in)
            self.bias = Parameter(f'{name}.bias', rng.uniform(-bound, bound, size=out_channels).astype(np.float32))

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, name: str, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(name)
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(f'{name}.gamma', np.ones(channels, dtype=np.float32))
        self.beta = Parameter(f'{name}.beta', np.zeros(channels, dtype=np.float32))
        self.running_mean = Parameter(f'{name}.running_mean', np.zeros(channels, dtype=np.float32), trainable=False)
        self.running_var = Parameter(f'{name}.running_var', np.ones(channels, dtype=np.float32), trainable=False)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             eps=self.eps, training=self.training, momentum=self.momentum)


class Linear(Module):
    """Weight stored as [Din, Dout] so that y = x @ W + b."""

    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__(name)
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(f'{name}.weight',
                                rng.uniform(-bound, bound, size=(in_features, out_features)).astype(np.float32))
        self.bias = None
        if bias:
            self.bias = Parameter(f'{name}.bias', rng.uniform(-bound, bound, size=out_features).astype(np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, name: str, dim: int, eps: float = 1e-5):
        super().__init__(name)
        self.eps = eps
        self.gamma = Parameter(f'{name}.gamma', np.ones(dim, dtype=np.float32))
        self.beta = Parameter(f'{name}.beta', np.zeros(dim, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class CNR(Module):
    """1x1 Conv -> batch Norm -> ReLU; the conv has no bias because the norm cancels it."""

    def __init__(self, name: str, in_channels: int, out_channels: int, rng: np.random.Generator,
                 eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(name)
        self.conv = Conv2d(f'{name}.conv', in_channels, out_channels, 1, rng, bias=False)
        self.norm = BatchNorm2d(f'{name}.norm', out_channels, eps=eps, momentum=momentum)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.relu(self.norm(self.conv(x)))
