"""
Tensor Core - dense tensor engine with reverse-mode differentiation

This module provides the numeric primitives the tracker is built from:
- conv2d, batch_norm, max / adaptive-max pooling, relu, bilinear_resize
- linear, softmax_rows, layer_norm, matmul and elementwise algebra
- depthwise cross-correlation and the classification loss
- value_and_grad over a recorded GradGraph
- grad_check (central finite differences)

Tensors hold float32 NumPy arrays (NCHW for rank 4). Operations applied while a
GradGraph is recording are appended to it in execution order; value_and_grad
replays the graph in reverse.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from services.errors import ShapeError

logger = logging.getLogger(__name__)

MAX_RANK = 4

_state = threading.local()


def active_dtype():
    return getattr(_state, 'dtype', np.float32)


def _active_graph() -> Optional['GradGraph']:
    return getattr(_state, 'graph', None)


@contextmanager
def precision(dtype):
    """Evaluate every primitive inside the block in ``dtype`` (used by grad_check)."""
    previous = active_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class Tensor:
    """
    Immutable (from the caller's side) dense array.

    Attributes:
        data: NumPy array in the active precision.
        node: graph node that produced this tensor, if it was recorded.
        requires_grad: True for parameters and for recorded outputs.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        array = np.asarray(data, dtype=active_dtype())
        if array.ndim > MAX_RANK:
            raise ShapeError(f'Tensor rank {array.ndim} exceeds the supported maximum of {MAX_RANK}')
        self.data = array
        self.node: Optional['Node'] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f'Tensor(shape={self.shape}, dtype={self.data.dtype})'

    # Algebra -------------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _wrap(other))

    def __radd__(self, other):
        return Add.apply(_wrap(other), self)

    def __sub__(self, other):
        return Sub.apply(self, _wrap(other))

    def __rsub__(self, other):
        return Sub.apply(_wrap(other), self)

    def __mul__(self, other):
        return Mul.apply(self, _wrap(other))

    def __rmul__(self, other):
        return Mul.apply(_wrap(other), self)

    def __truediv__(self, other):
        return Div.apply(self, _wrap(other))

    def __rtruediv__(self, other):
        return Div.apply(_wrap(other), self)

    def __neg__(self):
        return Mul.apply(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def reshape(self, *shape: int) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> 'Tensor':
        return Transpose.apply(self, axes=axes)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / count)


class Parameter(Tensor):
    """
    Named trainable weight.

    ``grad`` always has the shape of ``data`` and starts at zero. Buffers such as
    batch-norm running statistics are Parameters with ``trainable=False``.
    """

    def __init__(self, name: str, data: ArrayLike, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f'Parameter({self.name!r}, shape={self.shape})'


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class GradGraph:
    """Record of primitive applications, in execution order."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self):
        return len(self.nodes)

    @contextmanager
    def record(self):
        previous = _active_graph()
        _state.graph = self
        try:
            yield self
        finally:
            _state.graph = previous

    def add(self, node: Node) -> Node:
        self.nodes.append(node)
        return node

    def parents(self, tensor: Tensor) -> Tuple[Tensor, ...]:
        return tensor.node.inputs if tensor.node is not None else ()


class Function:
    """
    Base class for differentiable primitives.

    Subclasses implement ``forward`` on NumPy arrays and ``backward`` returning
    one gradient (or None) per tensor input.
    """

    name = 'function'

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError('Forward pass not implemented for this function')

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError('Backward pass not implemented for this function')

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        fn = cls()
        dtype = active_dtype()
        arrays = [t.data.astype(dtype, copy=False) for t in tensors]
        out = Tensor(fn.forward(*arrays, **kwargs))
        graph = _active_graph()
        if graph is not None and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out.node = graph.add(Node(cls.name, tuple(tensors), out, fn.backward))
        return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# =============================================================================
# Elementwise algebra
# =============================================================================

class Add(Function):
    name = 'add'

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = 'sub'

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = 'mul'

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (_unbroadcast(grad * self.b, self.a.shape),
                _unbroadcast(grad * self.a, self.b.shape))


class Div(Function):
    name = 'div'

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (_unbroadcast(grad / self.b, self.a.shape),
                _unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape))


class Minimum(Function):
    name = 'minimum'

    def forward(self, a, b):
        self.take_a = a <= b
        self.shapes = (a.shape, b.shape)
        return np.minimum(a, b)

    def backward(self, grad):
        return (_unbroadcast(grad * self.take_a, self.shapes[0]),
                _unbroadcast(grad * ~self.take_a, self.shapes[1]))


class Exp(Function):
    name = 'exp'

    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Clip(Function):
    name = 'clip'

    def forward(self, x, lower=None, upper=None):
        self.inside = np.ones(x.shape, dtype=bool)
        if lower is not None:
            self.inside &= x >= lower
        if upper is not None:
            self.inside &= x <= upper
        return np.clip(x, lower, upper)

    def backward(self, grad):
        return (grad * self.inside,)


class Relu(Function):
    name = 'relu'

    def forward(self, x):
        self.positive = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        return (grad * self.positive,)


# =============================================================================
# Shape manipulation
# =============================================================================

class Reshape(Function):
    name = 'reshape'

    def forward(self, x, shape=()):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    name = 'transpose'

    def forward(self, x, axes=()):
        self.axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    """Basic (slice / integer) indexing; advanced indexing is not supported."""

    name = 'getitem'

    def forward(self, x, index=None):
        self.in_shape, self.dtype, self.index = x.shape, x.dtype, index
        return x[index]

    def backward(self, grad):
        full = np.zeros(self.in_shape, dtype=grad.dtype)
        full[self.index] = grad
        return (full,)


class Concat(Function):
    name = 'concat'

    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Sum(Function):
    name = 'sum'

    def forward(self, x, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class MatMul(Function):
    name = 'matmul'

    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


# =============================================================================
# Network primitives
# =============================================================================

class Conv2d(Function):
    """Direct cross-correlation (no kernel flip) via strided window views."""

    name = 'conv2d'

    def forward(self, x, weight, *bias, stride=1, padding=0):
        if padding:
            x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        kh, kw = weight.shape[2:]
        windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if bias:
            out = out + bias[0].reshape(1, -1, 1, 1)
        self.padded_shape, self.windows, self.weight = x.shape, windows, weight
        self.stride, self.padding, self.has_bias = stride, padding, bool(bias)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        stride = self.stride
        kh, kw = self.weight.shape[2:]
        out_h, out_w = grad.shape[2:]
        grad_weight = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        columns = np.tensordot(grad, self.weight, axes=([1], [0]))
        grad_input = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_input[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += \
                    columns[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if self.padding:
            p = self.padding
            grad_input = grad_input[:, :, p:-p, p:-p]
        grads = [grad_input, grad_weight]
        if self.has_bias:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)


class BatchNorm(Function):
    name = 'batch_norm'

    def forward(self, x, gamma, beta, running_mean=None, running_var=None,
                eps=1e-5, training=False, momentum=0.1):
        axes = (0,) + tuple(range(2, x.ndim))
        shape = (1, -1) + (1,) * (x.ndim - 2)
        count = x.size // x.shape[1]
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            running_mean[...] = (1 - momentum) * running_mean + momentum * mean
            running_var[...] = (1 - momentum) * running_var + momentum * var * count / max(count - 1, 1)
        else:
            mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        self.x_hat, self.inv_std, self.gamma = x_hat, inv_std.reshape(shape), gamma.reshape(shape)
        self.axes, self.count, self.training = axes, count, training
        return x_hat * self.gamma + beta.reshape(shape)

    def backward(self, grad):
        axes = self.axes
        grad_gamma = (grad * self.x_hat).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_x_hat = grad * self.gamma
        if self.training:
            m = self.count
            grad_input = self.inv_std / m * (
                m * grad_x_hat
                - grad_x_hat.sum(axis=axes, keepdims=True)
                - self.x_hat * (grad_x_hat * self.x_hat).sum(axis=axes, keepdims=True))
        else:
            grad_input = grad_x_hat * self.inv_std
        return grad_input, grad_gamma, grad_beta


class AxisWindowMax(Function):
    """
    Max over windows along one spatial axis.

    Windows are either fixed (kernel, stride) or an explicit list of
    [start, stop) bounds; two applications give separable 2D max pooling.
    """

    name = 'window_max'

    def forward(self, x, axis=2, kernel=None, stride=None, bounds=None):
        moved = np.moveaxis(x, axis, -1)
        self.axis, self.moved_shape = axis, moved.shape
        if bounds is None:
            windows = sliding_window_view(moved, kernel, axis=-1)[..., ::stride, :]
            self.offsets = windows.argmax(axis=-1)
            self.kernel, self.stride = kernel, stride
            out = np.take_along_axis(windows, self.offsets[..., None], axis=-1)[..., 0]
        else:
            self.kernel = None
            positions = []
            for start, stop in bounds:
                positions.append(moved[..., start:stop].argmax(axis=-1) + start)
            self.positions = np.stack(positions, axis=-1)
            out = np.take_along_axis(moved, self.positions, axis=-1)
        return np.ascontiguousarray(np.moveaxis(out, -1, self.axis))

    def backward(self, grad):
        grad = np.moveaxis(grad, self.axis, -1)
        grad_input = np.zeros(self.moved_shape, dtype=grad.dtype)
        if self.kernel is not None:
            count = grad.shape[-1]
            for offset in range(self.kernel):
                hits = self.offsets == offset
                grad_input[..., offset:offset + self.stride * (count - 1) + 1:self.stride] += grad * hits
        else:
            # adaptive windows are disjoint, so every lane receives distinct positions
            np.put_along_axis(grad_input, self.positions, grad, axis=-1)
        return (np.moveaxis(grad_input, -1, self.axis),)


class BilinearResize(Function):
    name = 'bilinear_resize'

    def forward(self, x, target_h=1, target_w=1):
        self.rows = _interpolation_matrix(x.shape[2], target_h).astype(x.dtype)
        self.cols = _interpolation_matrix(x.shape[3], target_w).astype(x.dtype)
        return np.matmul(np.matmul(self.rows, x), self.cols.T)

    def backward(self, grad):
        return (np.matmul(np.matmul(self.rows.T, grad), self.cols),)


class Linear(Function):
    name = 'linear'

    def forward(self, x, weight, *bias):
        self.x, self.weight, self.has_bias = x, weight, bool(bias)
        out = np.matmul(x, weight)
        if bias:
            out = out + bias[0]
        return out

    def backward(self, grad):
        lead = tuple(range(grad.ndim - 1))
        grads = [np.matmul(grad, self.weight.T),
                 np.tensordot(self.x, grad, axes=(lead, lead))]
        if self.has_bias:
            grads.append(grad.sum(axis=lead))
        return tuple(grads)


class SoftmaxRows(Function):
    name = 'softmax_rows'

    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        exps = np.exp(shifted)
        self.out = exps / exps.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class LayerNorm(Function):
    name = 'layer_norm'

    def forward(self, x, gamma, beta, eps=1e-5):
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = (x - mean) * self.inv_std
        self.gamma = gamma
        return self.x_hat * gamma + beta

    def backward(self, grad):
        lead = tuple(range(grad.ndim - 1))
        d = grad.shape[-1]
        grad_x_hat = grad * self.gamma
        grad_input = self.inv_std / d * (
            d * grad_x_hat
            - grad_x_hat.sum(axis=-1, keepdims=True)
            - self.x_hat * (grad_x_hat * self.x_hat).sum(axis=-1, keepdims=True))
        return grad_input, (grad * self.x_hat).sum(axis=lead), grad.sum(axis=lead)


class DepthwiseXCorr(Function):
    """Per-sample, per-channel valid sliding dot product of kernel over search."""

    name = 'depthwise_xcorr'

    def forward(self, search, kernel):
        kh, kw = kernel.shape[2:]
        self.windows = sliding_window_view(search, (kh, kw), axis=(2, 3))
        self.search_shape, self.kernel = search.shape, kernel
        return np.einsum('ncijkl,nckl->ncij', self.windows, kernel, optimize=True)

    def backward(self, grad):
        kh, kw = self.kernel.shape[2:]
        out_h, out_w = grad.shape[2:]
        grad_kernel = np.einsum('ncij,ncijkl->nckl', grad, self.windows, optimize=True)
        grad_search = np.zeros(self.search_shape, dtype=grad.dtype)
        for k in range(kh):
            for l in range(kw):
                grad_search[:, :, k:k + out_h, l:l + out_w] += grad * self.kernel[:, :, k:k + 1, l:l + 1]
        return grad_search, grad_kernel


class BCEWithLogits(Function):
    """Mean binary cross-entropy on logits; labels receive no gradient."""

    name = 'bce_with_logits'

    def forward(self, logits, labels):
        self.logits, self.labels = logits, labels
        losses = np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
        return np.asarray(losses.mean())

    def backward(self, grad):
        scale = grad / self.logits.size
        return scale * (sigmoid(self.logits) - self.labels), None


# =============================================================================
# Functional interface
# =============================================================================

def conv2d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    2D convolution in the cross-correlation convention.

    Args:
        input: [N, Cin, H, W]
        weight: [Cout, Cin, kh, kw]
        bias: [Cout] or None
        stride: step between output samples (>= 1)
        padding: zero padding on every spatial side

    Returns:
        Tensor [N, Cout, H', W'] with H' = floor((H + 2p - kh) / stride) + 1.
    """
    if input.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f'conv2d expects rank-4 input and weight, got {input.shape} and {weight.shape}')
    if input.shape[1] != weight.shape[1]:
        raise ShapeError(
            f'conv2d channel mismatch: input has Cin={input.shape[1]} '
            f'(shape {input.shape}), weight expects Cin={weight.shape[1]} (shape {weight.shape})')
    if stride < 1:
        raise ShapeError(f'conv2d stride must be >= 1, got {stride}')
    kh, kw = weight.shape[2:]
    if kh > input.shape[2] + 2 * padding or kw > input.shape[3] + 2 * padding:
        raise ShapeError(
            f'conv2d kernel {kh}x{kw} exceeds padded input {input.shape[2]}x{input.shape[3]} (padding {padding})')
    tensors = (input, weight) if bias is None else (input, weight, bias)
    return Conv2d.apply(*tensors, stride=stride, padding=padding)


def batch_norm(input: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
               eps: float = 1e-5, training: bool = False, momentum: float = 0.1) -> Tensor:
    """
    Per-channel normalization over every axis except 1.

    In training mode batch statistics are used and the running buffers are
    updated in place with ``momentum`` (unbiased variance); otherwise the
    running statistics are used.
    """
    if eps <= 0:
        raise ShapeError(f'batch_norm eps must be positive, got {eps}')
    channels = input.shape[1]
    for label, tensor in (('gamma', gamma), ('beta', beta), ('running_mean', running_mean),
                          ('running_var', running_var)):
        if tensor.shape != (channels,):
            raise ShapeError(f'batch_norm {label} has shape {tensor.shape}, input has C={channels}')
    return BatchNorm.apply(input, gamma, beta, running_mean=running_mean.data, running_var=running_var.data,
                           eps=eps, training=training, momentum=momentum)


@dataclass(frozen=True)
class MaxFixed:
    kernel: int
    stride: int


@dataclass(frozen=True)
class AdaptiveMax:
    target_h: int
    target_w: int


def adaptive_bounds(length: int, target: int) -> List[Tuple[int, int]]:
    """Floor partition of ``length`` cells into ``target`` contiguous windows."""
    return [((i * length) // target, ((i + 1) * length) // target) for i in range(target)]


def pool(input: Tensor, mode: Union[MaxFixed, AdaptiveMax]) -> Tensor:
    if input.ndim != 4:
        raise ShapeError(f'pool expects [N, C, H, W], got {input.shape}')
    height, width = input.shape[2:]
    if isinstance(mode, AdaptiveMax):
        if mode.target_h < 1 or mode.target_w < 1:
            raise ShapeError(f'adaptive pooling target must be positive, got {mode.target_h}x{mode.target_w}')
        if mode.target_h > height or mode.target_w > width:
            raise ShapeError(
                f'adaptive pooling target {mode.target_h}x{mode.target_w} exceeds input {height}x{width}')
        rows = AxisWindowMax.apply(input, axis=2, bounds=adaptive_bounds(height, mode.target_h))
        return AxisWindowMax.apply(rows, axis=3, bounds=adaptive_bounds(width, mode.target_w))
    if mode.kernel < 1 or mode.stride < 1:
        raise ShapeError(f'max pooling needs positive kernel and stride, got {mode}')
    if mode.kernel > height or mode.kernel > width:
        raise ShapeError(f'max pooling kernel {mode.kernel} exceeds input {height}x{width}')
    rows = AxisWindowMax.apply(input, axis=2, kernel=mode.kernel, stride=mode.stride)
    return AxisWindowMax.apply(rows, axis=3, kernel=mode.kernel, stride=mode.stride)


def max_pool2d(input: Tensor, kernel: int, stride: int) -> Tensor:
    return pool(input, MaxFixed(kernel, stride))


def adaptive_max_pool2d(input: Tensor, target_h: int, target_w: int) -> Tensor:
    return pool(input, AdaptiveMax(target_h, target_w))


def relu(input: Tensor) -> Tensor:
    return Relu.apply(input)


def _interpolation_matrix(source: int, target: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape [target, source]."""
    if target == 1:
        positions = np.array([(source - 1) / 2.0])
    else:
        positions = np.arange(target) * (source - 1) / (target - 1)
    lower = np.clip(np.floor(positions).astype(int), 0, source - 1)
    upper = np.minimum(lower + 1, source - 1)
    frac = positions - lower
    matrix = np.zeros((target, source), dtype=np.float64)
    rows = np.arange(target)
    np.add.at(matrix, (rows, lower), 1.0 - frac)
    np.add.at(matrix, (rows, upper), frac)
    return matrix


def bilinear_resize(input: Tensor, target_h: int, target_w: int) -> Tensor:
    if input.ndim != 4:
        raise ShapeError(f'bilinear_resize expects [N, C, H, W], got {input.shape}')
    if target_h < 1 or target_w < 1:
        raise ShapeError(f'bilinear_resize target must be >= 1, got {target_h}x{target_w}')
    return BilinearResize.apply(input, target_h=target_h, target_w=target_w)


def linear(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``input @ weight + bias`` over the last axis ([..., Din] -> [..., Dout])."""
    if weight.ndim != 2 or input.shape[-1] != weight.shape[0]:
        raise ShapeError(f'linear dimension mismatch: input {input.shape} vs weight {weight.shape}')
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f'linear bias has shape {bias.shape}, expected ({weight.shape[1]},)')
    tensors = (input, weight) if bias is None else (input, weight, bias)
    return Linear.apply(*tensors)


def softmax_rows(input: Tensor) -> Tensor:
    return SoftmaxRows.apply(input)


def layer_norm(input: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ShapeError(f'layer_norm eps must be positive, got {eps}')
    if gamma.shape != (input.shape[-1],) or beta.shape != (input.shape[-1],):
        raise ShapeError(f'layer_norm affine shapes {gamma.shape}/{beta.shape} do not match D={input.shape[-1]}')
    return LayerNorm.apply(input, gamma, beta, eps=eps)


def matmul(a: Tensor, b) -> Tensor:
    b = _wrap(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'matmul inner extents differ: {a.shape} @ {b.shape}')
    return MatMul.apply(a, b)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def minimum(a, b) -> Tensor:
    return Minimum.apply(_wrap(a), _wrap(b))


def exp(input: Tensor) -> Tensor:
    return Exp.apply(input)


def clip(input: Tensor, lower: Optional[float] = None, upper: Optional[float] = None) -> Tensor:
    return Clip.apply(input, lower=lower, upper=upper)


def depthwise_correlation(search: Tensor, kernel: Tensor) -> Tensor:
    return DepthwiseXCorr.apply(search, kernel)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    return BCEWithLogits.apply(logits, _wrap(labels))


def sigmoid(values: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function on plain arrays."""
    decay = np.exp(-np.abs(values))
    return np.where(values >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay))


# =============================================================================
# Differentiation
# =============================================================================

def value_and_grad(graph: GradGraph, loss: Tensor, params: Sequence[Tensor]) -> Tuple[float, List[np.ndarray]]:
    """
    Reverse-mode accumulation from a scalar loss.

    Args:
        graph: the graph that recorded the forward pass
        loss: scalar tensor produced inside ``graph``
        params: tensors to differentiate with respect to

    Returns:
        (loss value, gradients in ``params`` order). Tensors not on a path to the
        loss get a zero gradient. Parameter.grad is overwritten with the result.
    """
    if loss.size != 1:
        raise ShapeError(f'value_and_grad needs a scalar loss, got shape {loss.shape}')
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        upstream = grads.get(id(node.output))
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grad if key not in grads else grads[key] + grad

    results = []
    for param in params:
        grad = grads.get(id(param))
        grad = np.zeros_like(param.data) if grad is None else grad.astype(param.data.dtype).reshape(param.shape)
        if isinstance(param, Parameter):
            param.grad = grad
        results.append(grad)
    return float(loss.data.reshape(-1)[0]), results


def grad_check(fn: Callable[[Tensor], Tensor], input: Tensor, step: float = 1e-4,
               max_checks: Optional[int] = None, seed: int = 0) -> float:
    """
    Compare reverse-mode gradients of ``fn`` against central differences.

    Vector-valued outputs are reduced with a fixed random cotangent. Both passes
    run in float64. Relative error per coordinate uses the denominator
    max(|a|, |b|, 1e-6); the worst coordinate is returned.

    Args:
        fn: differentiable map built from this module's primitives
        input: point to check at
        step: finite-difference half-width (> 0)
        max_checks: check at most this many coordinates (chosen with ``seed``)
        seed: seed for the cotangent and the coordinate sample

    Returns:
        Maximum relative error over the checked coordinates.
    """
    if step <= 0:
        raise ValueError(f'grad_check step must be positive, got {step}')
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        origin = np.array(input.data, dtype=np.float64)
        point = Parameter('grad_check.input', origin.copy())
        graph = GradGraph()
        with graph.record():
            output = fn(point)
            cotangent = rng.standard_normal(output.shape)
            loss = (output * Tensor(cotangent)).sum()
        _, (analytic,) = value_and_grad(graph, loss, [point])

        def evaluate(values: np.ndarray) -> float:
            return float(np.sum(fn(Tensor(values.reshape(origin.shape))).data * cotangent))

        flat = origin.reshape(-1)
        analytic = analytic.reshape(-1)
        coords = np.arange(flat.size)
        if max_checks is not None and max_checks < flat.size:
            coords = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        worst = 0.0
        for k in coords:
            plus, minus = flat.copy(), flat.copy()
            plus[k] += step
            minus[k] -= step
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * step)
            error = abs(analytic[k] - numeric) / max(abs(analytic[k]), abs(numeric), 1e-6)
            worst = max(worst, error)
    logger.debug(f'grad_check: {len(coords)} coordinates, max relative error {worst:.3e}')
    return worst
