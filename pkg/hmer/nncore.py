# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

"""
Differentiable operations, parameter storage, the Adam optimizer and a
finite-difference gradient checker.

Every op returns a new ``Tensor`` that remembers its parents and a closure
mapping the output gradient to one gradient per parent. ``Tensor.backward``
replays those closures in reverse topological order.
"""

import contextlib
import hashlib
import json
import logging
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = 'HMERCKPT'
CHECKPOINT_VERSION = 1

MODES = ('train', 'eval')

_state = threading.local()


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


def default_dtype():
    return getattr(_state, 'dtype', np.float32)


def grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors in ``dtype`` inside the block (float64 for gradient checks)."""
    previous = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f'mode must be one of {MODES}, got {mode!r}')
    return mode


def derive_seed(root: int, *names) -> int:
    """Independent stream seed for a subsystem: first 8 bytes of SHA-256 over the root seed and names."""
    digest = hashlib.sha256('/'.join([str(int(root))] + [str(n) for n in names]).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


def derive_rng(root: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))


class Tensor:
    __slots__ = ('data', 'grad', 'requires_grad', 'op', '_parents', '_backward')

    def __init__(self, data, requires_grad: bool = False, op: str = '', parents=(), backward=None):
        array = data if isinstance(data, np.ndarray) else np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(default_dtype())
        elif not isinstance(data, np.ndarray):
            array = array.astype(default_dtype())
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: Tuple['Tensor', ...] = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f'Tensor(shape={self.shape}, op={self.op or "leaf"}, requires_grad={self.requires_grad})'

    def _topological_order(self) -> List['Tensor']:
        order: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        order.reverse()
        return order

    def backward(self, grad: Optional[np.ndarray] = None):
        if grad is None:
            if self.data.size != 1:
                raise GradientError(f'backward() on a non-scalar of shape {self.shape} needs a seed gradient')
            grad = np.ones_like(self.data)
        pending: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in self._topological_order():
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


######################
# Elementwise and    #
# structural ops     #
######################
def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), 'add')


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), 'sub')


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), 'mul')


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    return _result(a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)), 'div')


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), 'neg')


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f'matmul needs operands of rank >= 2, got {a.shape} and {b.shape}')
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'matmul inner dimensions differ: {a.shape} @ {b.shape}')

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward, 'matmul')


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), 'exp')


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), 'log')


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), 'tanh')


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), 'sigmoid')


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return _result(np.where(positive, a.data, 0).astype(a.dtype), (a,), lambda g: (g * positive,), 'relu')


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, 'sum')


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), 'transpose')


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.asarray(a.data[index]), (a,), backward, 'getitem')


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, 'concat')


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward, 'stack')


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), 'softmax')


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _result(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), 'log_softmax')


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), backward, 'embedding')


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f'linear input {x.shape} does not match weight {weight.shape}')
    out = matmul(x, transpose(weight))
    return out if bias is None else out + bias


####################
# Network layers   #
####################
def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f'conv2d expects B×C×H×W input and O×C×k×k kernel, got {x.shape} and {kernel.shape}')
    batch, channels, height, width = x.shape
    out_channels, kernel_channels, k, k_w = kernel.shape
    if kernel_channels != channels:
        raise ShapeError(f'conv2d input {x.shape} has {channels} channels but kernel {kernel.shape} expects {kernel_channels}')
    if k != k_w or k < 1:
        raise ShapeError(f'conv2d needs a square kernel with k >= 1, got {kernel.shape}')
    if stride < 1 or padding < 0:
        raise ValueError(f'conv2d needs stride >= 1 and padding >= 0, got stride={stride} padding={padding}')
    if height + 2 * padding < k or width + 2 * padding < k:
        raise ShapeError(f'conv2d input {x.shape} with padding {padding} is smaller than kernel {k}×{k}')

    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    def window(i, j):
        return (slice(None), slice(None),
                slice(i, i + stride * (out_h - 1) + 1, stride),
                slice(j, j + stride * (out_w - 1) + 1, stride))

    out = np.zeros((batch, out_h, out_w, out_channels), dtype=np.result_type(x.data, kernel.data))
    for i in range(k):
        for j in range(k):
            out += np.tensordot(padded[window(i, j)], kernel.data[:, :, i, j], axes=([1], [1]))

    def backward(g):
        g_t = g.transpose(0, 2, 3, 1)
        g_padded = np.zeros_like(padded)
        g_kernel = np.zeros_like(kernel.data)
        for i in range(k):
            for j in range(k):
                g_kernel[:, :, i, j] = np.tensordot(g_t, padded[window(i, j)], axes=([0, 1, 2], [0, 2, 3]))
                g_padded[window(i, j)] += np.tensordot(g_t, kernel.data[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        if padding:
            g_padded = g_padded[:, :, padding:-padding, padding:-padding]
        return g_padded, g_kernel

    return _result(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (x, kernel), backward, 'conv2d')


def max_pool2d(x: Tensor, k: int = 2, s: int = 2) -> Tensor:
    if k <= 0 or s <= 0:
        raise ValueError(f'max_pool2d needs positive k and s, got k={k} s={s}')
    if x.ndim != 4:
        raise ShapeError(f'max_pool2d expects B×C×H×W input, got {x.shape}')
    batch, channels, height, width = x.shape
    if height < k or width < k:
        raise ShapeError(f'max_pool2d input {x.shape} is smaller than the {k}×{k} window')

    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out_h, out_w = windows.shape[2], windows.shape[3]
    flat = windows.reshape(batch, channels, out_h, out_w, k * k)
    # argmax keeps the first maximum in row-major window order
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def backward(g):
        g_x = np.zeros_like(x.data)
        d_row, d_col = np.divmod(argmax, k)
        rows = np.arange(out_h)[:, None] * s + d_row
        cols = np.arange(out_w)[None, :] * s + d_col
        index = (np.arange(batch)[:, None, None, None], np.arange(channels)[None, :, None, None], rows, cols)
        if s >= k:
            g_x[index] = g
        else:
            np.add.at(g_x, index, g)
        return (g_x,)

    return _result(out, (x,), backward, 'max_pool2d')


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               mode: str = 'train', momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (B, H, W); updates the running arrays in place in train mode."""
    check_mode(mode)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f'batch_norm got input {x.shape}, gamma {gamma.shape}, beta {beta.shape}')
    axes = (0, 2, 3)
    count = x.data.size // x.shape[1]
    if mode == 'train':
        if x.shape[0] < 1:
            raise ShapeError('batch_norm needs at least one sample in train mode')
        batch_mean = x.data.mean(axis=axes)
        batch_var = x.data.var(axis=axes)
        unbiased = batch_var * (count / (count - 1)) if count > 1 else batch_var
        running_mean *= 1.0 - momentum
        running_mean += momentum * batch_mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        batch_mean, batch_var = running_mean, running_var

    def per_channel(v):
        return np.asarray(v, dtype=x.dtype)[None, :, None, None]

    inv_std = per_channel(1.0 / np.sqrt(batch_var + eps))
    normalized = (x.data - per_channel(batch_mean)) * inv_std
    out = per_channel(gamma.data) * normalized + per_channel(beta.data)

    def backward(g):
        g_gamma = (g * normalized).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        g_norm = g * per_channel(gamma.data)
        if mode == 'train':
            g_x = inv_std / count * (count * g_norm
                                     - g_norm.sum(axis=axes, keepdims=True)
                                     - normalized * (g_norm * normalized).sum(axis=axes, keepdims=True))
        else:
            g_x = g_norm * inv_std
        return g_x, g_gamma, g_beta

    return _result(out, (x, gamma, beta), backward, 'batch_norm')


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator) -> Tensor:
    check_mode(mode)
    if not 0 <= p < 1:
        raise ValueError(f'dropout probability must be in [0, 1), got {p}')
    if mode == 'eval' or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return mul(x, Tensor(keep))


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Tuple[Tensor, Tensor]:
    """One LSTM cell update; gate rows of the weights are ordered input, forget, candidate, output."""
    hidden = h_prev.shape[-1]
    if w_ih.shape != (4 * hidden, x.shape[-1]) or w_hh.shape != (4 * hidden, hidden) or bias.shape != (4 * hidden,):
        raise ShapeError(f'lstm_step weights {w_ih.shape}, {w_hh.shape}, {bias.shape} do not fit '
                         f'input {x.shape} and hidden {h_prev.shape}')
    if c_prev.shape != h_prev.shape or x.shape[0] != h_prev.shape[0]:
        raise ShapeError(f'lstm_step state shapes differ: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}')

    gates = linear(x, w_ih) + linear(h_prev, w_hh) + bias
    input_gate = sigmoid(gates[:, 0:hidden])
    forget_gate = sigmoid(gates[:, hidden:2 * hidden])
    candidate = tanh(gates[:, 2 * hidden:3 * hidden])
    output_gate = sigmoid(gates[:, 3 * hidden:4 * hidden])
    cell = forget_gate * c_prev + input_gate * candidate
    return output_gate * tanh(cell), cell


####################
# Parameters       #
####################
def xavier_bound(shape: Sequence[int]) -> float:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    elif len(shape) == 2:
        fan_in, fan_out = shape[1], shape[0]
    else:
        fan_in = fan_out = shape[0]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class ParamStore:
    """
    Named trainable tensors plus non-trainable buffers (batch-norm running statistics).

    Parameters are initialised from ``np.random.default_rng(rng_seed)`` in creation
    order, so two stores built the same way with the same seed are identical.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self._params: 'OrderedDict[str, Tensor]' = OrderedDict()
        self._buffers: 'OrderedDict[str, np.ndarray]' = OrderedDict()

    def add(self, name: str, shape: Sequence[int], init: str = 'xavier') -> Tensor:
        if name in self._params or name in self._buffers:
            raise ValueError(f'parameter {name} already exists')
        shape = tuple(int(d) for d in shape)
        dtype = default_dtype()
        if init == 'xavier':
            bound = xavier_bound(shape)
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == 'normal':
            data = self.rng.normal(0.0, 0.01, size=shape)
        elif init == 'zeros':
            data = np.zeros(shape)
        elif init == 'ones':
            data = np.ones(shape)
        else:
            raise ValueError(f'unknown initialiser {init!r} for {name}')
        tensor = Tensor(data.astype(dtype), requires_grad=True)
        self._params[name] = tensor
        return tensor

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise ValueError(f'buffer {name} already exists')
        self._buffers[name] = np.array(value, dtype=default_dtype())
        return self._buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def buffers(self):
        return self._buffers.items()

    def zero_grad(self):
        for tensor in self._params.values():
            tensor.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def astype(self, dtype):
        """Cast every parameter and buffer in place, keeping tensor identity."""
        for tensor in self._params.values():
            tensor.data = tensor.data.astype(dtype)
            tensor.grad = None
        for name, value in list(self._buffers.items()):
            self._buffers[name] = value.astype(dtype)
        return self

    def arrays(self) -> 'OrderedDict[str, np.ndarray]':
        out = OrderedDict((name, t.data) for name, t in self._params.items())
        out.update((f'buffer:{name}', value) for name, value in self._buffers.items())
        return out

    def load(self, arrays: Mapping[str, np.ndarray]):
        expected = set(self.arrays())
        missing = expected - set(arrays)
        if missing:
            raise ValueError(f'checkpoint lacks {sorted(missing)[0]} (and {len(missing) - 1} more)')
        for name, tensor in self._params.items():
            if arrays[name].shape != tensor.shape:
                raise ShapeError(f'{name}: checkpoint shape {arrays[name].shape} != parameter shape {tensor.shape}')
            tensor.data = np.array(arrays[name], dtype=tensor.dtype)
            tensor.grad = None
        for name, value in self._buffers.items():
            value[...] = arrays[f'buffer:{name}']


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((t.grad.astype(np.float64) ** 2).sum())
                              for _, t in store.items() if t.grad is not None)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for _, tensor in store.items():
            if tensor.grad is not None:
                tensor.grad = tensor.grad * scale
    return total


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_store(cls, store: ParamStore, **kwargs) -> 'AdamState':
        state = cls(**kwargs)
        for name, tensor in store.items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state

    def arrays(self) -> 'OrderedDict[str, np.ndarray]':
        out = OrderedDict()
        for name in self.m:
            out[f'adam.m:{name}'] = self.m[name]
            out[f'adam.v:{name}'] = self.v[name]
        return out

    def load(self, arrays: Mapping[str, np.ndarray], t: int):
        for name in self.m:
            self.m[name] = np.array(arrays[f'adam.m:{name}'])
            self.v[name] = np.array(arrays[f'adam.v:{name}'])
        self.t = t


def adam_step(store: ParamStore, state: AdamState, lr: float):
    for name, tensor in store.items():
        if tensor.grad is None:
            raise GradientError(f'parameter {name} has no gradient; run backward() before adam_step')
        if name not in state.m:
            raise GradientError(f'parameter {name} has no Adam moments')
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, tensor in store.items():
        grad = tensor.grad
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        tensor.data -= update.astype(tensor.dtype)
    store.zero_grad()


####################
# Gradient checks  #
####################
def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    diff = np.abs(analytic - numeric)
    scale = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float((diff / scale).max())


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise GradientError(f'gradient check needs a scalar function, got output of shape {out.shape}')
    return float(out.data.reshape(-1)[0])


def grad_check(fn: Callable[[Tensor], Tensor], input, eps: float = 1e-4) -> float:
    """
    Compare reverse-mode gradients of a scalar ``fn`` against central differences.

    Returns max |analytic - numeric| / max(1e-8, |analytic| + |numeric|) over the
    elements of ``input``.
    """
    x = input if isinstance(input, Tensor) else Tensor(np.asarray(input, dtype=default_dtype()))
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    out = fn(x)
    _scalar(out)
    out.backward()
    analytic = x.grad.astype(np.float64) if x.grad is not None else np.zeros(x.shape)
    numeric = _central_differences(lambda: _scalar(fn(x)), x.data.reshape(-1), eps).reshape(x.shape)
    return relative_error(analytic, numeric)


def _central_differences(evaluate: Callable[[], float], flat: np.ndarray, eps: float,
                         positions: Optional[np.ndarray] = None) -> np.ndarray:
    positions = np.arange(flat.size) if positions is None else positions
    numeric = np.zeros(flat.size)
    with no_grad():
        for i in positions:
            original = flat[i]
            flat[i] = original + eps
            plus = evaluate()
            flat[i] = original - eps
            minus = evaluate()
            flat[i] = original
            numeric[i] = (plus - minus) / (2.0 * eps)
    return numeric


def grad_check_params(loss_fn: Callable[[], Tensor], store: ParamStore, eps: float = 1e-6,
                      max_per_param: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """
    Gradient check of a parameterless loss closure with respect to every parameter in ``store``.

    At most ``max_per_param`` randomly chosen elements of each parameter are perturbed.
    """
    rng = np.random.default_rng(seed)
    store.zero_grad()
    out = loss_fn()
    _scalar(out)
    out.backward()
    errors = {}
    for name, tensor in store.items():
        tensor.data = np.ascontiguousarray(tensor.data)
        flat = tensor.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            positions = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
        analytic = np.zeros(flat.size) if tensor.grad is None else tensor.grad.reshape(-1).astype(np.float64)
        numeric = _central_differences(lambda: _scalar(loss_fn()), flat, eps, positions)
        errors[name] = relative_error(analytic[positions], numeric[positions])
    store.zero_grad()
    return errors


####################
# Checkpoint files #
####################
def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None):
    """
    Write ``arrays`` as little-endian float32 records after a versioned text header.

    Layout: ``HMERCKPT <version>\\n``, one JSON metadata line, the record count line,
    then per record: u32 name length, UTF-8 name, u32 rank, u32 dims, raw data.
    """
    with open(path, 'wb') as handle:
        handle.write(f'{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n'.encode('ascii'))
        handle.write((json.dumps(meta or {}, sort_keys=True) + '\n').encode('utf-8'))
        handle.write(f'{len(arrays)}\n'.encode('ascii'))
        for name, value in arrays.items():
            encoded = name.encode('utf-8')
            value = np.asarray(value)
            handle.write(struct.pack('<I', len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack('<I', value.ndim))
            handle.write(struct.pack(f'<{value.ndim}I', *value.shape))
            handle.write(np.ascontiguousarray(value, dtype='<f4').tobytes())
    logger.debug('wrote %d arrays to %s', len(arrays), path)


def _read_exact(handle, size: int, path, what: str) -> bytes:
    raw = handle.read(size)
    if len(raw) != size:
        raise ValueError(f'{path}: {what} is truncated')
    return raw


def load_arrays(path) -> Tuple['OrderedDict[str, np.ndarray]', dict]:
    with open(path, 'rb') as handle:
        header = handle.readline().decode('ascii').split()
        if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
            raise ValueError(f'{path} is not a checkpoint file')
        if int(header[1]) != CHECKPOINT_VERSION:
            raise ValueError(f'{path} has checkpoint version {header[1]}, expected {CHECKPOINT_VERSION}')
        meta = json.loads(handle.readline().decode('utf-8'))
        count = int(handle.readline().decode('ascii'))
        arrays: 'OrderedDict[str, np.ndarray]' = OrderedDict()
        for index in range(count):
            what = f'record {index}'
            (name_len,) = struct.unpack('<I', _read_exact(handle, 4, path, what))
            name = _read_exact(handle, name_len, path, what).decode('utf-8')
            what = f'record {name}'
            (rank,) = struct.unpack('<I', _read_exact(handle, 4, path, what))
            shape = struct.unpack(f'<{rank}I', _read_exact(handle, 4 * rank, path, what))
            size = int(np.prod(shape)) if rank else 1
            raw = _read_exact(handle, 4 * size, path, what)
            arrays[name] = np.frombuffer(raw, dtype='<f4').astype(np.float32).reshape(shape)
    return arrays, meta
