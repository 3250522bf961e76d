# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

"""
Residual convolutional encoder.

A stride-1 ResNet-18 layout: a 3x3 stem, four stages of two basic blocks, and a
2x2 max pool after the stem and after every stage, so each spatial dimension
shrinks by exactly 32. Parameters live under the ``encoder.`` prefix.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .nncore import (ParamStore, ShapeError, Tensor, batch_norm, check_mode, conv2d, dropout, max_pool2d,
                     relu, reshape, transpose)

log = logging.getLogger(__name__)

STEM_ORDERS = ('table', 'conventional')


@dataclass
class EncoderConfig:
    in_channels: int = 1
    stem_channels: int = 64
    stage_channels: Tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: int = 2
    stage_dropout: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.3)
    pool_kernel: int = 2
    pool_stride: int = 2
    # table: conv -> pool -> BN -> ReLU; conventional: conv -> BN -> ReLU -> pool
    stem_order: str = 'table'
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_dropout = tuple(float(p) for p in self.stage_dropout)
        if len(self.stage_channels) != len(self.stage_dropout):
            raise ValueError(f'{len(self.stage_channels)} stages but {len(self.stage_dropout)} dropout values')
        if min((self.in_channels, self.stem_channels) + self.stage_channels) < 1 or self.blocks_per_stage < 1:
            raise ValueError('channel counts and blocks_per_stage must be positive')
        if any(not 0 <= p < 1 for p in self.stage_dropout):
            raise ValueError(f'stage dropout must lie in [0, 1), got {self.stage_dropout}')
        if self.stem_order not in STEM_ORDERS:
            raise ValueError(f'stem_order must be one of {STEM_ORDERS}, got {self.stem_order!r}')

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def downsample(self) -> int:
        return self.pool_stride ** (len(self.stage_channels) + 1)


####################
# Layers           #
####################
class Conv2d:
    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 kernel: int, padding: int):
        self.name = name
        self.stride = 1
        self.padding = padding
        self.weight = store.add(f'{name}.weight', (out_channels, in_channels, kernel, kernel))

    def __call__(self, x: Tensor, mode: str, rng) -> Tensor:
        return conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d:
    def __init__(self, store: ParamStore, name: str, channels: int, momentum: float, eps: float):
        self.store = store
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = store.add(f'{name}.gamma', (channels,), init='ones')
        self.beta = store.add(f'{name}.beta', (channels,), init='zeros')
        store.add_buffer(f'{name}.running_mean', np.zeros(channels))
        store.add_buffer(f'{name}.running_var', np.ones(channels))

    def __call__(self, x: Tensor, mode: str, rng) -> Tensor:
        # buffers are rebound by ParamStore.astype, so look them up per call
        return batch_norm(x, self.gamma, self.beta,
                          self.store.buffer(f'{self.name}.running_mean'),
                          self.store.buffer(f'{self.name}.running_var'),
                          mode, self.momentum, self.eps)


class ReLU:
    def __call__(self, x: Tensor, mode: str, rng) -> Tensor:
        return relu(x)


class MaxPool2d:
    def __init__(self, k: int, s: int):
        self.k = k
        self.s = s

    def __call__(self, x: Tensor, mode: str, rng) -> Tensor:
        return max_pool2d(x, self.k, self.s)


class Dropout:
    def __init__(self, p: float):
        self.p = p

    def __call__(self, x: Tensor, mode: str, rng) -> Tensor:
        if mode == 'train' and self.p > 0 and rng is None:
            raise ValueError('train-mode dropout needs an rng')
        return dropout(x, self.p, mode, rng)


class BasicBlock:
    """conv-BN-ReLU-conv-BN plus shortcut, then ReLU; a 1x1 projection shortcut bridges channel changes."""

    def __init__(self, store: ParamStore, name: str, in_channels: int, channels: int, cfg: EncoderConfig,
                 project: Optional[bool] = None):
        if project is None:
            project = in_channels != channels
        if in_channels != channels and not project:
            raise ShapeError(f'{name}: {in_channels} input channels differ from {channels} block channels '
                             f'and no projection shortcut is configured')
        self.name = name
        self.conv1 = Conv2d(store, f'{name}.conv1', in_channels, channels, 3, 1)
        self.bn1 = BatchNorm2d(store, f'{name}.bn1', channels, cfg.bn_momentum, cfg.bn_eps)
        self.conv2 = Conv2d(store, f'{name}.conv2', channels, channels, 3, 1)
        self.bn2 = BatchNorm2d(store, f'{name}.bn2', channels, cfg.bn_momentum, cfg.bn_eps)
        self.shortcut: List = []
        if project:
            self.shortcut = [Conv2d(store, f'{name}.shortcut', in_channels, channels, 1, 0),
                             BatchNorm2d(store, f'{name}.shortcut_bn', channels, cfg.bn_momentum, cfg.bn_eps)]

    def convolutions(self) -> List[Conv2d]:
        return [self.conv1, self.conv2] + [layer for layer in self.shortcut if isinstance(layer, Conv2d)]

    def __call__(self, x: Tensor, mode: str, rng) -> Tensor:
        out = relu(self.bn1(self.conv1(x, mode, rng), mode, rng))
        out = self.bn2(self.conv2(out, mode, rng), mode, rng)
        residual = x
        for layer in self.shortcut:
            residual = layer(residual, mode, rng)
        return relu(out + residual)


####################
# Feature grid     #
####################
@dataclass
class FeatureGrid:
    features: Tensor  # B x C x H' x W'

    @property
    def batch(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def height(self) -> int:
        return self.features.shape[2]

    @property
    def width(self) -> int:
        return self.features.shape[3]

    @property
    def length(self) -> int:
        return self.height * self.width

    def flatten(self) -> Tensor:
        """B x L x C with column-major location order: l = col * H' + row."""
        batch, channels, height, width = self.features.shape
        return reshape(transpose(self.features, (0, 3, 2, 1)), (batch, width * height, channels))

    def location(self, l: int) -> Tuple[int, int]:
        return l % self.height, l // self.height

    @staticmethod
    def unflatten(flat: Tensor, height: int, width: int) -> 'FeatureGrid':
        batch, length, channels = flat.shape
        if length != height * width:
            raise ShapeError(f'cannot unflatten {length} locations into a {height}x{width} grid')
        return FeatureGrid(transpose(reshape(flat, (batch, width, height, channels)), (0, 3, 2, 1)))


####################
# Encoder          #
####################
class Encoder:
    def __init__(self, store: ParamStore, cfg: EncoderConfig, canvas: Optional[Tuple[int, int]] = None):
        self.cfg = cfg
        self.canvas = canvas
        if canvas is not None and (canvas[0] % cfg.downsample or canvas[1] % cfg.downsample):
            raise ShapeError(f'canvas {canvas[0]}x{canvas[1]} is not a multiple of {cfg.downsample}')

        stem = Conv2d(store, 'encoder.stem.conv', cfg.in_channels, cfg.stem_channels, 3, 1)
        stem_bn = BatchNorm2d(store, 'encoder.stem.bn', cfg.stem_channels, cfg.bn_momentum, cfg.bn_eps)
        pool = MaxPool2d(cfg.pool_kernel, cfg.pool_stride)
        if cfg.stem_order == 'table':
            self.layers: List = [stem, pool, stem_bn, ReLU()]
        else:
            self.layers = [stem, stem_bn, ReLU(), pool]

        channels = cfg.stem_channels
        for stage, (width, p) in enumerate(zip(cfg.stage_channels, cfg.stage_dropout), start=1):
            for block in range(cfg.blocks_per_stage):
                self.layers.append(BasicBlock(store, f'encoder.stage{stage}.block{block}', channels, width, cfg))
                channels = width
            self.layers.append(MaxPool2d(cfg.pool_kernel, cfg.pool_stride))
            self.layers.append(Dropout(p))

    def convolutions(self) -> List[Conv2d]:
        convs = []
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                convs.append(layer)
            elif isinstance(layer, BasicBlock):
                convs.extend(layer.convolutions())
        return convs

    def pools(self) -> List[MaxPool2d]:
        return [layer for layer in self.layers if isinstance(layer, MaxPool2d)]

    def dropout_probabilities(self) -> Tuple[float, ...]:
        return tuple(layer.p for layer in self.layers if isinstance(layer, Dropout))

    def output_shape(self, height: int, width: int) -> Tuple[int, int, int]:
        factor = self.cfg.downsample
        return height // factor, width // factor, self.cfg.out_channels

    def __call__(self, x: Tensor, mode: str = 'eval', rng: Optional[np.random.Generator] = None) -> Tensor:
        check_mode(mode)
        for layer in self.layers:
            x = layer(x, mode, rng)
        return x

    def encode(self, batch, mode: str = 'eval', rng: Optional[np.random.Generator] = None) -> FeatureGrid:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f'encoder expects B x {self.cfg.in_channels} x H x W input, got {x.shape}')
        height, width = x.shape[2:]
        if self.canvas is not None and (height, width) != tuple(self.canvas):
            raise ShapeError(f'encoder expects B x {self.cfg.in_channels} x {self.canvas[0]} x {self.canvas[1]} '
                             f'input, got {x.shape}')
        factor = self.cfg.downsample
        if height < factor or width < factor or height % factor or width % factor:
            raise ShapeError(f'input spatial dims {height}x{width} must be positive multiples of {factor}')
        return FeatureGrid(self(x, mode, rng))
