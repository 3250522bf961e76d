# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

"""
Attention decoder with coverage, position embeddings and drop attention.

One step:
    h_t, cell_t = LSTM([E_d(y_{t-1}); c'_{t-1}], h_{t-1}, cell_{t-1})
    e_l   = W_e tanh(W_h h_t + W_f f_l + W_q q_l + W_s s_l)
    alpha = softmax(e)
    c_t   = sum_l alpha_l f'_l          c'_t = sum_l alpha_l (f'_l + q_l)
    p     = softmax(W_o [c_t; h_t] + b_o)
    S    += alpha

f'_l is the drop-attention output in train mode and f_l otherwise. Locations
are flattened column-major, so q_l = E_ph[l // H'] + E_pv[l % H'].
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .dataio import EOS, SOS, Vocabulary
from .encoder import FeatureGrid
from .nncore import (ParamStore, ShapeError, Tensor, check_mode, concat, conv2d, embedding, getitem, linear,
                     log_softmax, lstm_step, matmul, no_grad, reshape, softmax, tanh, transpose)

log = logging.getLogger(__name__)

COVERAGE_MODES = ('sum', 'conv')


@dataclass
class DecoderConfig:
    hidden_dim: int = 256
    embed_dim: int = 256
    attn_dim: int = 512
    max_grid_h: int = 8
    max_grid_w: int = 32
    coverage_mode: str = 'sum'
    coverage_kernel: int = 5
    coverage_channels: int = 32

    def __post_init__(self):
        if min(self.hidden_dim, self.embed_dim, self.attn_dim, self.max_grid_h, self.max_grid_w) < 1:
            raise ValueError('decoder dimensions and grid extents must be positive')
        if self.coverage_mode not in COVERAGE_MODES:
            raise ValueError(f'coverage_mode must be one of {COVERAGE_MODES}, got {self.coverage_mode!r}')
        if self.coverage_kernel < 1 or self.coverage_kernel % 2 == 0 or self.coverage_channels < 1:
            raise ValueError('coverage_kernel must be odd and positive, coverage_channels positive')


@dataclass
class DropAttnConfig:
    gamma: float = 0.1
    # probabilities of r = 1, i.e. of keeping the feature untouched
    p_peak: float = 0.8
    p_spot: float = 0.4
    enabled: bool = True

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError(f'gamma must be in [0, 1], got {self.gamma}')
        if not (0 <= self.p_peak <= 1 and 0 <= self.p_spot <= 1):
            raise ValueError(f'p_peak and p_spot must be in [0, 1], got {self.p_peak}, {self.p_spot}')


@dataclass
class Memory:
    """Per-image quantities shared by every decoding step."""
    features: Tensor   # B x L x C
    positions: Tensor  # L x C
    keys: Tensor       # B x L x A, W_f f_l + W_q q_l
    grid: Tuple[int, int]

    @property
    def length(self) -> int:
        return self.features.shape[1]


@dataclass
class DecoderState:
    h: Tensor
    cell: Tensor
    coverage: Tensor  # B x L
    context: Tensor   # c'_{t-1}, B x C
    t: int = 0


@dataclass
class StepOutput:
    log_probs: Tensor  # B x V
    alpha: Tensor      # B x L
    state: DecoderState

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


@dataclass
class AttentionRecord:
    grid: Tuple[int, int]
    tokens: List[str] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    alphas: List[np.ndarray] = field(default_factory=list)
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.tokens)

    def append(self, token: str, log_prob: float, alpha: np.ndarray):
        self.tokens.append(token)
        self.log_probs.append(float(log_prob))
        self.alphas.append(np.asarray(alpha, dtype=np.float64).copy())

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write(f'# grid={self.grid[0]}x{self.grid[1]} truncated={int(self.truncated)}\n')
            for token, log_prob, alpha in zip(self.tokens, self.log_probs, self.alphas):
                values = ','.join(f'{v:.9g}' for v in alpha)
                handle.write(f'{token}\t{log_prob:.9g}\t{values}\n')

    @classmethod
    def load(cls, path) -> 'AttentionRecord':
        record = None
        with open(path, 'r', encoding='utf-8') as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.rstrip('\n')
                if line.startswith('#'):
                    header = dict(item.split('=', 1) for item in line[1:].split())
                    height, width = header['grid'].split('x')
                    record = cls((int(height), int(width)), truncated=header.get('truncated') == '1')
                    continue
                if not line:
                    continue
                if record is None:
                    raise ValueError(f'{path}:{lineno}: attention record lacks its "# grid=HxW" header')
                token, log_prob, values = line.split('\t')
                record.append(token, float(log_prob), np.array([float(v) for v in values.split(',')]))
        if record is None:
            raise ValueError(f'{path}: empty attention record')
        return record


####################
# Pure step pieces #
####################
def contexts(alpha: Tensor, features: Tensor, positions: Tensor) -> Tuple[Tensor, Tensor]:
    """(c_t, c'_t) for alpha B x L over features B x L x C and positions L x C."""
    batch, length = alpha.shape
    context = reshape(matmul(reshape(alpha, (batch, 1, length)), features), (batch, features.shape[2]))
    return context, context + matmul(alpha, positions)


def coverage_update(coverage: Tensor, alpha: Tensor) -> Tensor:
    if coverage.shape != alpha.shape:
        raise ShapeError(f'coverage {coverage.shape} and attention {alpha.shape} differ')
    return coverage + alpha


def sample_drop_mask(alpha: np.ndarray, cfg: DropAttnConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Per-location multipliers for one step: gamma or 1 at the attention peak, 0 or 1 elsewhere.

    r_p is drawn once per step for each batch row and r_s once per non-peak location;
    the peak is the first index of the largest weight.
    """
    alpha = np.asarray(alpha)
    batch, length = alpha.shape
    peak = alpha.argmax(axis=-1)
    keep_peak = rng.random(batch) < cfg.p_peak
    mask = (rng.random((batch, length)) < cfg.p_spot).astype(alpha.dtype)
    mask[np.arange(batch), peak] = np.where(keep_peak, 1.0, cfg.gamma)
    return mask


def drop_attention(features: Tensor, alpha, cfg: DropAttnConfig, rng: Optional[np.random.Generator],
                   mode: str) -> Tensor:
    check_mode(mode)
    if mode == 'eval' or not cfg.enabled:
        return features
    if rng is None:
        raise ValueError('train-mode drop attention needs an rng')
    alpha = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
    mask = sample_drop_mask(alpha, cfg, rng).astype(features.dtype)
    return features * Tensor(mask[:, :, None])


####################
# Decoder          #
####################
class Decoder:
    def __init__(self, store: ParamStore, cfg: DecoderConfig, vocab: Vocabulary, feature_channels: int,
                 drop: Optional[DropAttnConfig] = None):
        self.cfg = cfg
        self.vocab = vocab
        self.drop = drop or DropAttnConfig()
        self.channels = feature_channels
        a, c, hid = cfg.attn_dim, feature_channels, cfg.hidden_dim
        coverage_width = 1 if cfg.coverage_mode == 'sum' else cfg.coverage_channels

        self.W_e = store.add('decoder.W_e', (1, a))
        self.W_h = store.add('decoder.W_h', (a, hid))
        self.W_f = store.add('decoder.W_f', (a, c))
        self.W_q = store.add('decoder.W_q', (a, c))
        self.W_s = store.add('decoder.W_s', (a, coverage_width))
        self.coverage_kernel = None
        if cfg.coverage_mode == 'conv':
            k = cfg.coverage_kernel
            self.coverage_kernel = store.add('decoder.coverage_kernel', (cfg.coverage_channels, 1, k, k))
        self.E_ph = store.add('decoder.E_ph', (cfg.max_grid_w, c), init='normal')
        self.E_pv = store.add('decoder.E_pv', (cfg.max_grid_h, c), init='normal')
        self.E_d = store.add('decoder.E_d', (len(vocab), cfg.embed_dim), init='normal')
        self.w_ih = store.add('decoder.lstm.w_ih', (4 * hid, cfg.embed_dim + c))
        self.w_hh = store.add('decoder.lstm.w_hh', (4 * hid, hid))
        self.b_lstm = store.add('decoder.lstm.bias', (4 * hid,), init='zeros')
        self.W_o = store.add('decoder.W_o', (len(vocab), c + hid))
        self.b_o = store.add('decoder.b_o', (len(vocab),), init='zeros')

    def position_embeddings(self, height: int, width: int) -> Tensor:
        if not (1 <= height <= self.cfg.max_grid_h and 1 <= width <= self.cfg.max_grid_w):
            raise ShapeError(f'feature grid {height}x{width} exceeds the position tables '
                             f'{self.cfg.max_grid_h}x{self.cfg.max_grid_w}')
        locations = np.arange(height * width)
        return embedding(self.E_ph, locations // height) + embedding(self.E_pv, locations % height)

    def prepare(self, grid: FeatureGrid) -> Memory:
        if grid.channels != self.channels:
            raise ShapeError(f'decoder expects {self.channels}-channel features, got {grid.features.shape}')
        features = grid.flatten()
        positions = self.position_embeddings(grid.height, grid.width)
        keys = linear(features, self.W_f) + linear(positions, self.W_q)
        return Memory(features, positions, keys, (grid.height, grid.width))

    def initial_state(self, memory: Memory) -> DecoderState:
        batch = memory.features.shape[0]
        dtype = memory.features.dtype

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=dtype))

        return DecoderState(zeros(batch, self.cfg.hidden_dim), zeros(batch, self.cfg.hidden_dim),
                            zeros(batch, memory.length), zeros(batch, self.channels), 0)

    def _coverage_term(self, coverage: Tensor, memory: Memory) -> Tensor:
        batch, length = coverage.shape
        if self.coverage_kernel is None:
            return linear(reshape(coverage, (batch, length, 1)), self.W_s)
        height, width = memory.grid
        maps = reshape(transpose(reshape(coverage, (batch, width, height)), (0, 2, 1)), (batch, 1, height, width))
        maps = conv2d(maps, self.coverage_kernel, 1, self.cfg.coverage_kernel // 2)
        channels = maps.shape[1]
        flat = reshape(transpose(maps, (0, 3, 2, 1)), (batch, length, channels))
        return linear(flat, self.W_s)

    def attention(self, h: Tensor, memory: Memory, coverage: Tensor) -> Tensor:
        batch = h.shape[0]
        query = reshape(linear(h, self.W_h), (batch, 1, self.cfg.attn_dim))
        hidden = tanh(memory.keys + query + self._coverage_term(coverage, memory))
        energies = reshape(linear(hidden, self.W_e), (batch, memory.length))
        return softmax(energies, axis=-1)

    def decode_step(self, y_prev, state: DecoderState, memory: Memory, mode: str = 'eval',
                    rng: Optional[np.random.Generator] = None) -> StepOutput:
        check_mode(mode)
        y_prev = np.atleast_1d(np.asarray(y_prev, dtype=np.int64))
        if y_prev.shape != (memory.features.shape[0],):
            raise ShapeError(f'expected {memory.features.shape[0]} previous tokens, got shape {y_prev.shape}')
        if y_prev.min() < 0 or y_prev.max() >= len(self.vocab):
            raise ValueError(f'token id out of range [0, {len(self.vocab)}): {y_prev.tolist()}')

        x = concat([embedding(self.E_d, y_prev), state.context], axis=1)
        h, cell = lstm_step(x, state.h, state.cell, self.w_ih, self.w_hh, self.b_lstm)
        alpha = self.attention(h, memory, state.coverage)
        used = drop_attention(memory.features, alpha, self.drop, rng, mode)
        context, augmented = contexts(alpha, used, memory.positions)
        logits = linear(concat([context, h], axis=1), self.W_o, self.b_o)
        return StepOutput(log_softmax(logits, axis=-1), alpha,
                          DecoderState(h, cell, coverage_update(state.coverage, alpha), augmented, state.t + 1))

    def greedy_decode(self, grid: FeatureGrid, max_len: int) -> Tuple[List[str], AttentionRecord]:
        """Argmax decoding of a single image until \\eos or ``max_len`` tokens."""
        if max_len < 1:
            raise ValueError(f'max_len must be >= 1, got {max_len}')
        if grid.batch != 1:
            raise ShapeError(f'greedy_decode handles one image at a time, got batch {grid.batch}')
        eos = self.vocab.id(EOS)
        with no_grad():
            memory = self.prepare(grid)
            state = self.initial_state(memory)
            record = AttentionRecord(memory.grid)
            token = self.vocab.id(SOS)
            for _ in range(max_len):
                out = self.decode_step([token], state, memory, 'eval')
                state = out.state
                log_probs = out.log_probs.data[0]
                token = int(log_probs.argmax())
                record.append(self.vocab.token(token), log_probs[token], out.alpha.data[0])
                if token == eos:
                    break
            record.truncated = token != eos
        if record.truncated:
            log.debug('decoding stopped at max_len=%d without %s', max_len, EOS)
        return list(record.tokens), record


def pick(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    """log p(target) per batch row."""
    return getitem(log_probs, (np.arange(log_probs.shape[0]), np.asarray(targets, dtype=np.int64)))
