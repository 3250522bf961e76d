# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

import hashlib
import json
import logging
from dataclasses import asdict
from typing import List, Optional, Tuple

import numpy as np

from .dataio import Vocabulary
from .decoder import AttentionRecord, Decoder, DecoderConfig, DropAttnConfig
from .encoder import Encoder, EncoderConfig, FeatureGrid
from .nncore import ParamStore, ShapeError, Tensor, no_grad

log = logging.getLogger(__name__)


class Recognizer:
    """Encoder and decoder sharing one ParamStore, bound to a vocabulary and an input canvas."""

    def __init__(self, vocab: Vocabulary, encoder_cfg: Optional[EncoderConfig] = None,
                 decoder_cfg: Optional[DecoderConfig] = None, drop_cfg: Optional[DropAttnConfig] = None,
                 canvas: Tuple[int, int] = (256, 1024), seed: int = 0):
        self.vocab = vocab
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.decoder_cfg = decoder_cfg or DecoderConfig()
        self.drop_cfg = drop_cfg or DropAttnConfig()
        self.canvas = (int(canvas[0]), int(canvas[1]))
        self.seed = seed

        self.store = ParamStore(seed)
        self.encoder = Encoder(self.store, self.encoder_cfg, self.canvas)
        grid_h, grid_w, channels = self.encoder.output_shape(*self.canvas)
        if grid_h > self.decoder_cfg.max_grid_h or grid_w > self.decoder_cfg.max_grid_w:
            raise ShapeError(f'canvas {self.canvas[0]}x{self.canvas[1]} gives a {grid_h}x{grid_w} feature grid, '
                             f'larger than the {self.decoder_cfg.max_grid_h}x{self.decoder_cfg.max_grid_w} '
                             f'position tables')
        self.decoder = Decoder(self.store, self.decoder_cfg, vocab, channels, self.drop_cfg)
        log.debug('recognizer with %d parameter values, grid %dx%d', self.store.num_values(), grid_h, grid_w)

    @property
    def grid(self) -> Tuple[int, int]:
        return self.encoder.output_shape(*self.canvas)[:2]

    def encode(self, images, mode: str = 'eval', rng: Optional[np.random.Generator] = None) -> FeatureGrid:
        """``images`` is B x H x W in [0, 1], already placed on the canvas."""
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        return self.encoder.encode(Tensor(images[:, None, :, :]), mode, rng)

    def predict(self, image: np.ndarray, max_len: int) -> Tuple[List[str], AttentionRecord]:
        with no_grad():
            grid = self.encode(image, 'eval')
        return self.decoder.greedy_decode(grid, max_len)

    def describe(self) -> dict:
        return {
            'vocab': list(self.vocab.tokens),
            'encoder': asdict(self.encoder_cfg),
            'decoder': asdict(self.decoder_cfg),
            'drop': asdict(self.drop_cfg),
            'canvas': list(self.canvas),
            'seed': self.seed,
        }

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.describe(), sort_keys=True).encode('utf-8')).hexdigest()[:16]

    @classmethod
    def from_description(cls, meta: dict) -> 'Recognizer':
        return cls(Vocabulary(meta['vocab']),
                   EncoderConfig(**meta['encoder']),
                   DecoderConfig(**meta['decoder']),
                   DropAttnConfig(**meta['drop']),
                   tuple(meta['canvas']),
                   meta.get('seed', 0))
