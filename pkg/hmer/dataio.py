# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

"""
LaTeX tokenization, the manifest dataset format and the synthetic expression renderer.

A dataset directory holds ``manifest.tsv`` with ``relative_path<TAB>latex`` lines
(UTF-8) and 8-bit PGM images. Ink is stored as high values on a zero background.
"""

import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from . import glyphs

log = logging.getLogger(__name__)

SOS = '<sos>'
EOS = '\\eos'
PAD = '<pad>'
RESERVED = (SOS, EOS, PAD)

MANIFEST_NAME = 'manifest.tsv'
IMAGE_DIR = 'images'

_TOKEN_RE = re.compile(r'\\[A-Za-z]+|\\.|\S', re.DOTALL)


class TokenizationError(ValueError):
    def __init__(self, token: str, offset: int):
        super().__init__(f'unknown token {token!r} at byte offset {offset}')
        self.token = token
        self.offset = offset


class DatasetError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


##################
# Vocabulary     #
##################
class Vocabulary:
    """Bijective token <-> id map; ids 0, 1, 2 are <sos>, \\eos and <pad>."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise ValueError(f'vocabulary must start with the reserved tokens {RESERVED}')
        if len(set(tokens)) != len(tokens):
            raise ValueError('vocabulary contains duplicate tokens')
        self.tokens = tokens
        self._ids = {token: i for i, token in enumerate(tokens)}

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> 'Vocabulary':
        return cls(list(RESERVED) + sorted(set(tokens) - set(RESERVED)))

    @classmethod
    def load(cls, path) -> 'Vocabulary':
        with open(path, 'r', encoding='utf-8') as handle:
            return cls([line.rstrip('\n') for line in handle if line.rstrip('\n')])

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as handle:
            handle.writelines(f'{token}\n' for token in self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __repr__(self):
        return f'Vocabulary({len(self)} tokens)'

    def id(self, token: str) -> int:
        return self._ids[token]

    def token(self, index: int) -> str:
        return self.tokens[index]

    @property
    def sos_id(self) -> int:
        return self._ids[SOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self._ids[token] for token in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[int(i)] for i in ids]


def tokenize_latex(s: str, vocab: Optional[Vocabulary] = None) -> List[str]:
    """Split a LaTeX string into tokens and append \\eos; whitespace is dropped."""
    if not s or not s.strip():
        raise ValueError('cannot tokenize an empty label')
    tokens = []
    for match in _TOKEN_RE.finditer(s):
        token = match.group(0)
        if token in RESERVED or (vocab is not None and token not in vocab):
            raise TokenizationError(token, len(s[:match.start()].encode('utf-8')))
        tokens.append(token)
    tokens.append(EOS)
    return tokens


def detokenize(tokens: Iterable[str]) -> str:
    out = []
    previous = ''
    for token in tokens:
        if token in RESERVED:
            continue
        # a command name would swallow a following letter
        if previous.startswith('\\') and previous[1:].isalpha() and token[0].isalpha():
            out.append(' ')
        out.append(token)
        previous = token
    return ''.join(out)


##################
# Samples        #
##################
@dataclass
class Sample:
    image: np.ndarray
    label: List[str]
    source: str = ''

    def __post_init__(self):
        if not self.label or self.label[-1] != EOS:
            raise ValueError(f'sample {self.source!r}: label must be non-empty and end with {EOS}')
        if self.image.ndim != 2 or min(self.image.shape) < 1:
            raise ValueError(f'sample {self.source!r}: image must be a non-empty 2-D array, got {self.image.shape}')

    @property
    def latex(self) -> str:
        return detokenize(self.label)


def read_image(path) -> np.ndarray:
    with PILImage.open(path) as image:
        return np.asarray(image.convert('L'), dtype=np.float32) / np.float32(255.0)


def write_image(path, image: np.ndarray):
    pixels = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(pixels).save(path, format='PPM')


def _manifest_path(location) -> Path:
    location = Path(location)
    return location / MANIFEST_NAME if location.is_dir() else location


def read_manifest(location) -> List[Tuple[int, str, str]]:
    """Return (line number, relative path, latex) for every non-blank manifest line."""
    manifest = _manifest_path(location)
    if not manifest.is_file():
        raise DatasetError(f'{manifest}: manifest not found')
    entries = []
    with open(manifest, 'r', encoding='utf-8') as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip('\r\n')
            if not line.strip():
                continue
            fields = line.split('\t')
            if len(fields) != 2 or not fields[0] or not fields[1].strip():
                raise DatasetError(f'{manifest}:{lineno}: expected "relative_path<TAB>latex_label"')
            entries.append((lineno, fields[0], fields[1]))
    return entries


def load_dataset(location, vocab: Vocabulary) -> List[Sample]:
    manifest = _manifest_path(location)
    samples = []
    for lineno, relative, latex in read_manifest(manifest):
        image_path = manifest.parent / relative
        if not image_path.is_file():
            raise DatasetError(f'{manifest}:{lineno}: image file {relative} not found')
        try:
            label = tokenize_latex(latex, vocab)
        except TokenizationError as e:
            raise DatasetError(f'{manifest}:{lineno}: {e}') from e
        samples.append(Sample(read_image(image_path), label, source=relative))
    log.info('loaded %d samples from %s', len(samples), manifest)
    return samples


def build_vocabulary(manifests: Sequence[Union[str, os.PathLike]]) -> Vocabulary:
    if not manifests:
        raise ValueError('build_vocabulary needs at least one manifest')
    tokens = set()
    for location in manifests:
        manifest = _manifest_path(location)
        for lineno, _, latex in read_manifest(manifest):
            try:
                tokens.update(tokenize_latex(latex))
            except (TokenizationError, ValueError) as e:
                raise DatasetError(f'{manifest}:{lineno}: {e}') from e
    return Vocabulary.from_tokens(tokens)


######################
# Expression grammar #
######################
@dataclass(frozen=True)
class Symbol:
    token: str


@dataclass(frozen=True)
class Row:
    children: Tuple


@dataclass(frozen=True)
class Script:
    base: Symbol
    script: object
    kind: str  # '^' or '_'


@dataclass(frozen=True)
class Fraction:
    numerator: object
    denominator: object


@dataclass
class GrammarConfig:
    symbols: Tuple[str, ...] = glyphs.DEFAULT_SYMBOLS
    symbol_weight: float = 1.0
    concat_weight: float = 2.0
    sup_weight: float = 0.6
    sub_weight: float = 0.4
    frac_weight: float = 0.3
    max_depth: int = 3
    max_row_length: int = 4
    glyph_size: int = 32
    script_scale: float = 0.6
    size_jitter: float = 0.1
    position_jitter: float = 0.03
    stroke_jitter: float = 0.4
    stroke_width: float = 2.0
    margin: int = 4
    max_height: int = 256
    max_width: int = 1024
    max_retries: int = 20

    def __post_init__(self):
        self.symbols = tuple(self.symbols)
        weights = self.weights()
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise ValueError(f'production weights must be non-negative with at least one positive, got {weights}')
        if self.max_depth < 1:
            raise ValueError(f'max_depth must be >= 1, got {self.max_depth}')
        if not 0 < self.script_scale <= 1:
            raise ValueError(f'script_scale must be in (0, 1], got {self.script_scale}')
        if not self.symbols:
            raise ValueError('symbol set is empty')
        for token in self.symbols:
            glyphs.glyph(token)
        if self.max_row_length < 2 or self.max_retries < 1:
            raise ValueError('max_row_length must be >= 2 and max_retries >= 1')

    def weights(self) -> Tuple[float, ...]:
        return (self.symbol_weight, self.concat_weight, self.sup_weight, self.sub_weight, self.frac_weight)

    def token_set(self) -> List[str]:
        tokens = set(self.symbols)
        if self.sup_weight > 0:
            tokens.update({'^', '{', '}'})
        if self.sub_weight > 0:
            tokens.update({'_', '{', '}'})
        if self.frac_weight > 0:
            tokens.update({'\\frac', '{', '}'})
        return sorted(tokens)


def sample_expression(cfg: GrammarConfig, rng: np.random.Generator, depth: int = 0):
    if depth >= cfg.max_depth:
        return Symbol(str(rng.choice(cfg.symbols)))
    weights = np.asarray(cfg.weights(), dtype=np.float64)
    production = int(rng.choice(len(weights), p=weights / weights.sum()))
    if production == 0:
        return Symbol(str(rng.choice(cfg.symbols)))
    if production == 1:
        children = []
        for _ in range(int(rng.integers(2, cfg.max_row_length + 1))):
            child = sample_expression(cfg, rng, depth + 1)
            children.extend(child.children if isinstance(child, Row) else [child])
        return Row(tuple(children))
    if production in (2, 3):
        bases = [s for s in cfg.symbols if s not in glyphs.OPERATORS] or list(cfg.symbols)
        base = Symbol(str(rng.choice(bases)))
        return Script(base, sample_expression(cfg, rng, depth + 1), '^' if production == 2 else '_')
    return Fraction(sample_expression(cfg, rng, depth + 1), sample_expression(cfg, rng, depth + 1))


def expression_tokens(node) -> List[str]:
    """LaTeX tokens of an expression, always in braced form, without \\eos."""
    if isinstance(node, Symbol):
        return [node.token]
    if isinstance(node, Row):
        return [token for child in node.children for token in expression_tokens(child)]
    if isinstance(node, Script):
        return [node.base.token, node.kind, '{'] + expression_tokens(node.script) + ['}']
    if isinstance(node, Fraction):
        return (['\\frac', '{'] + expression_tokens(node.numerator) + ['}', '{']
                + expression_tokens(node.denominator) + ['}'])
    raise TypeError(f'unknown expression node {node!r}')


##################
# Layout         #
##################
@dataclass
class Placement:
    token: str
    x: float
    top: float
    width: float
    height: float
    scale: float

    @property
    def right(self) -> float:
        return self.x + self.width

    @property
    def bottom(self) -> float:
        return self.top + self.height


@dataclass
class Bar:
    x0: float
    x1: float
    y: float
    scale: float


@dataclass
class Layout:
    """Boxes in pixels relative to (left edge, baseline); y grows downwards."""
    width: float
    ascent: float
    descent: float
    glyphs: List[Placement] = field(default_factory=list)
    bars: List[Bar] = field(default_factory=list)

    def shifted(self, dx: float, dy: float) -> Tuple[List[Placement], List[Bar]]:
        moved = [Placement(g.token, g.x + dx, g.top + dy, g.width, g.height, g.scale) for g in self.glyphs]
        bars = [Bar(b.x0 + dx, b.x1 + dx, b.y + dy, b.scale) for b in self.bars]
        return moved, bars

    @property
    def height(self) -> float:
        return self.ascent + self.descent


GLYPH_ASPECT = 0.7
ROW_GAP = 0.15
SUP_RAISE = 0.55
SUB_DROP = 0.3
FRAC_GAP = 0.15
FRAC_PAD = 0.1


def layout_expression(node, cfg: GrammarConfig, rng: np.random.Generator, scale: float = 1.0) -> Layout:
    size = cfg.glyph_size * scale
    if isinstance(node, Symbol):
        glyph_size = size * float(rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter))
        dy = float(rng.normal(0.0, cfg.position_jitter * size))
        placement = Placement(node.token, 0.0, -glyph_size + dy, GLYPH_ASPECT * glyph_size, glyph_size, scale)
        return Layout(placement.width, max(0.0, -placement.top), max(0.0, placement.bottom), [placement])

    if isinstance(node, Row):
        gap = ROW_GAP * size
        out = Layout(0.0, 0.0, 0.0)
        for i, child in enumerate(node.children):
            box = layout_expression(child, cfg, rng, scale)
            x = out.width + (gap if i else 0.0)
            moved, bars = box.shifted(x, 0.0)
            out.glyphs += moved
            out.bars += bars
            out.width = x + box.width
            out.ascent = max(out.ascent, box.ascent)
            out.descent = max(out.descent, box.descent)
        return out

    if isinstance(node, Script):
        base = layout_expression(node.base, cfg, rng, scale)
        script = layout_expression(node.script, cfg, rng, scale * cfg.script_scale)
        shift = -SUP_RAISE * size if node.kind == '^' else SUB_DROP * size
        x = base.width + 0.05 * size
        moved, bars = script.shifted(x, shift)
        return Layout(x + script.width,
                      max(base.ascent, script.ascent - shift),
                      max(base.descent, script.descent + shift),
                      base.glyphs + moved, base.bars + bars)

    if isinstance(node, Fraction):
        numerator = layout_expression(node.numerator, cfg, rng, scale)
        denominator = layout_expression(node.denominator, cfg, rng, scale)
        axis = -0.5 * size
        gap = FRAC_GAP * size
        width = max(numerator.width, denominator.width) + 2 * FRAC_PAD * size
        num_baseline = axis - gap - numerator.descent
        den_baseline = axis + gap + denominator.ascent
        num_glyphs, num_bars = numerator.shifted((width - numerator.width) / 2, num_baseline)
        den_glyphs, den_bars = denominator.shifted((width - denominator.width) / 2, den_baseline)
        return Layout(width,
                      max(0.0, numerator.ascent - num_baseline),
                      max(0.0, den_baseline + denominator.descent),
                      num_glyphs + den_glyphs,
                      num_bars + den_bars + [Bar(0.0, width, axis, scale)])

    raise TypeError(f'unknown expression node {node!r}')


def canvas_size(layout: Layout, cfg: GrammarConfig) -> Tuple[int, int]:
    return (int(math.ceil(layout.height)) + 2 * cfg.margin, int(math.ceil(layout.width)) + 2 * cfg.margin)


def render_layout(layout: Layout, cfg: GrammarConfig, rng: np.random.Generator) -> np.ndarray:
    height, width = canvas_size(layout, cfg)
    canvas = PILImage.new('L', (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    origin_x, origin_y = cfg.margin, cfg.margin + layout.ascent

    def jitter():
        return float(rng.normal(0.0, cfg.stroke_jitter)) if cfg.stroke_jitter > 0 else 0.0

    for g in layout.glyphs:
        line_width = max(1, int(round(cfg.stroke_width * g.scale)))
        for stroke in glyphs.glyph(g.token):
            points = [(origin_x + g.x + px * g.width + jitter(), origin_y + g.top + py * g.height + jitter())
                      for px, py in stroke]
            draw.line(points, fill=255, width=line_width, joint='curve')
    for bar in layout.bars:
        line_width = max(1, int(round(cfg.stroke_width * bar.scale)))
        y = origin_y + bar.y
        draw.line([(origin_x + bar.x0, y), (origin_x + bar.x1, y)], fill=255, width=line_width)
    return np.asarray(canvas, dtype=np.float32) / np.float32(255.0)


def generate_sample(cfg: GrammarConfig, seed: int, index: int) -> Tuple[np.ndarray, List[str], Layout]:
    """Render sample ``index`` of the dataset seeded with ``seed``; returns (image, label, layout)."""
    rng = np.random.default_rng([seed, index])
    for attempt in range(cfg.max_retries):
        expression = sample_expression(cfg, rng)
        layout = layout_expression(expression, cfg, rng)
        height, width = canvas_size(layout, cfg)
        if height <= cfg.max_height and width <= cfg.max_width:
            image = render_layout(layout, cfg, rng)
            return image, expression_tokens(expression) + [EOS], layout
        log.debug('sample %d attempt %d: %dx%d exceeds %dx%d, resampling',
                  index, attempt, height, width, cfg.max_height, cfg.max_width)
    raise GenerationError(f'sample {index}: no expression fit within {cfg.max_height}x{cfg.max_width} '
                          f'after {cfg.max_retries} attempts')


def generate_dataset(cfg: GrammarConfig, n: int, seed: int, out_dir, workers: int = 1) -> Path:
    """Render ``n`` samples into ``out_dir``; returns the manifest path."""
    if n < 1:
        raise ValueError(f'generate_dataset needs n >= 1, got {n}')
    out_dir = Path(out_dir)
    (out_dir / IMAGE_DIR).mkdir(parents=True, exist_ok=True)

    def produce(index: int) -> str:
        image, label, _ = generate_sample(cfg, seed, index)
        relative = f'{IMAGE_DIR}/{index:06d}.pgm'
        write_image(out_dir / relative, image)
        return f'{relative}\t{detokenize(label)}\n'

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            lines = list(pool.map(produce, range(n)))
    else:
        lines = [produce(index) for index in range(n)]

    manifest = out_dir / MANIFEST_NAME
    with open(manifest, 'w', encoding='utf-8', newline='\n') as handle:
        handle.writelines(lines)
    log.info('generated %d samples into %s (seed %d)', n, out_dir, seed)
    return manifest
