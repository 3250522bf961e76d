# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

"""
Expression recognition rates and attention overlays.

Symbol-level errors are counted as LaTeX token edit distance. This is a proxy
for label-graph evaluation and the numbers are not comparable to official
competition figures; every written report says so in its header.
"""

import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import editdistance
import numpy as np
from PIL import Image as PILImage
from tabulate import tabulate

from .dataio import EOS
from .decoder import AttentionRecord

log = logging.getLogger(__name__)

TOLERANCES = (1, 2, 3)
METRIC_NOTE = 'symbol errors = LaTeX token edit distance (proxy, not label-graph evaluation)'


def _strip(seq: Sequence) -> List:
    return [token for token in seq if token != EOS]


def token_edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs; \\eos tokens are ignored."""
    return int(editdistance.eval(_strip(a), _strip(b)))


@dataclass
class SampleResult:
    source: str
    prediction: List[str]
    reference: List[str]
    distance: int


@dataclass
class EvalReport:
    exprate: float
    within: Dict[int, float]
    records: List[SampleResult] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.records)

    def rates(self) -> Tuple[float, ...]:
        return (self.exprate,) + tuple(self.within[k] for k in TOLERANCES)

    def write(self, path):
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write(f'# {METRIC_NOTE}\n')
            handle.write('ExpRate\t' + '\t'.join(f'ExpRate<={k}' for k in TOLERANCES) + '\tsamples\n')
            handle.write('\t'.join(f'{rate:.2f}' for rate in self.rates()) + f'\t{self.count}\n')
            handle.write('source\tdistance\tprediction\treference\n')
            for r in self.records:
                handle.write(f'{r.source}\t{r.distance}\t{" ".join(r.prediction)}\t{" ".join(r.reference)}\n')
        log.info('evaluation report written to %s', path)


def exprate(predictions: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
            sources: Optional[Sequence[str]] = None) -> EvalReport:
    if len(predictions) != len(references):
        raise ValueError(f'{len(predictions)} predictions for {len(references)} references')
    if not references:
        raise ValueError('exprate needs at least one sample')
    sources = list(sources) if sources is not None else [str(i) for i in range(len(references))]
    records = [SampleResult(source, list(p), list(r), token_edit_distance(p, r))
               for source, p, r in zip(sources, predictions, references)]
    distances = np.array([r.distance for r in records])
    n = len(records)
    return EvalReport(100.0 * float((distances == 0).sum()) / n,
                      {k: 100.0 * float((distances <= k).sum()) / n for k in TOLERANCES},
                      records)


def format_report_table(reports: Mapping[str, EvalReport]) -> str:
    """One column per test set, one row per tolerance."""
    headers = ['metric (%)'] + list(reports)
    names = ['ExpRate'] + [f'ExpRate<={k}' for k in TOLERANCES]
    rows = [[name] + [report.rates()[i] for report in reports.values()] for i, name in enumerate(names)]
    return f'{METRIC_NOTE}\n' + tabulate(rows, headers=headers, tablefmt='grid', floatfmt='.2f')


def format_ablation_table(title: str, rows: Sequence[Tuple[str, Mapping[str, float]]]) -> str:
    test_sets = list(rows[0][1]) if rows else []
    body = [[label] + [values[name] for name in test_sets] for label, values in rows]
    return f'{title}\n' + tabulate(body, headers=['setting'] + [f'{name} ExpRate (%)' for name in test_sets],
                                   tablefmt='grid', floatfmt='.2f')


####################
# Attention maps   #
####################
_TOKEN_NAMES = {'{': 'lbrace', '}': 'rbrace', '^': 'sup', '_': 'sub', '+': 'plus', '-': 'minus', '=': 'eq'}


def token_filename(token: str) -> str:
    if token in _TOKEN_NAMES:
        return _TOKEN_NAMES[token]
    name = re.sub(r'[^A-Za-z0-9]', '', token)
    return name or 'tok'


def attention_map(alpha: np.ndarray, grid: Tuple[int, int], shape: Tuple[int, int]) -> np.ndarray:
    """Column-major alpha of length H' * W', upsampled by nearest neighbour to ``shape``."""
    height, width = grid
    cells = np.asarray(alpha, dtype=np.float64).reshape(width, height).T
    rows = (np.arange(shape[0]) * height) // shape[0]
    cols = (np.arange(shape[1]) * width) // shape[1]
    return cells[rows][:, cols]


def overlay(image: np.ndarray, alpha_map: np.ndarray) -> np.ndarray:
    """Ink drawn dark on white, then a red layer with opacity alpha / max(alpha)."""
    peak = alpha_map.max()
    opacity = alpha_map / peak if peak > 0 else np.zeros_like(alpha_map)
    gray = 1.0 - np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    base = np.repeat(gray[:, :, None], 3, axis=2)
    red = np.array([1.0, 0.0, 0.0])
    blended = (1.0 - opacity[:, :, None]) * base + opacity[:, :, None] * red
    return np.clip(np.round(blended * 255.0), 0, 255).astype(np.uint8)


def render_attention_maps(image: np.ndarray, record: AttentionRecord, grid: Tuple[int, int], out_dir) -> List[Path]:
    length = grid[0] * grid[1]
    for step, alpha in enumerate(record.alphas):
        if alpha.size != length:
            raise ValueError(f'step {step}: {alpha.size} attention weights for a {grid[0]}x{grid[1]} grid')
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for step, (token, alpha) in enumerate(zip(record.tokens, record.alphas)):
        path = out_dir / f'{step:03d}_{token_filename(token)}.ppm'
        PILImage.fromarray(overlay(image, attention_map(alpha, grid, image.shape))).save(path, format='PPM')
        paths.append(path)
    log.info('wrote %d attention overlays to %s', len(paths), out_dir)
    return paths
