# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

"""
Polyline glyphs for the synthetic renderer.

Each glyph is a list of strokes; each stroke is a list of (x, y) points in a
unit box with x to the right and y downwards. Glyphs occupy the full box
height except operators, which sit around the middle.
"""

import math
from typing import Dict, List, Tuple

Stroke = List[Tuple[float, float]]


def _arc(cx, cy, rx, ry, start_deg, end_deg, steps=10) -> Stroke:
    points = []
    for i in range(steps + 1):
        angle = math.radians(start_deg + (end_deg - start_deg) * i / steps)
        points.append((cx + rx * math.cos(angle), cy + ry * math.sin(angle)))
    return points


GLYPHS: Dict[str, List[Stroke]] = {
    '0': [_arc(0.5, 0.5, 0.32, 0.45, 0, 360, 16)],
    '1': [[(0.3, 0.25), (0.55, 0.05), (0.55, 0.95)], [(0.3, 0.95), (0.8, 0.95)]],
    '2': [_arc(0.5, 0.3, 0.3, 0.25, 200, 360, 8) + [(0.2, 0.95), (0.82, 0.95)]],
    '3': [_arc(0.48, 0.28, 0.28, 0.23, 200, 450, 8), _arc(0.48, 0.72, 0.3, 0.23, 270, 520, 8)],
    '4': [[(0.65, 0.95), (0.65, 0.05), (0.15, 0.68), (0.85, 0.68)]],
    '5': [[(0.78, 0.05), (0.25, 0.05), (0.22, 0.45)] + _arc(0.48, 0.67, 0.3, 0.28, 240, 500, 10)],
    '6': [[(0.7, 0.08), (0.3, 0.45)] + _arc(0.5, 0.68, 0.28, 0.27, 180, 540, 14)],
    '7': [[(0.18, 0.05), (0.82, 0.05), (0.4, 0.95)]],
    '8': [_arc(0.5, 0.27, 0.24, 0.22, 90, 450, 12), _arc(0.5, 0.72, 0.3, 0.24, 270, 630, 12)],
    '9': [_arc(0.5, 0.32, 0.28, 0.27, 0, 360, 12) + [(0.78, 0.32), (0.62, 0.95)]],
    'a': [_arc(0.45, 0.65, 0.27, 0.3, 0, 360, 12), [(0.72, 0.35), (0.75, 0.95)]],
    'b': [[(0.25, 0.02), (0.25, 0.95)], _arc(0.5, 0.68, 0.25, 0.27, 180, 540, 12)],
    'x': [[(0.15, 0.35), (0.85, 0.95)], [(0.85, 0.35), (0.15, 0.95)]],
    'y': [[(0.15, 0.35), (0.5, 0.75)], [(0.85, 0.35), (0.35, 1.0)]],
    '+': [[(0.5, 0.2), (0.5, 0.8)], [(0.2, 0.5), (0.8, 0.5)]],
    '-': [[(0.2, 0.5), (0.8, 0.5)]],
    '=': [[(0.2, 0.38), (0.8, 0.38)], [(0.2, 0.62), (0.8, 0.62)]],
}

DEFAULT_SYMBOLS: Tuple[str, ...] = tuple('0123456789') + ('a', 'b', 'x', 'y', '+', '-', '=')

OPERATORS = frozenset({'+', '-', '='})


def glyph(token: str) -> List[Stroke]:
    try:
        return GLYPHS[token]
    except KeyError:
        raise ValueError(f'no glyph defined for token {token!r}') from None
