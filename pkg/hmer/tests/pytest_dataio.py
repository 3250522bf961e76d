# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

import os
from pathlib import Path

import numpy as np
import pytest

from hmer import dataio
from hmer.dataio import (EOS, DatasetError, Fraction, GenerationError, GrammarConfig, Row, Script, Symbol,
                         TokenizationError, Vocabulary)


def _write_dataset(root: Path, lines, images=()):
    (root / 'images').mkdir(parents=True, exist_ok=True)
    for name, shape in images:
        dataio.write_image(root / name, np.zeros(shape, dtype=np.float32))
    (root / dataio.MANIFEST_NAME).write_text(''.join(f'{line}\n' for line in lines), encoding='utf-8')
    return root


@pytest.mark.parametrize('latex, tokens', [
    ('x^{2}', ['x', '^', '{', '2', '}', EOS]),
    ('\\frac{a}{b}', ['\\frac', '{', 'a', '}', '{', 'b', '}', EOS]),
    ('a + \\alpha_{1}', ['a', '+', '\\alpha', '_', '{', '1', '}', EOS]),
    ('\\{ x \\}', ['\\{', 'x', '\\}', EOS]),
])
def test_tokenize_latex(latex, tokens):
    assert dataio.tokenize_latex(latex) == tokens


def test_tokenize_rejects_unknown_token_with_offset():
    vocab = Vocabulary.from_tokens(['x', '+'])
    with pytest.raises(TokenizationError) as e:
        dataio.tokenize_latex('x + \\foo', vocab)
    assert e.value.token == '\\foo'
    assert e.value.offset == 4
    assert '\\foo' in str(e.value) and 'byte offset 4' in str(e.value)


def test_tokenize_offset_counts_bytes():
    with pytest.raises(TokenizationError) as e:
        dataio.tokenize_latex('é y', Vocabulary.from_tokens(['é']))
    assert e.value.offset == 3


def test_tokenize_rejects_empty_and_reserved():
    with pytest.raises(ValueError):
        dataio.tokenize_latex('   ')
    with pytest.raises(TokenizationError):
        dataio.tokenize_latex('x \\eos')


@pytest.mark.parametrize('latex', ['x^{2}', '\\frac{a}{b}', '\\alpha x', 'x_{1}+y'])
def test_detokenize_preserves_tokens(latex):
    tokens = dataio.tokenize_latex(latex)
    assert dataio.tokenize_latex(dataio.detokenize(tokens)) == tokens


def test_vocabulary_layout():
    vocab = Vocabulary.from_tokens(['y', 'x', 'x'])
    assert vocab.tokens == ['<sos>', EOS, '<pad>', 'x', 'y']
    assert (vocab.sos_id, vocab.eos_id, vocab.pad_id) == (0, 1, 2)
    assert vocab.decode(vocab.encode(['x', 'y', EOS])) == ['x', 'y', EOS]
    with pytest.raises(ValueError):
        Vocabulary(['x', '<sos>', EOS, '<pad>'])


def test_vocabulary_save_load(tmp_path):
    vocab = Vocabulary.from_tokens(['\\frac', '{', '}', 'x'])
    vocab.save(tmp_path / 'vocab.txt')
    assert Vocabulary.load(tmp_path / 'vocab.txt') == vocab


def test_build_vocabulary(tmp_path):
    first = _write_dataset(tmp_path / 'a', ['images/0.pgm\tx', 'images/1.pgm\ty'])
    second = _write_dataset(tmp_path / 'b', ['images/0.pgm\tx+y'])
    vocab = dataio.build_vocabulary([first])
    assert len(vocab) == 5 and 'x' in vocab and 'y' in vocab
    merged = dataio.build_vocabulary([first, second])
    assert merged.tokens.count('x') == 1 and '+' in merged
    assert dataio.build_vocabulary([second, first]) == merged


def test_load_dataset(tmp_path):
    root = _write_dataset(tmp_path / 'one', ['images/a.pgm\tx^{2}'], [('images/a.pgm', (5, 5))])
    vocab = dataio.build_vocabulary([root])
    samples = dataio.load_dataset(root, vocab)
    assert len(samples) == 1
    assert samples[0].image.shape == (5, 5)
    assert samples[0].image.dtype == np.float32
    assert samples[0].label == ['x', '^', '{', '2', '}', EOS]
    assert samples[0].latex == 'x^{2}'


def test_load_empty_manifest(tmp_path):
    root = _write_dataset(tmp_path / 'empty', [])
    assert dataio.load_dataset(root, Vocabulary.from_tokens([])) == []


def test_load_dataset_errors_cite_line(tmp_path):
    vocab = Vocabulary.from_tokens(['x'])
    root = _write_dataset(tmp_path / 'unknown', ['images/a.pgm\tx', '', 'images/a.pgm\t\\foo'],
                          [('images/a.pgm', (4, 4))])
    with pytest.raises(DatasetError, match=r'manifest.tsv:3:.*\\\\foo'):
        dataio.load_dataset(root, vocab)

    root = _write_dataset(tmp_path / 'missing', ['images/none.pgm\tx'])
    with pytest.raises(DatasetError, match=r'manifest.tsv:1: image file images/none.pgm not found'):
        dataio.load_dataset(root, vocab)

    root = _write_dataset(tmp_path / 'malformed', ['images/a.pgm x'], [('images/a.pgm', (4, 4))])
    with pytest.raises(DatasetError, match='manifest.tsv:1:'):
        dataio.load_dataset(root, vocab)

    with pytest.raises(DatasetError, match='manifest not found'):
        dataio.load_dataset(tmp_path / 'nowhere', vocab)


def test_image_round_trip(tmp_path, rng):
    image = np.round(rng.random((7, 11)) * 255) / 255
    dataio.write_image(tmp_path / 'x.pgm', image)
    assert (tmp_path / 'x.pgm').read_bytes().startswith(b'P5')
    assert np.allclose(dataio.read_image(tmp_path / 'x.pgm'), image, atol=1e-6)


def test_sample_validates_label():
    with pytest.raises(ValueError):
        dataio.Sample(np.zeros((4, 4)), ['x'])
    with pytest.raises(ValueError):
        dataio.Sample(np.zeros(4), ['x', EOS])


def test_expression_tokens_are_braced():
    node = Row((Script(Symbol('x'), Symbol('2'), '^'), Symbol('+'), Fraction(Symbol('a'), Symbol('b'))))
    assert dataio.expression_tokens(node) == ['x', '^', '{', '2', '}', '+', '\\frac', '{', 'a', '}', '{', 'b', '}']


def test_grammar_config_validation():
    with pytest.raises(ValueError):
        GrammarConfig(symbol_weight=0, concat_weight=0, sup_weight=0, sub_weight=0, frac_weight=0)
    with pytest.raises(ValueError):
        GrammarConfig(symbols=('\\unknown',))
    assert set(GrammarConfig(sup_weight=0, sub_weight=0, frac_weight=0).token_set()) == set(GrammarConfig().symbols)


def test_sampled_labels_stay_within_token_set(toy_grammar):
    allowed = set(toy_grammar.token_set()) | {EOS}
    for index in range(30):
        _, label, _ = dataio.generate_sample(toy_grammar, 3, index)
        assert set(label) <= allowed
        assert label[-1] == EOS


def test_single_symbol_sample():
    cfg = GrammarConfig(symbols=('x',), concat_weight=0, sup_weight=0, sub_weight=0, frac_weight=0, max_depth=1)
    image, label, layout = dataio.generate_sample(cfg, 0, 0)
    assert label == ['x', EOS]
    assert len(layout.glyphs) == 1 and not layout.bars
    assert image.max() > 0.5
    assert image.shape == dataio.canvas_size(layout, cfg)


def test_fraction_geometry():
    cfg = GrammarConfig(size_jitter=0, position_jitter=0, stroke_jitter=0)
    rng = np.random.default_rng(0)
    node = Fraction(Row((Symbol('x'), Symbol('+'), Symbol('1'))), Symbol('y'))
    layout = dataio.layout_expression(node, cfg, rng)
    (bar,) = layout.bars
    numerator, denominator = layout.glyphs[:3], layout.glyphs[3:]
    assert all(g.bottom < bar.y for g in numerator)
    assert all(g.top > bar.y for g in denominator)
    for g in layout.glyphs:
        assert bar.x0 <= g.x and g.right <= bar.x1

    image = dataio.render_layout(layout, cfg, rng)
    bar_row = int(round(cfg.margin + layout.ascent + bar.y))
    ink_cols = np.nonzero((image[bar_row - 1:bar_row + 2] > 0.5).any(axis=0))[0]
    glyph_cols = [c for g in layout.glyphs for c in (g.x + cfg.margin, g.right + cfg.margin)]
    assert ink_cols.min() <= min(glyph_cols) and ink_cols.max() >= max(glyph_cols) - 1
    assert image[:bar_row - 1].max() > 0.5 and image[bar_row + 2:].max() > 0.5


def test_generation_is_deterministic(toy_grammar):
    first, label_a, _ = dataio.generate_sample(toy_grammar, 11, 4)
    second, label_b, _ = dataio.generate_sample(toy_grammar, 11, 4)
    assert label_a == label_b
    assert np.array_equal(first, second)


def test_generation_retry_cap():
    cfg = GrammarConfig(symbols=('x',), max_height=8, max_width=8, max_retries=3)
    with pytest.raises(GenerationError, match='after 3 attempts'):
        dataio.generate_sample(cfg, 0, 0)


def test_generate_dataset_is_reproducible(tmp_path, toy_grammar):
    first = dataio.generate_dataset(toy_grammar, 6, seed=5, out_dir=tmp_path / 'a')
    second = dataio.generate_dataset(toy_grammar, 6, seed=5, out_dir=tmp_path / 'b', workers=3)
    assert first.read_bytes() == second.read_bytes()
    for name in sorted(os.listdir(tmp_path / 'a' / 'images')):
        assert (tmp_path / 'a' / 'images' / name).read_bytes() == (tmp_path / 'b' / 'images' / name).read_bytes()
    vocab = dataio.build_vocabulary([first])
    assert len(dataio.load_dataset(first, vocab)) == 6


def test_toy_dataset_fits_canvas(toy_dataset_dir, toy_grammar):
    vocab = dataio.build_vocabulary([toy_dataset_dir])
    for sample in dataio.load_dataset(toy_dataset_dir, vocab):
        assert sample.image.shape[0] <= toy_grammar.max_height
        assert sample.image.shape[1] <= toy_grammar.max_width
