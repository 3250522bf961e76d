# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

"""
Command-line entry point.

    python -m hmer gen-data --config configs/toy.cfg --out data/train --n 2000 --seed 7
    python -m hmer train --train data/train --val data/val --out runs/toy
    python -m hmer evaluate --checkpoint runs/toy/best.ckpt --test data/test
    python -m hmer predict --checkpoint runs/toy/best.ckpt --image sample.pgm
    python -m hmer attn-viz --checkpoint runs/toy/best.ckpt --image sample.pgm --out viz
    python -m hmer ablate --train data/train --val data/val --test data/test --out runs/ablation

Every config key is also accepted as ``--<key>`` (dashes or underscores) and
wins over the config file, which defaults to ``$HMER_CONFIG``.
"""

import argparse
import logging
import statistics
import sys
from collections import OrderedDict
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import augment as aug
from .config import CONFIG_ENV, KEYS, ConfigError, RunConfig, default_config_path, parse_config
from .dataio import (DatasetError, GenerationError, Sample, TokenizationError, Vocabulary, build_vocabulary,
                     generate_dataset, load_dataset, read_image)
from .evalviz import EvalReport, exprate, format_ablation_table, format_report_table, render_attention_maps
from .model import Recognizer
from .nncore import GradientError, ShapeError, derive_rng, derive_seed
from .trainer import (DivergenceError, evaluate_ensemble, evaluate_model, load_checkpoint, train,
                      train_ensemble)

log = logging.getLogger(__name__)

VOCAB_NAME = 'vocab.txt'
ATTENTION_NAME = 'attention.tsv'

# (row label, augment mode, drop attention)
ABLATION_ARMS = (
    ('normalized to fixed height', aug.FIXED_HEIGHT, False),
    ('zero-padded only', aug.PAD_ONLY, False),
    ('scale augmentation', aug.SCALE_AUGMENT, False),
    ('scale augmentation + drop attention', aug.SCALE_AUGMENT, True),
)

HANDLED_ERRORS = (ConfigError, DatasetError, TokenizationError, GenerationError, DivergenceError, ShapeError,
                  GradientError, ValueError, OSError)


def build_model(cfg: RunConfig, vocab: Vocabulary, seed: int) -> Recognizer:
    return Recognizer(vocab, cfg.encoder, cfg.decoder, cfg.drop, cfg.augment.canvas, seed)


def _test_sets(dirs: Sequence[str], vocab: Vocabulary) -> 'OrderedDict[str, List[Sample]]':
    sets: 'OrderedDict[str, List[Sample]]' = OrderedDict()
    for directory in dirs:
        name = Path(directory).name or str(directory)
        if name in sets:
            name = str(directory)
        sets[name] = load_dataset(directory, vocab)
    return sets


def _load_members(paths: Sequence[str]):
    members, metas = [], []
    for path in paths:
        model, meta, _ = load_checkpoint(path)
        members.append(model)
        metas.append(meta)
    return members, metas


def _augment_for(model: Recognizer, meta: dict, cfg: RunConfig) -> aug.AugmentConfig:
    if 'augment' in meta:
        return aug.AugmentConfig(**meta['augment'])
    return replace(cfg.augment, canvas_h=model.canvas[0], canvas_w=model.canvas[1])


####################
# Subcommands      #
####################
def cmd_gen_data(args, cfg: RunConfig) -> int:
    cfg.write(args.out)
    manifest = generate_dataset(cfg.grammar, args.n, cfg.seed, args.out, workers=args.workers)
    print(manifest)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    run_dir = Path(args.out or cfg.train.checkpoint_dir)
    cfg.write(run_dir)
    manifests = [args.train] + ([args.val] if args.val else [])
    vocab = build_vocabulary(manifests)
    vocab.save(run_dir / VOCAB_NAME)
    train_set = load_dataset(args.train, vocab)
    val_set = load_dataset(args.val, vocab) if args.val else []
    if args.models > 1:
        checkpoints = train_ensemble(lambda seed: build_model(cfg, vocab, seed), args.models,
                                     train_set, val_set, cfg.train, cfg.augment, run_dir)
    else:
        model = build_model(cfg, vocab, derive_seed(cfg.seed, 'params', 0))
        checkpoints = [train(model, train_set, val_set, cfg.train, cfg.augment, run_dir)]
    for checkpoint in checkpoints:
        print(checkpoint.path)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    if args.out:
        cfg.write(args.out)
    max_len = cfg.train.max_decode_len
    reports: Dict[str, EvalReport] = OrderedDict()
    if args.oracle:
        vocab = build_vocabulary(args.test)
        for name, samples in _test_sets(args.test, vocab).items():
            labels = [s.label for s in samples]
            reports[name] = exprate(labels, labels, [s.source for s in samples])
    else:
        if not args.checkpoint:
            raise ValueError('evaluate needs --checkpoint (or --oracle)')
        members, metas = _load_members(args.checkpoint)
        augment = _augment_for(members[0], metas[0], cfg)
        for name, samples in _test_sets(args.test, members[0].vocab).items():
            if len(members) == 1:
                reports[name] = evaluate_model(members[0], samples, augment, max_len)
            else:
                reports[name] = evaluate_ensemble(members, samples, augment, max_len)
    for name, report in reports.items():
        log.info('%s: ExpRate %.2f%% over %d samples', name, report.exprate, report.count)
        if args.out:
            report.write(Path(args.out) / f'report_{name}.tsv')
    print(format_report_table(reports))
    return 0


def _prepared_image(model: Recognizer, meta: dict, cfg: RunConfig, path: str):
    return aug.prepare_test_image(read_image(path), _augment_for(model, meta, cfg))


def cmd_predict(args, cfg: RunConfig) -> int:
    model, meta, _ = load_checkpoint(args.checkpoint)
    tokens, _ = model.predict(_prepared_image(model, meta, cfg, args.image), cfg.train.max_decode_len)
    print(' '.join(tokens))
    return 0


def cmd_attn_viz(args, cfg: RunConfig) -> int:
    cfg.write(args.out)
    model, meta, _ = load_checkpoint(args.checkpoint)
    image = _prepared_image(model, meta, cfg, args.image)
    tokens, record = model.predict(image, cfg.train.max_decode_len)
    record.save(Path(args.out) / ATTENTION_NAME)
    paths = render_attention_maps(image, record, model.grid, args.out)
    print(' '.join(tokens))
    for path in paths:
        print(path)
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    cfg.write(out)
    manifests = [args.train] + ([args.val] if args.val else []) + list(args.test)
    vocab = build_vocabulary(manifests)
    vocab.save(out / VOCAB_NAME)
    train_set = load_dataset(args.train, vocab)
    val_set = load_dataset(args.val, vocab) if args.val else []
    tests = _test_sets(args.test, vocab)
    if args.rescale_test:
        tests = OrderedDict(
            (name, aug.rescale_samples(samples, cfg.augment, derive_rng(cfg.seed, 'test-scales', name)))
            for name, samples in tests.items())

    results: Dict[str, Dict[str, float]] = OrderedDict()
    for label, mode, drop in ABLATION_ARMS:
        per_seed: Dict[str, List[float]] = OrderedDict((name, []) for name in tests)
        for run in range(args.seeds):
            arm_cfg = cfg.replace(mode=mode, drop_attention=drop, seed=cfg.seed + run)
            run_dir = out / f'{mode}{"_drop" if drop else ""}' / f'seed{run}'
            arm_cfg.write(run_dir)
            model = build_model(arm_cfg, vocab, derive_seed(arm_cfg.seed, 'params', 0))
            best = train(model, train_set, val_set, arm_cfg.train, arm_cfg.augment, run_dir)
            model, _, _ = load_checkpoint(best.path)
            for name, samples in tests.items():
                rate = evaluate_model(model, samples, arm_cfg.augment, arm_cfg.train.max_decode_len).exprate
                per_seed[name].append(rate)
                log.info('%s seed %d on %s: ExpRate %.2f%%', label, run, name, rate)
        results[label] = OrderedDict((name, statistics.median(rates)) for name, rates in per_seed.items())

    labels = [arm[0] for arm in ABLATION_ARMS]
    scale_table = format_ablation_table(f'input processing (median of {args.seeds} seeds)',
                                        [(label, results[label]) for label in labels[:3]])
    drop_table = format_ablation_table(f'drop attention (median of {args.seeds} seeds)',
                                       [('without drop attention', results[labels[2]]),
                                        ('with drop attention', results[labels[3]])])
    text = f'{scale_table}\n\n{drop_table}\n'
    (out / 'ablation.txt').write_text(text, encoding='utf-8')
    print(text)
    return 0


####################
# Argument parsing #
####################
def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    parent.add_argument('--config', help=f'key=value config file (default: ${CONFIG_ENV})')
    parent.add_argument('--verbose', '-v', action='store_true', help='debug logging and tracebacks')
    overrides = parent.add_argument_group('config overrides')
    for key, spec in KEYS.items():
        flags = [f'--{key.replace("_", "-")}']
        if '_' in key:
            flags.append(f'--{key}')
        overrides.add_argument(*flags, dest=f'cfg_{key}', metavar='VALUE', default=None,
                               help=f'{spec.section} setting (default: {spec.default})')
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog='hmer', description='Handwritten math expression recognition.',
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest='command', required=True, metavar='command')

    p = sub.add_parser('gen-data', parents=[parent], allow_abbrev=False, help='render a synthetic dataset')
    p.add_argument('--out', required=True, help='output dataset directory')
    p.add_argument('--n', type=int, required=True, help='number of samples')
    p.add_argument('--workers', type=int, default=1, help='parallel render threads')
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser('train', parents=[parent], allow_abbrev=False, help='train a recognizer')
    p.add_argument('--train', required=True, help='training dataset directory')
    p.add_argument('--val', help='validation dataset directory')
    p.add_argument('--out', help='run directory (default: checkpoint_dir)')
    p.add_argument('--models', type=int, default=1, help='differently initialised models to train')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('evaluate', parents=[parent], allow_abbrev=False,
                       help='ExpRate over one or more test sets')
    p.add_argument('--checkpoint', action='append', default=[], help='checkpoint; repeat for an ensemble')
    p.add_argument('--test', action='append', required=True, help='test dataset directory; may repeat')
    p.add_argument('--oracle', action='store_true', help='use references as predictions')
    p.add_argument('--out', help='directory for the resolved config and per-set reports')
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser('predict', parents=[parent], allow_abbrev=False, help='decode one image')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--image', required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser('attn-viz', parents=[parent], allow_abbrev=False,
                       help='decode one image and render attention overlays')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--image', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_attn_viz)

    p = sub.add_parser('ablate', parents=[parent], allow_abbrev=False,
                       help='input-processing and drop-attention ablations')
    p.add_argument('--train', required=True)
    p.add_argument('--val')
    p.add_argument('--test', action='append', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--seeds', type=int, default=1, help='runs per arm; the table reports the median')
    p.add_argument('--rescale-test', action='store_true', help='rescale test images by k drawn from [k_min, k_max]')
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    logging.basicConfig(format='[%(asctime)s] [%(levelname)7s] - %(message)s',
                        level=logging.DEBUG if args.verbose else logging.INFO)
    overrides = {key: getattr(args, f'cfg_{key}') for key in KEYS if getattr(args, f'cfg_{key}') is not None}
    try:
        cfg = parse_config(args.config or default_config_path(), overrides)
        log.debug('configuration:\n%s', cfg.table())
        return args.handler(args, cfg)
    except HANDLED_ERRORS as e:
        if args.verbose:
            log.exception('%s failed', args.command)
        else:
            logging.error('%s: %s', args.command, e)
        return 1


if __name__ == '__main__':
    sys.exit(main())
