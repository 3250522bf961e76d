# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

"""
Flat ``key=value`` run configuration.

Every key belongs to exactly one section dataclass; its type and default come
from that dataclass. Tuples are written comma-separated, booleans as
true/false. ``#`` starts a comment.
"""

import logging
import os
import typing
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

from tabulate import tabulate

from .augment import AugmentConfig
from .dataio import GrammarConfig
from .decoder import DecoderConfig, DropAttnConfig
from .encoder import EncoderConfig
from .trainer import TrainConfig

log = logging.getLogger(__name__)

CONFIG_ENV = 'HMER_CONFIG'
RESOLVED_NAME = 'config.resolved'

# (attribute, dataclass, field renames for the flat namespace)
SECTIONS = (
    ('grammar', GrammarConfig, {}),
    ('augment', AugmentConfig, {}),
    ('encoder', EncoderConfig, {}),
    ('decoder', DecoderConfig, {}),
    ('drop', DropAttnConfig, {'enabled': 'drop_attention'}),
    ('train', TrainConfig, {}),
)

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KeySpec:
    key: str
    section: str
    field: str
    type: object
    default: object


def _key_table() -> 'OrderedDict[str, KeySpec]':
    table: 'OrderedDict[str, KeySpec]' = OrderedDict()
    for section, cls, renames in SECTIONS:
        hints = typing.get_type_hints(cls)
        instance = cls()
        for f in fields(cls):
            key = renames.get(f.name, f.name)
            if key in table:
                raise RuntimeError(f'config key {key} is defined by both {table[key].section} and {section}')
            table[key] = KeySpec(key, section, f.name, hints[f.name], getattr(instance, f.name))
    return table


KEYS = _key_table()


def parse_value(spec: KeySpec, raw: str):
    raw = raw.strip()
    kind = spec.type
    origin = typing.get_origin(kind)
    if origin in (tuple, Tuple):
        item_type = typing.get_args(kind)[0]
        items = [item.strip() for item in raw.split(',') if item.strip()]
        return tuple(_scalar(item_type, item, spec.key) for item in items)
    return _scalar(kind, raw, spec.key)


def _scalar(kind, raw: str, key: str):
    if kind is bool:
        lowered = raw.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f'{key} expects a boolean, got {raw!r}')
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f'{key} expects an integer, got {raw!r}') from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f'{key} expects a number, got {raw!r}') from None
    return raw


def format_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(format_value(v) for v in value)
    return str(value)


class RunConfig:
    """One instance of every section dataclass, addressed through flat keys."""

    def __init__(self, values: Optional[Mapping[str, object]] = None):
        values = dict(values or {})
        unknown = sorted(set(values) - set(KEYS))
        if unknown:
            raise ConfigError(f'unknown config key {unknown[0]}')
        for section, cls, _ in SECTIONS:
            kwargs = {spec.field: values[key] for key, spec in KEYS.items()
                      if spec.section == section and key in values}
            try:
                setattr(self, section, cls(**kwargs))
            except ValueError as e:
                raise ConfigError(f'invalid {section} settings: {e}') from e

    def get(self, key: str):
        spec = KEYS[key]
        return getattr(getattr(self, spec.section), spec.field)

    def as_dict(self) -> 'OrderedDict[str, object]':
        return OrderedDict((key, self.get(key)) for key in KEYS)

    def replace(self, **values) -> 'RunConfig':
        merged = self.as_dict()
        merged.update(values)
        return RunConfig(merged)

    @property
    def seed(self) -> int:
        return self.train.seed

    def dump(self) -> str:
        lines = [f'# resolved configuration, root seed {self.seed}']
        lines += [f'{key}={format_value(value)}' for key, value in self.as_dict().items()]
        return '\n'.join(lines) + '\n'

    def write(self, run_dir) -> Path:
        run_dir = Path(run_dir)
        os.makedirs(run_dir, exist_ok=True)
        path = run_dir / RESOLVED_NAME
        path.write_text(self.dump(), encoding='utf-8')
        log.info('resolved configuration written to %s', path)
        return path

    def table(self) -> str:
        rows = [(key, KEYS[key].section, format_value(value)) for key, value in self.as_dict().items()]
        return tabulate(rows, headers=['key', 'section', 'value'], disable_numparse=True)


def parse_config(path=None, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Read ``path`` (may be None) and apply ``overrides`` (raw strings), which win over the file."""
    values: Dict[str, object] = {}
    if path is not None:
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                lines = handle.readlines()
        except OSError as e:
            raise ConfigError(f'cannot read config {path}: {e.strerror or e}') from e
        for lineno, line in enumerate(lines, start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f'{path}:{lineno}: expected key=value, got {line!r}')
            key, raw = (part.strip() for part in line.split('=', 1))
            if key not in KEYS:
                raise ConfigError(f'{path}:{lineno}: unknown config key {key!r}')
            try:
                values[key] = parse_value(KEYS[key], raw)
            except ValueError as e:
                raise ConfigError(f'{path}:{lineno}: {e}') from e
    for key, raw in (overrides or {}).items():
        if key not in KEYS:
            raise ConfigError(f'unknown config key {key!r} on the command line')
        try:
            values[key] = parse_value(KEYS[key], raw)
        except ValueError as e:
            raise ConfigError(f'--{key.replace("_", "-")}: {e}') from e
    return RunConfig(values)


def default_config_path() -> Optional[str]:
    return os.environ.get(CONFIG_ENV) or None
