# SPDX-FileCopyrightText: 2025 hmer contributors
# SPDX-License-Identifier: Apache-2.0

# pylint: disable=W0621  # redefined-outer-name

# This file is a pytest root configuration file and provide the following functionalities:
# 1. Defines a few fixtures that could be used under the whole project.
# 2. Defines a few hook functions.
#
# Long training runs are marked `slow` and only run with `--run-slow`.

import os
import sys
from datetime import datetime
from typing import List, Optional, Tuple

import numpy as np
import pytest
from _pytest.config import Config, ExitCode
from _pytest.main import Session
from _pytest.python import Function
from _pytest.reports import TestReport
from _pytest.runner import CallInfo
from _pytest.terminal import TerminalReporter

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from hmer.dataio import GrammarConfig, Vocabulary, generate_dataset  # noqa: E402
from hmer.decoder import DecoderConfig, DropAttnConfig  # noqa: E402
from hmer.encoder import EncoderConfig  # noqa: E402
from hmer.model import Recognizer  # noqa: E402

DEFAULT_TIMEOUT = 10 * 60
SLOW_TIMEOUT = 60 * 60

TINY_CANVAS = (32, 64)
TINY_TOKENS = ('x', 'y', '+')


def tiny_encoder_config(**kwargs) -> EncoderConfig:
    values = dict(stem_channels=2, stage_channels=(2, 3, 3, 4), stage_dropout=(0.1, 0.2, 0.3, 0.3))
    values.update(kwargs)
    return EncoderConfig(**values)


def tiny_decoder_config(**kwargs) -> DecoderConfig:
    values = dict(hidden_dim=5, embed_dim=3, attn_dim=4, max_grid_h=2, max_grid_w=4, coverage_channels=2)
    values.update(kwargs)
    return DecoderConfig(**values)


def build_tiny_recognizer(vocab: Vocabulary, seed: int = 0, encoder: Optional[EncoderConfig] = None,
                          decoder: Optional[DecoderConfig] = None, drop: Optional[DropAttnConfig] = None,
                          canvas: Tuple[int, int] = TINY_CANVAS) -> Recognizer:
    return Recognizer(vocab, encoder or tiny_encoder_config(), decoder or tiny_decoder_config(),
                      drop or DropAttnConfig(), canvas, seed)


############
# Fixtures #
############
@pytest.fixture(scope='session', autouse=True)
def session_tempdir() -> str:
    _tmpdir = os.path.join(
        os.path.dirname(__file__),
        'pytest_log',
        datetime.now().strftime('%Y-%m-%d_%H-%M-%S'),
    )
    os.makedirs(_tmpdir, exist_ok=True)
    return _tmpdir


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vocab() -> Vocabulary:
    return Vocabulary.from_tokens(TINY_TOKENS)


@pytest.fixture
def tiny_recognizer(tiny_vocab: Vocabulary) -> Recognizer:
    return build_tiny_recognizer(tiny_vocab)


@pytest.fixture(scope='session')
def toy_grammar() -> GrammarConfig:
    return GrammarConfig(symbols=('x', 'y', '1', '2', '+'), glyph_size=16, max_depth=2, max_row_length=3,
                         max_height=64, max_width=256)


@pytest.fixture(scope='session')
def toy_dataset_dir(tmp_path_factory, toy_grammar: GrammarConfig) -> str:
    out = tmp_path_factory.mktemp('toy_dataset')
    generate_dataset(toy_grammar, 12, seed=7, out_dir=out)
    return str(out)


def pytest_addoption(parser):
    parser.addoption(
        '--run-slow',
        action='store_true',
        default=False,
        help='run the long training cases marked "slow"',
    )


##################
# Hook functions #
##################
_hmer_pytest_key = pytest.StashKey['HmerPytest']


def pytest_configure(config: Config) -> None:
    config.stash[_hmer_pytest_key] = HmerPytest(run_slow=config.getoption('--run-slow'))
    config.pluginmanager.register(config.stash[_hmer_pytest_key])


def pytest_unconfigure(config: Config) -> None:
    _hmer_pytest = config.stash.get(_hmer_pytest_key, None)
    if _hmer_pytest:
        del config.stash[_hmer_pytest_key]
        config.pluginmanager.unregister(_hmer_pytest)


class HmerPytest:
    def __init__(self, run_slow: bool = False):
        self.run_slow = run_slow
        self._failed_cases: List[Tuple[str, bool]] = []  # (test_case_name, is_xfail)

    @property
    def failed_cases(self) -> List[str]:
        return [case for case, is_xfail in self._failed_cases if not is_xfail]

    @property
    def xfail_cases(self) -> List[str]:
        return [case for case, is_xfail in self._failed_cases if is_xfail]

    @pytest.hookimpl(tryfirst=True)
    def pytest_collection_modifyitems(self, items: List[Function]) -> None:
        items.sort(key=lambda x: os.path.dirname(x.path))

        skip_slow = pytest.mark.skip(reason='needs --run-slow')
        for item in items:
            is_slow = 'slow' in item.keywords
            # set default timeout for each case
            if 'timeout' not in item.keywords:
                item.add_marker(pytest.mark.timeout(SLOW_TIMEOUT if is_slow else DEFAULT_TIMEOUT))
            if is_slow and not self.run_slow:
                item.add_marker(skip_slow)

    def pytest_runtest_makereport(self, item: Function, call: CallInfo[None]) -> Optional[TestReport]:
        report = TestReport.from_item_and_call(item, call)
        if report.outcome == 'failed':
            is_xfail = report.keywords.get('xfail', False)
            self._failed_cases.append((item.nodeid, is_xfail))

        return report

    def pytest_sessionfinish(self, session: Session, exitstatus: int) -> None:
        if exitstatus != 0:
            if exitstatus == ExitCode.NO_TESTS_COLLECTED:
                session.exitstatus = 0

    def pytest_terminal_summary(self, terminalreporter: TerminalReporter) -> None:
        if self.xfail_cases:
            terminalreporter.section('xfail cases', bold=True, yellow=True)
            terminalreporter.line('\n'.join(self.xfail_cases))

        if self.failed_cases:
            terminalreporter.section('Failed cases', bold=True, red=True)
            terminalreporter.line('\n'.join(self.failed_cases))
