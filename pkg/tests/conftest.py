"""Shared fixtures and the acceptance-criteria summary."""
from __future__ import annotations

import numpy as np
import pytest

from capforge import checkpoint as ck
from capforge.config import ModelConfig
from capforge.experiments import toy_vocabulary
from capforge.model import CaptionModel

_CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        _CRITERIA.setdefault(number, (title, []))[1].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[number]
        ok = outcomes and all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {number:>2}. {title} ({len(outcomes)} checks)")


@pytest.fixture
def vocab():
    return toy_vocabulary()


def make_model(seed: int = 0, preset: str = "tiny", vocab=None, **overrides) -> CaptionModel:
    vocab = vocab or toy_vocabulary()
    cfg = ModelConfig.from_preset(preset, len(vocab), **overrides)
    model = CaptionModel(cfg, vocab)
    ck.random_init(model, seed)
    return model


@pytest.fixture
def tiny_model(vocab):
    return make_model(0, vocab=vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
