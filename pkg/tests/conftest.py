"""Shared fixtures: the digit split and networks trained once per session."""

import time

import numpy as np
import pytest

from ppgn import nets
from ppgn.data import desk_split

CLASSIFIER_CONFIG = dict(lr=1e-3, epochs=40, lr_decay=0.93, weight_decay=1e-4, shift_augment=True)


@pytest.fixture(scope="session")
def digits():
    return desk_split()


def pytest_configure(config):
    config.acceptance_lines = []
    config.train_seconds = {}


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines):
            terminalreporter.write_line(line)


def _timed(request, name, fn):
    start = time.perf_counter()
    out = fn()
    request.config.train_seconds[name] = time.perf_counter() - start
    return out


@pytest.fixture(scope="session")
def classifier(digits, request):
    train, test = digits
    return _timed(request, "classifier", lambda: nets.train_classifier(
        train.images, train.labels, nets.TrainConfig(seed=0, **CLASSIFIER_CONFIG), test=(test.images, test.labels)))


@pytest.fixture(scope="session")
def heldout_classifier(digits, request):
    train, test = digits
    return _timed(request, "heldout", lambda: nets.train_classifier(
        train.images, train.labels, nets.TrainConfig(seed=101, **CLASSIFIER_CONFIG), test=(test.images, test.labels),
        name="heldout"))


@pytest.fixture(scope="session")
def generator(digits, classifier, request):
    train, _ = digits
    G, _ = _timed(request, "generator", lambda: nets.train_generator(
        classifier, train.images, "noiseless", config=nets.TrainConfig(lr=2e-4, epochs=30)))
    return G


@pytest.fixture
def tiny_classifier():
    layers, taps = nets.classifier_spec((12, 8, 6, 3))
    return nets.init_model("tiny", layers, seed=3, taps=taps)


@pytest.fixture
def tiny_generator():
    return nets.init_model("tiny_g", nets.chain_specs((6, 10, 12), "relu", "sigmoid"), seed=4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
