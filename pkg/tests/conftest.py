import time

import numpy as np
import pytest

from hrhf import config as cfgmod
from hrhf import protocol
from hrhf.dataset import make_scenes


class Experiments:
    """Memoized desk-scale runs shared across the session.

    Scenes and step-0 models depend only on (protocol, seed), so every method
    run for a seed starts from the same step-0 teacher.
    """

    def __init__(self):
        self._data = {}
        self._initial = {}
        self._runs = {}
        # wall-clock seconds spent computing each memoized entry
        self.seconds = {}

    def config(self, proto, seed):
        cfg = cfgmod.desk_preset(seed=seed)
        cfg.data = cfgmod.DataConfig(protocol=proto)
        return cfg

    def data(self, proto, seed):
        key = (proto, seed)
        if key not in self._data:
            cfg = self.config(proto, seed)
            classes = cfg.data.step_spec().classes
            train = make_scenes([seed, 1], cfg.data.train_scenes, classes)
            test = make_scenes([seed, 2], cfg.data.test_scenes, classes)
            self._data[key] = (train, test)
        return self._data[key]

    def initial(self, proto, seed):
        key = (proto, seed)
        if key not in self._initial:
            cfg = self.config(proto, seed)
            train, _ = self.data(proto, seed)
            plan = cfg.plan()
            start = time.perf_counter()
            self._initial[key] = protocol.train_initial(plan, protocol.step_data(train, plan.step_spec)[0])[0]
            self.seconds[("initial",) + key] = time.perf_counter() - start
        return self._initial[key]

    def run(self, proto, seed, method):
        """Reports (one per step) of ``method``."""
        key = (proto, seed, method)
        if key not in self._runs:
            cfg = self.config(proto, seed)
            train, test = self.data(proto, seed)
            initial = self.initial(proto, seed)
            start = time.perf_counter()
            _, reports = protocol.run_plan(cfg.plan(method=method), train, test, initial=initial)
            self.seconds[key] = time.perf_counter() - start
            self._runs[key] = reports
        return self._runs[key]


# one summary line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture(scope="session")
def experiments():
    return Experiments()


@pytest.fixture(scope="session")
def toy_teacher(experiments):
    """Step-0 model of the 3-1 protocol (seed 0) and its held-out scenes."""
    model = experiments.initial("3-1", 0)
    _, test = experiments.data("3-1", 0)
    return model, test


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
