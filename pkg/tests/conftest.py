import numpy as np
import pytest

from earlyguard import gru
from earlyguard.traces import BehaviorTrace, LabeledDataset, fit_normalizer, synth_generate

ACCEPTANCE_LOG: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LOG:
            terminalreporter.write_line(line)


def make_trace(sid, label, values, first_seen=None, family=None, variant=None):
    return BehaviorTrace(sid, label, np.asarray(values, dtype=float), first_seen, family, variant)


@pytest.fixture(scope="session")
def small_data():
    return synth_generate(None, 40, 40, seed=3)


@pytest.fixture(scope="session")
def tiny_config():
    return gru.HyperConfig(1, True, 6, 3, 0.0, "none", "none", 32, 3)


@pytest.fixture(scope="session")
def tiny_network(small_data, tiny_config):
    net = gru.init_params(tiny_config, 11)
    gru.train(net, small_data, fit_normalizer(small_data), 12)
    return net


@pytest.fixture(scope="session")
def random_traces():
    """1000 random valid traces (not generator shaped)."""
    rng = np.random.default_rng(99)
    out = []
    for i in range(1000):
        x = rng.uniform(0, 100, size=(8, 10))
        out.append(BehaviorTrace(f"r{i}", "malicious" if i % 2 else "benign", x))
    return LabeledDataset(tuple(out), "test")


def scattered_network(seed, normalizer=None, hidden=4):
    """Untrained network with large random weights, so scores spread across (0, 1)."""
    net = gru.init_params(gru.HyperConfig(1, True, hidden, 1), seed)
    rng = np.random.default_rng(seed + 1000)
    for name in net.params:
        net.params[name] = rng.normal(0.0, 1.5, net.params[name].shape)
    net.normalizer = normalizer
    return net


@pytest.fixture(scope="session")
def random_members(random_traces):
    norm = fit_normalizer(random_traces)
    return [scattered_network(s, norm) for s in (1, 2, 3)]
