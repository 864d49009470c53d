from dataclasses import replace

import numpy as np
import pytest

from teleograsp.agents import Phenotype, make_subject
from teleograsp.model import Condition, ObjectSpec, Trial
from teleograsp.teleop import SimConfig, run_trial


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def labeled_corpus(n, seed=0, experiment="action", phenotypes=tuple(Phenotype), params=None):
    """Yield ``(agent, log)`` pairs cycling through conditions and phenotypes.

    ``params`` optionally maps AgentParams field names to fixed values that
    override the per-subject draws (e.g. an exact timing fraction).
    """
    rng = np.random.default_rng(seed)
    cfg = SimConfig()
    conds = list(Condition)
    for i in range(n):
        agent = make_subject(seed * 100_003 + i, conds[i % 3])
        fixed = {"phenotype": phenotypes[(i // 3) % len(phenotypes)], **(params or {})}
        agent = replace(agent, params=replace(agent.params, **fixed))
        d = float(rng.choice([4.0, 6.0, 8.0, 10.0, 12.0]))
        yield agent, run_trial(agent, Trial(i % 110, ObjectSpec(d), False), experiment, cfg, seed=seed * 7919 + i)


@pytest.fixture(scope="session")
def corpus():
    return labeled_corpus
