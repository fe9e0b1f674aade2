import numpy as np
import pytest

from trajrefine.model import ModelConfig, TwoStageModel
from trajrefine.proposer import ProposerConfig
from trajrefine.synth import GeneratorConfig, generate_scenario


def small_config(d=16, modes=3, future_steps=5, past_steps=6, heads=2, dropout=0.1, **refiner):
    from trajrefine.refiner import RefinerConfig
    return ModelConfig(ProposerConfig(d=d, modes=modes, heads=heads, dropout=dropout,
                                      past_steps=past_steps, future_steps=future_steps),
                       RefinerConfig(heads=heads, dropout=dropout, **refiner))


def small_scenarios(n=4, seed=0, past_steps=6, future_steps=5, agents=(2, 3)):
    cfg = GeneratorConfig(rng_seed=seed, past_steps=past_steps, future_steps=future_steps,
                          agents_per_scene=agents)
    return [generate_scenario(cfg, i) for i in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scenarios():
    return small_scenarios(6)


@pytest.fixture
def tiny_model():
    return TwoStageModel(small_config(), seed=3)


_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number, title, ok, detail=""):
    _ACCEPTANCE[number] = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
