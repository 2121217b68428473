import numpy as np
import pytest

from streamreason import env
from streamreason.cache import CacheConfig
from streamreason.core import AnswerType
from streamreason.decoder import init_decoder
from streamreason.engine import EngineConfig, required_capacity


@pytest.fixture(scope="session")
def params():
    return init_decoder(7)


@pytest.fixture
def short_script():
    return env.make_script(6, 4, "B", AnswerType.MULTIPLE_CHOICE, np.random.default_rng(5))


def sized(script, window, engine_config=EngineConfig(), baseline=False):
    return CacheConfig(window_chunks=window,
                       capacity_slots=required_capacity(script, CacheConfig(window_chunks=window),
                                                        engine_config, baseline))


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
