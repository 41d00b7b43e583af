import pytest
from hypothesis import settings

from helpers import make_tiny_extractor, tiny_net, write_corpus

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


@pytest.fixture
def tiny_cfg():
    return tiny_net()


@pytest.fixture
def tiny_extractor():
    return make_tiny_extractor()


@pytest.fixture
def corpus(tmp_path):
    src = tmp_path / "src"
    write_corpus(src, [(64, 64), (64, 96), (48, 64), (96, 64)])
    return src


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
