import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """3 references x 5 types x 2 severities at 32 px."""
    from mqaf.imaging import CorpusConfig, generate_corpus

    out = tmp_path_factory.mktemp("tiny_corpus")
    return generate_corpus(CorpusConfig(n_references=3, image_size=32, severities=(1, 4)), seed=0, out_dir=out)


@pytest.fixture
def tiny_model_config():
    from mqaf.model import ModelConfig

    return ModelConfig(input_size=16, blocks=2, dim=8, memory_size=4, awn_hidden=8)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion ")[1].split()[0])):
            terminalreporter.write_line(line)
