import pytest

from lesioncascade.data import SynthConfig, generate_splits
from lesioncascade.model import ModelConfig

TINY_MODEL = dict(block_channels=(4, 4, 8, 8, 8))
TINY_DATA = dict(train_per_class=4, test_per_class=3)

TINY_INI = """\
[model]
stages = 2
block_channels = 4, 4, 8, 8, 8
[train]
max_iters = 12
warmup_iters = 6
eval_interval = 6
batch_size = 4
[data]
train_per_class = 4
test_per_class = 3
"""


@pytest.fixture(scope="session")
def tiny_splits():
    return generate_splits(SynthConfig(**TINY_DATA))


@pytest.fixture
def tiny_model_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
