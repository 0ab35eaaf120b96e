import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from stochuda import synth  # noqa: E402
from stochuda.config import GeneratorConfig  # noqa: E402


def tiny_generator_config(**kw):
    base = dict(height=32, width=32, source_train=6, target_train=6, target_val=4, source_val=4)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    synth.generate_dataset(tiny_generator_config(), root)
    return root


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[n])
