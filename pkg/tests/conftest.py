import sys
import warnings
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from modlab.model import Model, ModelConfig  # noqa: E402
from modlab.tasks import ToyTaskSpec, generate_dataset  # noqa: E402


@pytest.fixture
def small_spec():
    return ToyTaskSpec(grid_rows=2, grid_cols=2, n_colors=3)


@pytest.fixture
def small_config(small_spec):
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=len(small_spec.vocab),
                       max_seq_len=small_spec.seq_len, seed=3)


@pytest.fixture
def small_model(small_config):
    return Model(small_config)


@pytest.fixture
def small_data(small_spec):
    return generate_dataset(small_spec, 40)


@pytest.fixture(autouse=True)
def _quiet_degenerate():
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        yield


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.summary_line(n))
