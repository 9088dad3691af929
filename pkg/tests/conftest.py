import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from chessformer import data, synth  # noqa: E402
from chessformer.model import ModelConfig  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def tiny_config(**overrides) -> ModelConfig:
    base = dict(layers=2, embed_dim=64, head_dim=32, history=1, posenc="gab", gab_d1=8, gab_d2=32, gab_d3=32)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def games():
    return list(data.parse_pgn(synth.generate_pgn(12, seed=11)))


@pytest.fixture(scope="session")
def examples(games):
    return list(data.examples_from_games(games, n=1, k=16))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# one line per acceptance criterion, filled in by test_acceptance.criterion()
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
