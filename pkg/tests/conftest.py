import numpy as np
import pytest
import torch

from meterflow.data import CONDITION_FIELDS
from meterflow.nn import NetConfig

VOCAB = (2, 12, 31, 7, 2, 2)


def tiny_config(**kw) -> NetConfig:
    base = dict(
        n_layers=1, model_dim=8, ff_dim=16, n_heads=2, conv_kernel=3, patch_len=2,
        cond_vocab_sizes=VOCAB, steps_per_day=4, precision="f64",
    )
    base.update(kw)
    return NetConfig(**base)


def random_cond(batch: int, seed: int = 0, vocab=VOCAB) -> dict[str, torch.Tensor]:
    rng = np.random.default_rng(seed)
    return {k: torch.as_tensor(rng.integers(0, v, batch)) for k, v in zip(CONDITION_FIELDS, vocab)}


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
