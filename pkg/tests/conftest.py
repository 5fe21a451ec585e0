import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flexipatch.pdegen import PDEParams, generate_dataset  # noqa: E402
from flexipatch.processor import ModelConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """10 short 32x32 trajectories: cheap enough for training smoke tests."""
    return generate_dataset(PDEParams(H=32, W=32, steps=12, k_max=8.0), 10, seed=3)


def tiny_config(**kw) -> ModelConfig:
    base = dict(embed_dim=16, mlp_dim=32, n_heads=2, n_blocks=1, attention="axial", context=3)
    base.update(kw)
    return ModelConfig(**base)


ACCEPTANCE: dict[int, str] = {}


def record_acceptance(n: int, title: str, passed: bool, detail: str) -> bool:
    line = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
