import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from modalheart.model import ModelConfig

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE = []


@pytest.fixture
def record_criterion():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
        _ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


TINY = ModelConfig(img_size=(8, 8), patch=4, enc_blocks=1, enc_heads=2, enc_dim=8, mlp_ratio=2,
                   dec_dim=8, dec_blocks=1, dec_heads=2, mask_ratio=0.5, alpha=0.1)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
