import pytest
import torch

from trajllm.config import TrainConfig
from trajllm.data import generate_dataset

TINY = dict(
    hidden_dim=8, n_heads=2, k_modes=2, top_c=2, latent_dim=4, mode_dim=4, dropout=0.0,
    mamba_layers=1, d_state=4, backbone_layers=1, backbone_width=16, backbone_heads=2,
    lora_rank=2, batch_size=4,
)


def tiny_config(**kw) -> TrainConfig:
    return TrainConfig(**{**TINY, **kw})


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture(scope="session")
def small_scenes():
    return generate_dataset(8, ("straight", "left_turn", "right_turn", "intersection"), 0.1, seed=0)


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).abs().max() / max(a.abs().max(), b.abs().max(), 1e-12))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training criteria")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
