import hypothesis
import numpy as np
import pytest
import torch

from subseg.labels import LabelTable
from subseg.model import ModelConfig

hypothesis.settings.register_profile(
    "desk", max_examples=25, deadline=None,
    suppress_health_check=[hypothesis.HealthCheck.too_slow],
)
hypothesis.settings.load_profile("desk")


@pytest.fixture(scope="session")
def table():
    return LabelTable.default()


def tiny_model_config(**overrides) -> ModelConfig:
    """Small-patch config for fast unit tests of model internals."""
    kwargs = dict(patch_size=32, base_width=4, norm_groups=2, token_embed_dim=32,
                  transformer_layers=2, transformer_heads=4)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def fast_full_config(**overrides) -> ModelConfig:
    """Cheapest config that still runs the real 96^3 patch pipeline."""
    kwargs = dict(base_width=2, norm_groups=2, token_embed_dim=16,
                  transformer_layers=1, transformer_heads=2, mlp_dim=32)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    np.random.seed(0)
