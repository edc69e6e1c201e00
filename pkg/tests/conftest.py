import numpy as np
import pytest
import torch

from tap.config import ModelConfig
from tap.datastore import ShapesConfig, generate_shapes_dataset


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        image_size=64,
        patch_size=8,
        window_size=4,
        enc_dim=32,
        enc_depth=2,
        enc_heads=2,
        cross_blocks=2,
        dec_dim=32,
        dec_heads=2,
        dec_depth=2,
        semantic_hidden=32,
        d_text=16,
        num_concepts=12,
        txt_vocab_size=256,
        txt_dim=32,
        txt_depth=2,
        txt_heads=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_shapes_dataset(ShapesConfig(n_images=6, image_size=64, seed=3, max_half=14))


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    from tap.network import PromptableModel

    return PromptableModel(tiny_cfg)
