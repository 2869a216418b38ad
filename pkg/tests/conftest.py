import numpy as np
import pytest
import torch

from normdistill.config import RunConfig
from normdistill.data import load_dataset
from normdistill.synthetic import SynthSpec, generate_synthetic


def tiny_config(seed: int = 0, **train_overrides) -> RunConfig:
    """Small but structurally complete configuration for fast tests."""
    cfg = RunConfig()
    cfg.encoder.depth = 3
    cfg.encoder.tap_layers = (1, 2, 3)
    cfg.encoder.embed_dim = 16
    cfg.encoder.num_heads = 2
    cfg.encoder.patch_size = 8
    cfg.encoder.text_dim = 8
    cfg.encoder.prompt_length = 4
    cfg.train.resolution = 16
    cfg.train.epochs = 2
    cfg.train.batch_size = 4
    cfg.train.seed = seed
    cfg.moe.num_experts = 3
    cfg.moe.top_k = 2
    cfg.moe.hidden_dim = 8
    for key, value in train_overrides.items():
        setattr(cfg.train, key, value)
    return cfg


def desk_config(seed: int = 0) -> RunConfig:
    """The desk-scale configuration used by the end-to-end acceptance runs."""
    cfg = RunConfig()
    cfg.encoder.depth = 6
    cfg.encoder.tap_layers = (1, 2, 4)
    cfg.encoder.embed_dim = 64
    cfg.encoder.num_heads = 4
    cfg.encoder.patch_size = 8
    cfg.encoder.text_dim = 32
    cfg.train.resolution = 64
    cfg.train.epochs = 30
    cfg.train.batch_size = 4
    cfg.train.learning_rate = 0.002
    cfg.train.noise_std = 0.25
    cfg.train.seed = seed
    cfg.constraint.tau = 0.1
    cfg.moe.num_experts = 5
    cfg.moe.top_k = 2
    return cfg


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """Two tiny categories at 16px for plumbing-level tests."""
    root = tmp_path_factory.mktemp("micro_data") / "root"
    spec = SynthSpec(num_categories=2, train_images=6, test_good=2, test_anomalous=4,
                     resolution=16, seed=11, min_defect_fraction=0.02,
                     max_defect_fraction=0.3)
    generate_synthetic(spec, root)
    return root


@pytest.fixture(scope="session")
def micro_train(micro_dataset):
    return load_dataset(micro_dataset, "train", resolution=16)


@pytest.fixture(scope="session")
def micro_test(micro_dataset):
    return load_dataset(micro_dataset, "test", resolution=16)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """The 3-category / 64-train / 24-test / 64px dataset of the acceptance runs."""
    root = tmp_path_factory.mktemp("desk_data") / "root"
    spec = SynthSpec(num_categories=3, train_images=64, test_good=8, test_anomalous=16,
                     resolution=64, seed=0)
    generate_synthetic(spec, root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(99)
