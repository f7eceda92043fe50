import os

import numpy as np
import pytest

from asr import autodiff as ad
from asr.config import ExperimentConfig, ModelConfig


@pytest.fixture
def rootdir():
    return os.path.join(os.path.dirname(os.path.abspath(__file__)), "..")


@pytest.fixture
def defaults_file(rootdir):
    """Path to the documented default configuration"""
    return os.path.join(rootdir, "asr", "data", "experiment.ini")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with ad.precision("f64"):
        yield


@pytest.fixture
def tiny_model_config():
    """32px images, 4x4 / 2x2 / 1x1 grids and narrow layers."""
    return ModelConfig(
        image_side=32,
        grids=(4, 2, 1),
        conv_channels=(4, 6, 8),
        conv_kernel=3,
        background_hidden=8,
        baseline_encoder_channels=(4, 8),
        baseline_decoder_channels=(8, 4),
        baseline_latent=12,
    )


@pytest.fixture
def tiny_config(tiny_model_config, tmp_path):
    config = ExperimentConfig(model=tiny_model_config)
    config.loss.margin = 4
    config.training.batch_size = 4
    config.training.batches_per_epoch = 2
    config.training.eval_batch_size = 8
    config.training.seeds = (1,)
    config.output.root = str(tmp_path / "runs")
    config.data.root = str(tmp_path / "dataset")
    config.data.bag_size = 4
    return config.validate()


@pytest.fixture
def tiny_images(rng):
    """Eight 32px images: bright background with a dark square each."""
    images = np.full((8, 3, 32, 32), 0.9, dtype=np.float32)
    for k in range(8):
        top, left = rng.integers(4, 20, size=2)
        images[k, :, top : top + 8, left : left + 8] = rng.uniform(0.2, 0.6, size=(3, 1, 1))
    return images
