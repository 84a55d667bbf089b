import numpy as np
import pytest

from AdversarialTrainer import TrainConfig
from DataReader import DataReader
from DataWriter import DataWriter
from Discriminator import Discriminator
from Generator import Generator
from MotionSimulator import SimConfig, make_dataset
from PhysicsModel import PhysicsParams

"""Fixtures shared by the test modules: a short-cycle knee simulator, a
small mixed-family dataset, tiny networks and a tiny training config.
"""


@pytest.fixture
def knee_cfg():
    """Knee preset with 24-frame cycles"""
    return SimConfig.knee(frames=24)


@pytest.fixture
def knee_params(knee_cfg):
    return PhysicsParams.from_config(knee_cfg)


@pytest.fixture
def small_dataset(knee_cfg):
    """Ten mixed-family cycles: 8 train, 1 test, 1 eval"""
    return make_dataset(10, knee_cfg, "mixed", seed=3)


@pytest.fixture
def generator():
    """A small generator for 2 sEMG channels and 2 muscles"""
    return Generator(2, 2, conv_filters=3, hidden_size=4, seed=0)


@pytest.fixture
def discriminator():
    """A small discriminator for 2 muscles with banks of width 2 and 4"""
    return Discriminator(2, bank_widths=(2, 4), bank_kernels=(3, 3), seed=0)


@pytest.fixture
def tiny_train_cfg():
    """A training config small enough to run in a unit test"""
    return TrainConfig(epochs=2, rollouts=2, k_epochs=1, batch_size=4,
                       mle_epochs=3, d_pretrain_epochs=2, conv_filters=3,
                       hidden_size=4, bank_widths=(2, 4),
                       bank_kernels=(3, 3), classifier_epochs=5,
                       checkpoint_every=1, collapse_every=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def data_dir(small_dataset, tmp_path):
    """small_dataset written to a temporary directory"""
    out_dir = str(tmp_path / "dataset")
    DataWriter(out_dir).write_dataset(small_dataset)
    return out_dir


@pytest.fixture
def dr(data_dir):
    return DataReader(data_dir)
