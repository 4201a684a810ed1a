import pytest
import torch

from umafd.backbone import BackboneConfig
from umafd.data import ClipDataset, SynthConfig, synth_generate

torch.set_num_threads(1)

SMALL = BackboneConfig(stage1_channels=4, embedding_dim=8, n_stages=2)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """6 train pairs + 4 depth test clips, 16x16, noiseless."""
    cfg = SynthConfig(n_train_pairs=6, n_test_depth=4, T=8, H=16, W=16, noise_level=0.0, seed=3)
    return synth_generate(cfg, tmp_path_factory.mktemp("tiny"))


@pytest.fixture
def tiny_ds(tiny_root):
    return ClipDataset.from_root(tiny_root, 8, 16, 16)


@pytest.fixture
def small_cfg():
    return SMALL
