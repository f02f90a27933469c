import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from anop import encoder as E
from anop import world as W


@pytest.fixture(scope="session")
def default_world():
    return W.generate_world(seed=0)


@pytest.fixture(scope="session")
def pretrained_stack(default_world):
    return E.pretrain_contrastive(default_world, E.PretrainConfig(), seed=0)


@pytest.fixture(scope="session")
def default_split(default_world):
    return W.base_novel_split(default_world, base_fraction=0.5, seed=0)
