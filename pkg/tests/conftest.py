import numpy as np
import pytest

from moadepth.config import preset_config
from moadepth.data import make_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 toy scenes: 10 train / 2 eval under the default 90% split."""
    out = tmp_path_factory.mktemp("small_ds")
    make_dataset(12, 5, out)
    return out


@pytest.fixture
def short_config(small_dataset, tmp_path):
    """Toy preset trimmed to a few small steps so training tests stay fast."""
    return preset_config("toy", {
        "train.steps": 4, "train.batch_size": 2, "data.dir": str(small_dataset),
        "output.dir": str(tmp_path / "run"),
    })
