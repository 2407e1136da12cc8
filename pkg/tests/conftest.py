import copy

import numpy as np
import pytest
import yaml

from src.config import validate_config
from src.model import TwoHeadModel

# small enough for the CLI tests to finish in seconds
FAST_SETTINGS = {
    "run": {"scenario": "osda", "seeds": [0]},
    "shift": {"per_class_n": 30},
    "model": {"hidden_dims": [16], "bottleneck_dim": 8},
    "source_optim": {"max_iters": 120, "batch_size": 32, "log_every": 60},
    "adapt_optim": {"max_iters": 40, "batch_size": 32, "log_every": 20},
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model_factory():
    def make(in_dim=3, K=3, hidden=(5,), d=4, use_bn=True, seed=0):
        return TwoHeadModel(in_dim, K, hidden_dims=hidden, bottleneck_dim=d, use_bn=use_bn, seed=seed)
    return make


@pytest.fixture
def fast_settings():
    return copy.deepcopy(FAST_SETTINGS)


@pytest.fixture
def fast_config(fast_settings):
    return validate_config(fast_settings)


@pytest.fixture
def fast_config_file(tmp_path, fast_settings):
    path = tmp_path / "fast.yaml"
    path.write_text(yaml.safe_dump(fast_settings))
    return str(path)
