import numpy as np
import pytest

from latentbridge import env as envmod
from latentbridge.teacher import Backbone, BackboneConfig, HeadConfig, bc_train
from latentbridge.tensorkit import kernels
from latentbridge.tensorkit.optim import TrainHyper


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run a test once per available kernel backend."""
    prev = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


@pytest.fixture(scope="session")
def backbone():
    return Backbone(BackboneConfig())


def _small_policy(backbone, readout, kind="regression"):
    tasks = [envmod.preset("base"), envmod.preset("switch")]
    policy, _ = bc_train(backbone, HeadConfig(kind=kind, readout=readout), tasks,
                         TrainHyper(lr0=3e-3, epochs=6, t_max=6), n_episodes=80, seed=3,
                         gate_episodes=10, gate_threshold=0.0, strict=False)
    return policy


@pytest.fixture(scope="session")
def feature_policy(backbone):
    """A briefly trained feature read-out policy (quality is not the point)."""
    return _small_policy(backbone, "feature")


@pytest.fixture(scope="session")
def kv_policy(backbone):
    return _small_policy(backbone, "kv")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
