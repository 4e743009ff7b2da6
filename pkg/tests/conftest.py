import pytest

from trat.attacks import AttackConfig
from trat.data import train_test_split, two_moons
from trat.losses import TaylorConfig
from trat.trainer import TrainConfig, train

MOONS_ATTACK = AttackConfig(epsilon=0.1, step_size=0.025, steps=10, loss_kind="kl_vs_clean")


@pytest.fixture(scope="session")
def moons_split():
    return train_test_split(two_moons(600, 0.1, seed=0), 0.2, seed=0)


@pytest.fixture(scope="session")
def trained_moons(moons_split):
    """TRADES moons classifier on a short schedule."""
    tr, _ = moons_split
    cfg = TrainConfig(arch="mlp-moons", epochs=40, lr_drops=(30,), checkpoint_epochs=(),
                      attack=MOONS_ATTACK, taylor=TaylorConfig(mode="zeroth"), eval_attacks=(), seed=0)
    return train(tr, cfg).net
