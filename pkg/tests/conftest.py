import math

import pytest

from src.repository.datasets import TabularDataset
from src.schemas import EvalRecord, SearchSpace, ToyDataSpec
from src.services.space import FidelityGrid, enumerate_space


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow benchmark tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def small_space(**overrides) -> SearchSpace:
    """Ten configurations: two ST learning rates, two AT learning rates, %RAT 0 or 50, %AE 50 or 100."""
    values = dict(st_lr=[0.1, 0.01], st_momentum=[0.9], st_batch=[32], at_lr=[0.1, 0.01], at_momentum=[0.9],
                  at_batch=[32], pgd_alpha=[0.01], rat_pct=[0, 50], ae_pct=[50, 100], epochs=[1, 2],
                  attack_iters=[1, 2], epsilons=["8/255"])
    values.update(overrides)
    return SearchSpace(**values)


def bowl_errors(config, fidelity, epsilon, seed):
    """Smooth synthetic outcome: lower error near lr=10^-1.5, %RAT=50, %AE=100; cost grows with attack work."""
    quality = (0.15 + 0.1 * abs(math.log10(config.st_lr) + 1.5) + 0.1 * abs(math.log10(config.at_lr) + 1.5)
               + 0.001 * abs(config.rat_pct - 50) + 0.0005 * (100 - config.ae_pct))
    std_error = min(0.9, quality * (1 + 0.5 / fidelity.epochs) + 0.001 * seed)
    adv_error = min(1.0, std_error + 0.1 + 0.02 / fidelity.attack_iters + epsilon)
    train_time = 0.01 * fidelity.epochs * (1 + config.rat_pct / 100 * config.ae_pct / 100 * fidelity.attack_iters)
    return std_error, adv_error, train_time


def build_tabular(space: SearchSpace, outcome=bowl_errors, seeds=(0,)) -> TabularDataset:
    """Dataset covering every (config, fidelity, epsilon, seed) of a space, values from ``outcome``."""
    grid = FidelityGrid.from_space(space)
    records = []
    for config in enumerate_space(space):
        for fidelity in grid.points():
            for eps in space.epsilons:
                for seed in seeds:
                    std_error, adv_error, train_time = outcome(config, fidelity, eps, seed)
                    records.append(EvalRecord(config=config, fidelity=fidelity, epsilon=eps, std_error=std_error,
                                              adv_error=adv_error, train_time=train_time, seed=seed))
    return TabularDataset(records, space=space)


@pytest.fixture(scope="module")
def space():
    return small_space()


@pytest.fixture(scope="module")
def toy_spec():
    return ToyDataSpec(n_train=60, n_test=30, n_features=2, seed=0)


@pytest.fixture(scope="module")
def tabular(space):
    return build_tabular(space, seeds=(0, 1))
