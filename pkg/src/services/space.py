import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

from src.exceptions import ConfigurationError
from src.schemas import (AT_FIELDS, FIDELITY_DIMS, HP_FIELDS, ST_FIELDS, FidelityPoint, HPConfig,
                         SearchSpace, parse_epsilon)

logger = logging.getLogger(__name__)

# Bounds in /255 units per benchmark
BENCHMARK_EPSILONS = {
    "imagenet": ("2/255", "4/255"),
    "svhn": ("4/255", "8/255"),
    "cifar10": ("8/255", "12/255"),
}


def study_space(tie_phases: bool = False, benchmark: str = "cifar10", collapse_inert: bool = True) -> SearchSpace:
    """
    The hyper-parameter grids of the robust-training study: learning rate, momentum
    and batch size per phase, PGD step size, %RAT and %AE, plus the epochs and attack
    iteration fidelity grids and the benchmark's perturbation bounds.

    :param tie_phases: bool: Force ST and AT to share LR, momentum and batch size
    :param benchmark: str: imagenet, svhn or cifar10; selects momentum, batch sizes and bounds
    :param collapse_inert: bool: Canonicalize dimensions that cannot affect training
    :return: The search space
    """
    if benchmark not in BENCHMARK_EPSILONS:
        raise ConfigurationError(f"Unknown benchmark '{benchmark}'")
    large = benchmark == "imagenet"
    return SearchSpace(
        st_lr=[0.1, 0.01],
        st_momentum=[0.9, 0.99] if large else [0.0, 0.9],
        st_batch=[256, 512] if large else [128, 256],
        pgd_alpha=[1e-2, 1e-3],
        rat_pct=[0, 30, 50, 70, 100],
        ae_pct=[30, 50, 70, 100],
        epochs=[1, 2, 4, 8, 16],
        attack_iters=[1, 5, 10, 20],
        epsilons=[parse_epsilon(e) for e in BENCHMARK_EPSILONS[benchmark]],
        tie_phases=tie_phases,
        collapse_inert=collapse_inert,
    )


def _canonical(values: Dict[str, object], candidates: Dict[str, list], tie_phases: bool) -> Dict[str, object]:
    rat = values["rat_pct"]
    if rat == 0:
        for name in ("pgd_alpha", "ae_pct"):
            values[name] = candidates[name][0]
        for st_name, at_name in zip(ST_FIELDS, AT_FIELDS):
            values[at_name] = values[st_name] if tie_phases else candidates[at_name][0]
    elif rat == 100 and not tie_phases:
        for name in ST_FIELDS:
            values[name] = candidates[name][0]
    return values


def enumerate_space(space: SearchSpace) -> List[HPConfig]:
    """
    Enumerate every hyper-parameter configuration of a search space.

    The order is the lexicographic order of the Cartesian product over the candidate
    sets as listed. With ``tie_phases`` the AT values mirror the ST values. With
    ``collapse_inert`` the dimensions a configuration cannot use (AT-only values when
    %RAT is 0, ST values when %RAT is 100) are set to their first candidate and the
    resulting duplicates dropped, keeping first occurrences.

    :param space: SearchSpace: Candidate sets
    :return: Ordered list of distinct configurations
    """
    candidates = space.candidates()
    for name in HP_FIELDS:
        if not candidates[name]:
            raise ConfigurationError(f"Empty candidate set for '{name}'")
    free = [name for name in HP_FIELDS if not (space.tie_phases and name in AT_FIELDS)]

    configs: Dict[tuple, HPConfig] = {}
    for combo in itertools.product(*(candidates[name] for name in free)):
        values = dict(zip(free, combo))
        if space.tie_phases:
            for st_name, at_name in zip(ST_FIELDS, AT_FIELDS):
                values[at_name] = values[st_name]
        if space.collapse_inert:
            values = _canonical(values, candidates, space.tie_phases)
        key = tuple(values[name] for name in HP_FIELDS)
        if key not in configs:
            configs[key] = HPConfig(**values)
    logger.debug("Enumerated %d configurations (tie_phases=%s, collapse_inert=%s)",
                 len(configs), space.tie_phases, space.collapse_inert)
    return list(configs.values())


@dataclass(frozen=True)
class FidelityGrid:
    epochs: Tuple[int, ...]
    attack_iters: Tuple[int, ...]

    @classmethod
    def from_space(cls, space: SearchSpace) -> "FidelityGrid":
        if not space.epochs or not space.attack_iters:
            raise ConfigurationError("Empty fidelity grid")
        return cls(tuple(sorted(set(space.epochs))), tuple(sorted(set(space.attack_iters))))

    @property
    def epochs_max(self) -> int:
        return self.epochs[-1]

    @property
    def iters_max(self) -> int:
        return self.attack_iters[-1]

    @property
    def full(self) -> FidelityPoint:
        return FidelityPoint(epochs=self.epochs_max, attack_iters=self.iters_max)

    @property
    def cheapest(self) -> FidelityPoint:
        return FidelityPoint(epochs=self.epochs[0], attack_iters=self.attack_iters[0])

    def points(self) -> List[FidelityPoint]:
        return [FidelityPoint(epochs=e, attack_iters=k) for e in self.epochs for k in self.attack_iters]

    def levels(self, dims: Sequence[str]) -> List[FidelityPoint]:
        """
        Fidelity points reachable when only ``dims`` may vary; the other dimension
        stays pinned at its maximum.
        """
        for dim in dims:
            if dim not in FIDELITY_DIMS:
                raise ConfigurationError(f"Unknown fidelity dimension '{dim}'")
        epochs = self.epochs if "epochs" in dims else (self.epochs_max,)
        iters = self.attack_iters if "attack_iters" in dims else (self.iters_max,)
        return [FidelityPoint(epochs=e, attack_iters=k) for e in epochs for k in iters]

    def normalize(self, fidelity: FidelityPoint) -> Tuple[float, float]:
        return fidelity.normalized(self.epochs_max, self.iters_max)

    def is_full(self, fidelity: FidelityPoint) -> bool:
        return fidelity.epochs == self.epochs_max and fidelity.attack_iters == self.iters_max
