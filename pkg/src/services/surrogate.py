"""
Gaussian-process surrogate over encoded (configuration, fidelity) points.

Kernel hyper-parameters are fitted by scikit-learn (log marginal likelihood,
multi-start L-BFGS); prediction, cross covariances and expected improvement are
computed from the fitted factorization so that the latent (noise free) posterior
is returned.
"""
import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import norm
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Kernel, Matern, Sum, WhiteKernel

from src.conf.config import settings
from src.exceptions import FitError
from src.schemas import AT_FIELDS, HP_FIELDS, FidelityPoint, HPConfig, SearchSpace
from src.services.space import FidelityGrid

logger = logging.getLogger(__name__)

LOG_SCALED = frozenset({"st_lr", "at_lr", "pgd_alpha"})


@dataclass(frozen=True)
class SpaceEncoder:
    """
    Maps configurations (and fidelities) to vectors in [0, 1]^D.

    Every HP dimension with more than one candidate is min-max scaled over its
    candidates, learning rates and the PGD step in log10 first. The fidelity
    dimensions being modeled are appended as fractions of their maxima.
    """
    dims: Tuple[Tuple[str, float, float, bool], ...]
    fidelity_dims: Tuple[str, ...]
    grid: FidelityGrid

    @classmethod
    def from_space(cls, space: SearchSpace, fidelity_dims: Sequence[str] = ()) -> "SpaceEncoder":
        candidates = space.candidates()
        dims = []
        for name in HP_FIELDS:
            if space.tie_phases and name in AT_FIELDS:
                continue
            values = sorted(set(candidates[name]))
            if len(values) < 2:
                continue
            log = name in LOG_SCALED
            lo, hi = (np.log10(values[0]), np.log10(values[-1])) if log else (values[0], values[-1])
            dims.append((name, float(lo), float(hi), log))
        return cls(tuple(dims), tuple(fidelity_dims), FidelityGrid.from_space(space))

    @property
    def width(self) -> int:
        return len(self.dims) + len(self.fidelity_dims)

    def encode(self, config: HPConfig, fidelity: Optional[FidelityPoint] = None) -> np.ndarray:
        vector = []
        for name, lo, hi, log in self.dims:
            value = getattr(config, name)
            value = np.log10(value) if log else value
            vector.append((value - lo) / (hi - lo))
        fidelity = fidelity or self.grid.full
        epochs, iters = self.grid.normalize(fidelity)
        for dim in self.fidelity_dims:
            vector.append(epochs if dim == "epochs" else iters)
        return np.clip(np.asarray(vector, dtype=float), 0.0, 1.0)

    def encode_many(self, configs: Sequence[HPConfig],
                    fidelities: Union[None, FidelityPoint, Sequence[FidelityPoint]] = None) -> np.ndarray:
        if fidelities is None or isinstance(fidelities, FidelityPoint):
            fidelities = [fidelities] * len(configs)
        if not configs:
            return np.zeros((0, self.width))
        return np.vstack([self.encode(c, f) for c, f in zip(configs, fidelities)])


def make_kernel(n_dims: int) -> Kernel:
    """Signal kernel: constant amplitude times ARD Matern-5/2."""
    return ConstantKernel(1.0, (1e-3, 1e3)) * Matern(length_scale=np.ones(n_dims),
                                                     length_scale_bounds=(1e-2, 1e3), nu=2.5)


@dataclass
class GPModel:
    regressor: GaussianProcessRegressor
    signal_kernel: Kernel
    noise_variance: float
    y_mean: float
    y_std: float
    jitter: float

    @property
    def points(self) -> np.ndarray:
        return self.regressor.X_train_

    @property
    def signal_variance(self) -> float:
        return float(self.y_std ** 2 * self.signal_kernel.diag(self.points[:1])[0])


def fit(points: np.ndarray, targets: np.ndarray, noise_floor: Optional[float] = None,
        seed: int = 0, restarts: Optional[int] = None) -> GPModel:
    """
    Fit a GP by maximizing the log marginal likelihood from several seeded starts.

    Targets are standardized internally. The observation noise (in standardized
    units) is learned but kept at or above ``noise_floor``; a zero floor fits a
    noise free interpolating model. If the covariance cannot be factorized the
    diagonal jitter grows tenfold per retry up to the configured maximum.

    :param points: np.ndarray: Encoded points, shape (n, D)
    :param targets: np.ndarray: Observed objective values, shape (n,)
    :param noise_floor: Optional[float]: Minimum noise variance
    :param seed: int: Seed of the optimizer restarts
    :param restarts: Optional[int]: Extra optimizer starts
    :return: The fitted model
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if len(targets) < 2 or len(points) != len(targets):
        raise FitError(f"Need at least 2 matching points and targets, got {len(points)} and {len(targets)}")
    if not np.all(np.isfinite(targets)):
        raise FitError("Non-finite targets")
    noise_floor = settings.gp_noise_floor if noise_floor is None else noise_floor
    restarts = settings.gp_restarts if restarts is None else restarts

    y_mean = float(np.mean(targets))
    y_std = float(np.std(targets)) or 1.0
    scaled = (targets - y_mean) / y_std

    kernel = make_kernel(points.shape[1])
    if noise_floor > 0:
        upper = max(1.0, 10 * noise_floor)
        kernel = kernel + WhiteKernel(noise_level=min(max(1e-2, noise_floor), upper),
                                      noise_level_bounds=(noise_floor, upper))

    jitter = settings.jitter_start
    while True:
        regressor = GaussianProcessRegressor(kernel=kernel, alpha=jitter, normalize_y=False,
                                             n_restarts_optimizer=restarts, random_state=seed)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                regressor.fit(points, scaled)
            break
        except (np.linalg.LinAlgError, ValueError) as err:
            if jitter >= settings.jitter_max:
                raise FitError(f"Covariance not positive definite with jitter {jitter:g}: {err}")
            jitter = min(jitter * 10, settings.jitter_max)
            logger.debug("GP fit retry with jitter %g", jitter)

    fitted = regressor.kernel_
    if isinstance(fitted, Sum) and isinstance(fitted.k2, WhiteKernel):
        signal, noise = fitted.k1, float(fitted.k2.noise_level)
    else:
        signal, noise = fitted, 0.0
    return GPModel(regressor=regressor, signal_kernel=signal, noise_variance=noise,
                   y_mean=y_mean, y_std=y_std, jitter=jitter)


def _solve(model: GPModel, query: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    cross = model.signal_kernel(query, model.points)
    return cross, solve_triangular(model.regressor.L_, cross.T, lower=True)


def predict(model: GPModel, points: np.ndarray):
    """
    Latent posterior mean and variance.

    :param model: GPModel: Fitted model
    :param points: np.ndarray: One encoded point (D,) or several (m, D)
    :return: (mean, variance) as floats for one point, arrays otherwise
    """
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    query = np.atleast_2d(points)
    cross, v = _solve(model, query)
    mean = model.y_mean + model.y_std * (cross @ model.regressor.alpha_)
    var = np.maximum(model.signal_kernel.diag(query) - np.sum(v ** 2, axis=0), 0.0) * model.y_std ** 2
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def posterior_cross_covariance(model: GPModel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Posterior covariance matrix between two sets of encoded points."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    _, va = _solve(model, a)
    _, vb = _solve(model, b)
    return (model.signal_kernel(a, b) - va.T @ vb) * model.y_std ** 2


def log_marginal_likelihood(model: GPModel, theta: Optional[np.ndarray] = None, eval_gradient: bool = False):
    """
    Log marginal likelihood of the standardized targets at log-hyper-parameters ``theta``
    (the fitted ones by default), optionally with its gradient.
    """
    if theta is None:
        theta = model.regressor.kernel_.theta
    return model.regressor.log_marginal_likelihood(theta, eval_gradient=eval_gradient)


def ei_from_moments(mean, std, incumbent: float):
    """
    Closed-form expected improvement for minimization:
    ``sigma * (g * Phi(g) + phi(g))`` with ``g = (incumbent - mean) / sigma``;
    ``max(0, incumbent - mean)`` where sigma < 1e-12.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    improvement = incumbent - mean
    safe = np.where(std < 1e-12, 1.0, std)
    gamma = improvement / safe
    ei = safe * (gamma * norm.cdf(gamma) + norm.pdf(gamma))
    ei = np.where(std < 1e-12, np.maximum(improvement, 0.0), ei)
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def expected_improvement(model: GPModel, points: np.ndarray, incumbent: float):
    """
    Expected improvement over ``incumbent`` under the GP posterior (minimization).

    :param model: GPModel: Fitted model
    :param points: np.ndarray: Encoded point(s)
    :param incumbent: float: Best value observed so far
    :return: Non-negative EI, float for a single point
    """
    mean, var = predict(model, points)
    return ei_from_moments(mean, np.sqrt(var), incumbent)
