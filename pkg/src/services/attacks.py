"""
L-infinity evasion attacks (FGSM and sign-PGD) against any classifier exposing
the input-gradient interface, plus the finite-difference gradient check used to
validate hand written backpropagation.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np

from src.exceptions import AttackError
from src.schemas import AttackSpec

logger = logging.getLogger(__name__)


class GradientModel(Protocol):

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        """Mean loss over the batch."""

    def input_gradient(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Gradient of the summed per-example loss with respect to the inputs."""


@dataclass(frozen=True)
class Perturbation:
    delta: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x + self.delta

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """
    Project a perturbation onto the L-infinity ball of radius epsilon.

    :param delta: np.ndarray: Perturbation
    :param epsilon: float: Radius, non-negative
    :return: Componentwise clamp of delta into [-epsilon, epsilon]
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    return np.clip(delta, -epsilon, epsilon)


def _clip_to_range(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    # keep x + delta inside the valid input range [0, 1]
    return np.clip(x + delta, 0.0, 1.0) - x


def _gradient(model: GradientModel, x: np.ndarray, y: np.ndarray, where: str) -> np.ndarray:
    grad = model.input_gradient(x, y)
    if grad.shape != x.shape:
        raise AttackError(f"Input gradient shape {grad.shape} differs from input shape {x.shape} ({where})")
    if not np.all(np.isfinite(grad)):
        raise AttackError(f"Non-finite input gradient ({where})")
    return grad


def fgsm(model: GradientModel, x: np.ndarray, y: np.ndarray, epsilon: float,
         batch: Optional[int] = None) -> Perturbation:
    """
    Fast gradient sign method: one step of size epsilon along the sign of the input gradient.

    :param model: GradientModel: Attacked model
    :param x: np.ndarray: Inputs in [0, 1]
    :param y: np.ndarray: Labels
    :param epsilon: float: L-infinity bound
    :param batch: Optional[int]: Batch index, used in error messages
    :return: The perturbation
    """
    grad = _gradient(model, x, y, f"FGSM, batch {batch}")
    delta = epsilon * np.sign(grad)
    return Perturbation(_clip_to_range(x, delta))


def pgd(model: GradientModel, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
        rng: Optional[np.random.Generator] = None, batch: Optional[int] = None) -> Perturbation:
    """
    Projected gradient ascent on the loss inside the L-infinity ball.

    Each iteration steps by ``alpha * sign(grad)`` (or ``alpha * grad`` with the raw
    step rule), projects back onto the ball and clips x + delta into [0, 1]. With one
    iteration, zero start and alpha >= epsilon the result equals :func:`fgsm`.

    :param model: GradientModel: Attacked model
    :param x: np.ndarray: Inputs in [0, 1]
    :param y: np.ndarray: Labels
    :param spec: AttackSpec: Bound, iterations, step size, start and step rule
    :param rng: Optional[np.random.Generator]: Needed for the uniform start only
    :param batch: Optional[int]: Batch index, used in error messages
    :return: The perturbation
    """
    eps = spec.epsilon
    if spec.init == "uniform":
        if rng is None:
            raise AttackError("Uniform PGD start requires a random generator")
        delta = _clip_to_range(x, rng.uniform(-eps, eps, size=x.shape))
    else:
        delta = np.zeros_like(x)

    for iteration in range(spec.iters):
        grad = _gradient(model, x + delta, y, f"PGD iteration {iteration}, batch {batch}")
        step = np.sign(grad) if spec.step_rule == "sign" else grad
        delta = project_linf(delta + spec.alpha * step, eps)
        delta = _clip_to_range(x, delta)
    return Perturbation(delta)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                               step: float = 1e-3) -> np.ndarray:
    """
    Central finite-difference gradient of a scalar function.

    :param f: Callable: Scalar function of an array
    :param x: np.ndarray: Point of evaluation (not modified)
    :param step: float: Difference step
    :return: Gradient estimate with the shape of x
    """
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        upper = f(x)
        flat[i] = saved - step
        lower = f(x)
        flat[i] = saved
        out[i] = (upper - lower) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """
    Relative discrepancy between two gradients in the max norm:
    ``max|a - b| / max(max|a|, max|b|, floor)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if not a.size:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale
