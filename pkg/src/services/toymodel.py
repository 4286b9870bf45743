import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.datasets import make_blobs
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import MinMaxScaler

from src.exceptions import ConfigurationError
from src.schemas import ModelSpec, ToyDataSpec

logger = logging.getLogger(__name__)

PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class ToyMLP:
    """
    One-hidden-layer classifier with softmax output and hand written backpropagation.
    Implements the GradientModel interface used by the attacks.
    """
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"

    @classmethod
    def initialize(cls, n_features: int, n_classes: int, spec: ModelSpec,
                   rng: np.random.Generator) -> "ToyMLP":
        """
        Scaled uniform initialization, limit sqrt(6 / (fan_in + fan_out)); zero biases.

        :param n_features: int: Input dimension
        :param n_classes: int: Number of output classes
        :param spec: ModelSpec: Hidden width and nonlinearity
        :param rng: np.random.Generator: Seeded generator
        :return: A freshly initialized model
        """
        def glorot(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        return cls(w1=glorot(n_features, spec.hidden), b1=np.zeros(spec.hidden),
                   w2=glorot(spec.hidden, n_classes), b2=np.zeros(n_classes),
                   activation=spec.activation)

    def params(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ToyMLP":
        return ToyMLP(**{name: value.copy() for name, value in self.params().items()},
                      activation=self.activation)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(value)) for value in self.params().values())

    def _forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        pre = x @ self.w1 + self.b1
        hidden = np.tanh(pre) if self.activation == "tanh" else np.maximum(pre, 0.0)
        logits = hidden @ self.w2 + self.b2
        return pre, hidden, logits

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self._forward(x)[2], axis=1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self._forward(x)[2], axis=1)

    def per_example_loss(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        logits = self._forward(x)[2]
        return logsumexp(logits, axis=1) - logits[np.arange(len(y)), y]

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.per_example_loss(x, y)))

    def _backward(self, x: np.ndarray, y: np.ndarray, scale: float):
        pre, hidden, logits = self._forward(x)
        d_logits = softmax(logits, axis=1)
        d_logits[np.arange(len(y)), y] -= 1.0
        d_logits *= scale
        d_hidden = d_logits @ self.w2.T
        if self.activation == "tanh":
            d_pre = d_hidden * (1.0 - hidden ** 2)
        else:
            d_pre = d_hidden * (pre > 0)
        grads = {
            "w1": x.T @ d_pre,
            "b1": d_pre.sum(axis=0),
            "w2": hidden.T @ d_logits,
            "b2": d_logits.sum(axis=0),
        }
        return grads, d_pre @ self.w1.T, logits

    def parameter_gradients(self, x: np.ndarray, y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
        """
        Mean cross-entropy and its gradient with respect to every parameter.

        :param x: np.ndarray: Batch inputs
        :param y: np.ndarray: Batch labels
        :return: (loss, gradients keyed like :meth:`params`)
        """
        grads, _, logits = self._backward(x, y, 1.0 / len(y))
        loss = float(np.mean(logsumexp(logits, axis=1) - logits[np.arange(len(y)), y]))
        return loss, grads

    def input_gradient(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        # gradient of the summed loss, so each row is that example's own gradient
        return self._backward(x, y, 1.0)[1]


@dataclass(frozen=True)
class ToyDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    spec: ToyDataSpec = field(default_factory=ToyDataSpec)

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1


def _rings(spec: ToyDataSpec, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    y = rng.permutation(np.arange(n) % spec.n_classes)
    radius = (y + 1) / spec.n_classes
    angle = rng.uniform(0.0, 2 * np.pi, size=n)
    x = rng.normal(0.0, spec.spread, size=(n, spec.n_features))
    x[:, 0] += radius * np.cos(angle)
    x[:, 1] += radius * np.sin(angle)
    return x, y


def make_toy_dataset(spec: ToyDataSpec) -> ToyDataset:
    """
    Generate a seeded classification problem (Gaussian blobs or concentric rings),
    split it with stratification and scale every feature into [0, 1].

    :param spec: ToyDataSpec: Generator settings
    :return: The dataset with fixed train/test split
    """
    if min(spec.n_train, spec.n_test) < spec.n_classes:
        raise ConfigurationError("Both splits need at least one example per class")
    n = spec.n_train + spec.n_test
    if spec.kind == "blobs":
        x, y = make_blobs(n_samples=n, n_features=spec.n_features, centers=spec.n_classes,
                          cluster_std=spec.spread, center_box=(0.0, 1.0), random_state=spec.seed)
    else:
        x, y = _rings(spec, n, np.random.default_rng(spec.seed))
    x_train, x_test, y_train, y_test = train_test_split(
        x, y, test_size=spec.n_test, stratify=y, random_state=spec.seed)
    scaler = MinMaxScaler().fit(x)
    logger.debug("Generated %s dataset: %d train / %d test, %d features, %d classes",
                 spec.kind, spec.n_train, spec.n_test, spec.n_features, spec.n_classes)
    return ToyDataset(
        x_train=np.clip(scaler.transform(x_train), 0.0, 1.0),
        y_train=np.asarray(y_train, dtype=int),
        x_test=np.clip(scaler.transform(x_test), 0.0, 1.0),
        y_test=np.asarray(y_test, dtype=int),
        spec=spec,
    )
