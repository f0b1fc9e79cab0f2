"""Losses, the Adam optimizer, the training loop with scheduled grid updates, and evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .datasets import RegressionDataset
from .splines import DEFAULT_BLEND

LOSSES = ("mse", "bce_with_logits")
# Relative singular-value cutoff for the least-squares refit during training. Hidden
# channels are strongly correlated, and a tighter cutoff lets near-null directions of
# one minibatch pick up large weights that blow up on the next.
GRID_FIT_TOL = 1e-3


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss."""


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 3e-3
    batch_size: int = 500
    grid_update_every: int = 5
    grid_update_stop: int = 50
    grid_blend: float = DEFAULT_BLEND
    grid_fit_tol: float = GRID_FIT_TOL
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.grid_update_stop < 0 or self.grid_update_every < 0:
            raise ValueError("grid_update_every and grid_update_stop must be >= 0")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")


@dataclass
class Metrics:
    train_loss: list = field(default_factory=list)
    test_loss: float | None = None
    test_mse: float | None = None
    test_accuracy: float | None = None
    num_parameters: int = 0
    epoch_seconds: list = field(default_factory=list)

    def summary(self) -> dict:
        out = asdict(self)
        out["final_train_loss"] = self.train_loss[-1] if self.train_loss else None
        out["mean_epoch_seconds"] = float(np.mean(self.epoch_seconds)) if self.epoch_seconds else 0.0
        del out["train_loss"], out["epoch_seconds"]
        return out


def mse(pred: np.ndarray, target: np.ndarray) -> tuple:
    """Mean squared error over all entries and its gradient with respect to ``pred``."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def bce_with_logits(logits: np.ndarray, target: np.ndarray) -> tuple:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets, with gradient."""
    z, t = np.asarray(logits, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if z.shape != t.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {t.shape}")
    # log(1 + e^z) - t z, written to avoid overflow
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(np.mean(loss)), (expit(z) - t) / z.size


LOSS_FUNCTIONS = {"mse": mse, "bce_with_logits": bce_with_logits}


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, learning_rate: float = 3e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` in place from ``grads`` (both ``name -> array``)."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: dict, grads: dict, state: Adam) -> None:
    state.step(params, grads)


def predict(model, features: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    out = [model.forward(features[i : i + batch_size]) for i in range(0, len(features), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(model, dataset: RegressionDataset, loss: str = "mse") -> dict:
    pred = predict(model, dataset.features)
    value, _ = LOSS_FUNCTIONS[loss](pred, dataset.labels)
    out = {"loss": value}
    if loss == "mse":
        out["mse"] = value
    else:
        out["accuracy"] = float(np.mean((pred > 0) == (dataset.labels > 0.5)))
    return out


def _layer_norms(model) -> dict:
    return {k: float(np.linalg.norm(v)) for k, v in model.named_parameters()}


def fit(model, train: RegressionDataset, config: TrainConfig, test: RegressionDataset | None = None,
        log=None) -> tuple:
    """Train ``model`` in place.

    Each epoch shuffles the training rows and takes one Adam step per minibatch.
    At epochs ``e`` with ``e % grid_update_every == 0`` and ``e < grid_update_stop``
    the grids are refitted on the epoch's first minibatch before any step.

    Args:
        log: Optional text stream receiving one JSON record per epoch.

    Returns:
        ``(model, metrics)``.

    Raises:
        NonFiniteLossError: With epoch, batch and parameter norms in the message.
    """
    rng = np.random.default_rng(config.seed)
    loss_fn = LOSS_FUNCTIONS[config.loss]
    opt = Adam(config.learning_rate)
    metrics = Metrics(num_parameters=model.num_parameters)
    n = len(train)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            x, y = train.features[idx], train.labels[idx]
            if (b == 0 and config.grid_update_every and epoch % config.grid_update_every == 0
                    and epoch < config.grid_update_stop and len(idx) >= 2):
                model.update_grids(x, config.grid_blend, config.grid_fit_tol)
            pred = model.forward(x)
            value, grad = loss_fn(pred, y)
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite loss {value} at epoch {epoch} batch {b}; parameter norms {_layer_norms(model)}"
                )
            model.backward(grad)
            opt.step(dict(model.named_parameters()), dict(model.named_gradients()))
            total += value * len(idx)
        metrics.train_loss.append(total / n)
        metrics.epoch_seconds.append(time.perf_counter() - start)
        if log is not None:
            log.write(json.dumps({"epoch": epoch, "train_loss": metrics.train_loss[-1],
                                  "seconds": metrics.epoch_seconds[-1]}) + "\n")
    if test is not None:
        result = evaluate(model, test, config.loss)
        metrics.test_loss = result["loss"]
        metrics.test_mse = result.get("mse")
        metrics.test_accuracy = result.get("accuracy")
    return model, metrics
