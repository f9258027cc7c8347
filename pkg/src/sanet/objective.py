"""De-biasing training objective: accuracy loss plus weighted fairness loss.

Losses take observed demand ``y`` as a plain array in trip units and the
prediction ``yhat`` as a differentiable tensor in the same units. The fairness
term penalises the (absolute) covariance between the standardized sensitive
attribute and the percentage error over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .metrics import FILTER_THRESHOLD
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    lam: float = 10.0
    gamma: float = 0.0
    filter_threshold: float = FILTER_THRESHOLD

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be non-negative")


@dataclass(frozen=True)
class NormalizedAttribute:
    z_tilde: np.ndarray
    mean: float
    std: float


def normalize_attribute(z) -> NormalizedAttribute:
    """Population z-score of a per-cell attribute."""
    z = np.asarray(z, dtype=np.float64)
    if z.size < 2:
        raise ValueError("need at least two cells to standardize an attribute")
    mean, std = float(z.mean()), float(z.std())
    if std == 0:
        raise ValueError("sensitive attribute is constant; its standard deviation is zero")
    return NormalizedAttribute((z - mean) / std, mean, std)


def _percentage_error(y: np.ndarray, yhat: Tensor, threshold: float) -> Tensor:
    # filtered cells get weight 0 so they contribute nothing and no gradient
    inv = np.where(y > threshold, 1.0 / np.where(y > threshold, y, 1.0), 0.0)
    return (T.as_tensor(y) - yhat) * inv


def accuracy_loss(y, yhat: Tensor, config: LossConfig = LossConfig()) -> Tensor:
    """Sum of squared errors plus ``lam`` times the sum of squared percentage errors."""
    y = np.asarray(y, dtype=np.float64)
    yhat = T.as_tensor(yhat)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    sq = T.square(T.as_tensor(y) - yhat).sum()
    pe = _percentage_error(y, yhat, config.filter_threshold)
    return sq + config.lam * T.square(pe).sum()


def fairness_loss(y, yhat: Tensor, z_tilde, config: LossConfig = LossConfig()) -> Tensor:
    """``|sum over steps and filtered cells of z_tilde * (y - yhat) / y|``.

    ``z_tilde`` has the grid shape and broadcasts over leading batch axes.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = T.as_tensor(yhat)
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    if y.shape != yhat.shape or y.shape[y.ndim - z_tilde.ndim:] != z_tilde.shape:
        raise ValueError(f"shapes y{y.shape}, yhat{yhat.shape}, z{z_tilde.shape} are inconsistent")
    pe = _percentage_error(y, yhat, config.filter_threshold)
    return T.absolute((pe * z_tilde).sum())


def total_loss(y, yhat: Tensor, z_tilde, config: LossConfig = LossConfig()) -> Tensor:
    acc = accuracy_loss(y, yhat, config)
    if config.gamma == 0:
        return acc
    return acc + config.gamma * fairness_loss(y, yhat, z_tilde, config)
