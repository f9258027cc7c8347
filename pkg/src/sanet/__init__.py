"""Socially-aware spatio-temporal demand forecasting with a from-scratch autodiff core."""

from .cells import KINDS, Model, ModelConfig, build_model
from .checkpoint import Checkpoint
from .data import Dataset, DemandSeries, load_dataset, synthesize
from .metrics import MetricsReport, mae, mape, morans_i, mpe, mpe_gap, point_metrics
from .objective import LossConfig, accuracy_loss, fairness_loss, total_loss
from .tensor import Tensor, backward
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
