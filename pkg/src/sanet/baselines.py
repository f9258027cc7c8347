"""Per-cell classical predictors: historical average, moving average, seasonal AR.

All predictors are clamped at zero. The seasonal AR model stands in for ARIMA:
an AR(6) with intercept fitted by ridge-damped least squares on the series of
observations sharing one seasonal slot.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from typing import Sequence

import numpy as np

from .data import DemandSeries

AR_ORDER = 6
AR_MIN_OBS = 14
RIDGE = 1e-6


def relative_interval(ts: datetime) -> tuple[int, int]:
    """(day-of-week, hour) key used by the historical average."""
    return ts.weekday(), ts.hour


@dataclass(frozen=True)
class SeasonalIndex:
    hour: np.ndarray
    weekday: np.ndarray

    @classmethod
    def of(cls, timestamps: Sequence[datetime]) -> "SeasonalIndex":
        return cls(np.array([t.hour for t in timestamps]), np.array([t.weekday() for t in timestamps]))

    def keys(self) -> list[tuple[int, int]]:
        return list(zip(self.weekday.tolist(), self.hour.tolist()))


# historical average --------------------------------------------------------

def historical_average(train: DemandSeries, key: tuple[int, int], cell: tuple[int, int]) -> float:
    if len(train) == 0:
        raise ValueError("historical average needs a non-empty training series")
    r, c = cell
    sel = [i for i, t in enumerate(train.timestamps) if relative_interval(t) == key]
    values = train.grids[sel, r, c] if sel else train.grids[:, r, c]
    return max(float(values.mean()), 0.0)


def predict_historical_average(train: DemandSeries, targets: Sequence[datetime]) -> np.ndarray:
    """HA prediction grid for every target timestamp, shape (T, M, N)."""
    if len(train) == 0:
        raise ValueError("historical average needs a non-empty training series")
    index = SeasonalIndex.of(train.timestamps).keys()
    grand = train.grids.mean(axis=0)
    means = {}
    for key in set(index):
        sel = [i for i, k in enumerate(index) if k == key]
        means[key] = train.grids[sel].mean(axis=0)
    out = np.stack([means.get(relative_interval(t), grand) for t in targets])
    return np.maximum(out, 0.0)


# moving average ------------------------------------------------------------

def moving_average(history: Sequence[float]) -> float:
    """Mean of up to the last 6 observations in ``history``."""
    values = np.asarray(history, dtype=np.float64)[-AR_ORDER:]
    if values.size == 0:
        raise ValueError("moving average needs at least one prior observation")
    return max(float(values.mean()), 0.0)


def _history_index(series: DemandSeries, mode: str) -> list[list[int]]:
    """For each position, indices of its candidate history, oldest first."""
    ts = series.timestamps
    if mode == "hourly":
        return [list(range(max(0, i - AR_ORDER), i)) for i in range(len(ts))]
    if mode != "daily":
        raise ValueError(f"unknown moving-average mode {mode!r}")
    seen: dict[int, list[int]] = {}
    out = []
    for i, t in enumerate(ts):
        prior = seen.setdefault(t.hour, [])
        out.append(prior[-AR_ORDER:])
        prior.append(i)
    return out


def predict_moving_average(series: DemandSeries, targets: Sequence[datetime], mode: str = "daily") -> np.ndarray:
    """MA prediction for the target timestamps using every earlier observation in ``series``.

    ``daily`` averages the same hour on the 6 preceding days; ``hourly``
    averages the 6 preceding service hours.
    """
    position = {t: i for i, t in enumerate(series.timestamps)}
    hist = _history_index(series, mode)
    out = []
    for t in targets:
        idx = hist[position[t]]
        if not idx:
            raise ValueError(f"no history before {t.isoformat()}")
        out.append(series.grids[idx].mean(axis=0))
    return np.maximum(np.stack(out), 0.0)


# seasonal autoregression ---------------------------------------------------

def _lagged(y: np.ndarray, order: int = AR_ORDER) -> tuple[np.ndarray, np.ndarray]:
    rows = [np.concatenate(([1.0], y[t - order:t][::-1])) for t in range(order, len(y))]
    return np.array(rows), y[order:]


def fit_seasonal_ar(subseries: Sequence[float], order: int = AR_ORDER, ridge: float = RIDGE) -> np.ndarray | None:
    """Intercept followed by lag-1..lag-``order`` coefficients, or None if too short."""
    y = np.asarray(subseries, dtype=np.float64)
    if y.size < AR_MIN_OBS:
        return None
    x, target = _lagged(y, order)
    gram = x.T @ x + ridge * np.eye(order + 1)
    return np.linalg.solve(gram, x.T @ target)


def ar_predict(coef: np.ndarray, recent: Sequence[float]) -> float:
    """One-step prediction from the most recent ``order`` observations (oldest first)."""
    lags = np.asarray(recent, dtype=np.float64)[::-1]
    return max(float(coef[0] + coef[1:] @ lags), 0.0)


def seasonal_ar_fit(train: DemandSeries, cell: tuple[int, int], hour_slot: int) -> np.ndarray | None:
    """Coefficients for one cell on the daily series at ``hour_slot``."""
    r, c = cell
    sel = [i for i, t in enumerate(train.timestamps) if t.hour == hour_slot]
    return fit_seasonal_ar(train.grids[sel, r, c])


def predict_seasonal_ar(train: DemandSeries, series: DemandSeries, targets: Sequence[datetime]) -> np.ndarray:
    """Seasonal AR predictions with fallback to HA when a slot is too short.

    Coefficients are fitted on ``train``; lagged inputs come from ``series``,
    which must contain the six same-hour observations preceding each target.
    """
    m, n = series.grid_shape
    ha = predict_historical_average(train, targets)
    train_hours = np.array([t.hour for t in train.timestamps])
    coefs: dict[int, list] = {}
    for hour in sorted(set(t.hour for t in targets)):
        sub = train.grids[train_hours == hour]
        coefs[hour] = [[fit_seasonal_ar(sub[:, r, c]) for c in range(n)] for r in range(m)]
    position = {t: i for i, t in enumerate(series.timestamps)}
    hist = _history_index(series, "daily")
    out = np.empty((len(targets), m, n))
    for k, t in enumerate(targets):
        idx = hist[position[t]]
        for r in range(m):
            for c in range(n):
                coef = coefs[t.hour][r][c]
                if coef is None or len(idx) < AR_ORDER:
                    out[k, r, c] = ha[k, r, c]
                else:
                    out[k, r, c] = ar_predict(coef, series.grids[idx, r, c])
    return out
