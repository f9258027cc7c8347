"""Accuracy and fairness metrics over (T, M, N) demand arrays.

MAPE and MPE use two-stage averaging: a mean over the cells whose observed
demand exceeds the filter threshold at each step, then a mean over steps.
Steps where no cell passes are skipped.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Sequence

import numpy as np

FILTER_THRESHOLD = 0.1
UNDEFINED = "undefined"


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class GroupMask:
    """Cells with attribute above ``threshold`` form the disadvantaged group Z0."""

    z: np.ndarray
    disadvantaged: np.ndarray
    threshold: float
    attribute: str = "z"

    @property
    def privileged(self) -> np.ndarray:
        return ~self.disadvantaged

    def swapped(self) -> "GroupMask":
        return GroupMask(self.z, ~self.disadvantaged, self.threshold, self.attribute)


def build_group_mask(z, threshold: float, attribute: str = "z") -> GroupMask:
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all() or (z < 0).any() or (z > 1).any():
        raise MetricError(f"attribute {attribute!r} must lie in [0, 1]")
    disadvantaged = z > threshold
    if disadvantaged.all() or not disadvantaged.any():
        raise MetricError(f"threshold {threshold} on {attribute!r} leaves a group empty")
    return GroupMask(z, disadvantaged, float(threshold), attribute)


def _check(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise MetricError(f"shape mismatch {y.shape} vs {yhat.shape}")
    if y.ndim == 1:
        y, yhat = y[None], yhat[None]
    return y.reshape(y.shape[0], -1), yhat.reshape(yhat.shape[0], -1)


def percentage_errors(y, yhat, threshold: float = FILTER_THRESHOLD) -> np.ndarray:
    """(y - yhat) / y where y > threshold, NaN elsewhere; shape (T, cells)."""
    y, yhat = _check(y, yhat)
    passing = y > threshold
    safe = np.where(passing, y, 1.0)
    return np.where(passing, (y - yhat) / safe, np.nan)


def _two_stage(values: np.ndarray) -> float:
    counts = (~np.isnan(values)).sum(axis=1)
    steps = counts > 0
    if not steps.any():
        return math.nan
    per_step = np.nansum(values[steps], axis=1) / counts[steps]
    return float(per_step.mean())


def mae(y, yhat, cells: np.ndarray | None = None) -> float:
    y, yhat = _check(y, yhat)
    err = np.abs(y - yhat)
    if cells is not None:
        err = err[:, np.asarray(cells).reshape(-1)]
    return float(err.mean())


def mape(y, yhat, cells: np.ndarray | None = None, threshold: float = FILTER_THRESHOLD) -> float:
    pe = np.abs(percentage_errors(y, yhat, threshold))
    if cells is not None:
        pe = pe[:, np.asarray(cells).reshape(-1)]
    return _two_stage(pe)


def mpe(y, yhat, cells: np.ndarray | None = None, threshold: float = FILTER_THRESHOLD) -> float:
    pe = percentage_errors(y, yhat, threshold)
    if cells is not None:
        pe = pe[:, np.asarray(cells).reshape(-1)]
    return _two_stage(pe)


def mpe_gap(y, yhat, mask: GroupMask, threshold: float = FILTER_THRESHOLD) -> float:
    """MPE over the disadvantaged cells minus MPE over the privileged cells."""
    z0 = mpe(y, yhat, mask.disadvantaged, threshold)
    z1 = mpe(y, yhat, mask.privileged, threshold)
    if math.isnan(z0) or math.isnan(z1):
        raise MetricError("a group has no cell above the demand filter at any step")
    return z0 - z1


def mpe_field(y, yhat, threshold: float = FILTER_THRESHOLD) -> np.ndarray:
    """Per-cell MPE averaged over the steps where that cell passes the filter.

    Cells that never pass are NaN. Returns an (M, N) array.
    """
    y = np.asarray(y, dtype=np.float64)
    pe = percentage_errors(y, yhat, threshold)
    counts = (~np.isnan(pe)).sum(axis=0)
    sums = np.nansum(pe, axis=0)
    out = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return out.reshape(y.shape[1:])


def rook_adjacency(m: int, n: int) -> np.ndarray:
    """Binary 4-neighbour weights over row-major cells, shape (M*N, M*N)."""
    w = np.zeros((m * n, m * n))
    for r in range(m):
        for c in range(n):
            i = r * n + c
            if r + 1 < m:
                w[i, i + n] = w[i + n, i] = 1.0
            if c + 1 < n:
                w[i, i + 1] = w[i + 1, i] = 1.0
    return w


def morans_i(field, adjacency: np.ndarray | None = None) -> float:
    """Global Moran's I of a 2-D field under rook adjacency (or given weights).

    NaN cells are dropped together with their weights.
    """
    x = np.asarray(field, dtype=np.float64)
    w = rook_adjacency(*x.shape) if adjacency is None else np.asarray(adjacency, dtype=np.float64)
    x = x.reshape(-1)
    keep = ~np.isnan(x)
    x, w = x[keep], w[np.ix_(keep, keep)]
    if x.size < 2:
        raise MetricError("Moran's I needs at least two defined cells")
    dev = x - x.mean()
    denom = float(dev @ dev)
    if denom <= 0 or np.ptp(x) == 0:
        raise MetricError("Moran's I is undefined for a constant field")
    total = w.sum()
    if total <= 0:
        raise MetricError("Moran's I needs at least one neighbour pair")
    return float(x.size / total * (dev @ w @ dev) / denom)


# reports -------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Flat ``(scope, metric) -> value`` table.

    Scopes: ``meta``, ``overall``, ``group:<attr>:Z0|Z1``, ``gap:<attr>``,
    ``hour:<HH>``, ``hour:<HH>:<attr>:Z0|Z1``, ``spatial`` and ``count``.
    """

    values: dict[tuple[str, str], float | str] = field(default_factory=dict)

    def __getitem__(self, key: tuple[str, str]):
        return self.values[key]

    def get(self, scope: str, metric: str, default=math.nan):
        return self.values.get((scope, metric), default)

    @property
    def mae(self) -> float:
        return self.values[("overall", "mae")]

    @property
    def mape(self) -> float:
        return self.values[("overall", "mape")]

    @property
    def mpe(self) -> float:
        return self.values[("overall", "mpe")]

    def gap(self, attribute: str) -> float:
        return self.values[(f"gap:{attribute}", "mpe_gap")]

    def group(self, attribute: str, label: str, metric: str = "mpe") -> float:
        return self.values[(f"group:{attribute}:{label}", metric)]

    @property
    def moran(self):
        return self.values.get(("spatial", "morans_i"), UNDEFINED)

    def attributes(self) -> list[str]:
        return [s.split(":", 1)[1] for s, m in self.values if s.startswith("gap:")]

    def rows(self):
        for (scope, metric), value in self.values.items():
            yield scope, metric, value

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scope", "metric", "value"])
            for scope, metric, value in self.rows():
                w.writerow([scope, metric, _fmt_value(value)])

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        values: dict[tuple[str, str], float | str] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["scope", "metric", "value"]:
                raise MetricError(f"{path}: not a metrics report")
            for rec in reader:
                if len(rec) != 3:
                    raise MetricError(f"{path}: malformed row {rec}")
                scope, metric, text = rec
                values[(scope, metric)] = text if scope == "meta" else _parse_value(text)
        return cls(values)


def _fmt_value(value) -> str:
    if isinstance(value, str):
        return value
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return UNDEFINED
    return repr(float(value))


def _parse_value(text: str):
    if text == UNDEFINED:
        return math.nan
    return float(text)


def _group_metrics(values, y, yhat, cells, scope, threshold):
    values[(scope, "mae")] = mae(y, yhat, cells)
    values[(scope, "mape")] = mape(y, yhat, cells, threshold)
    values[(scope, "mpe")] = mpe(y, yhat, cells, threshold)


def point_metrics(y, yhat, masks: GroupMask | Sequence[GroupMask] | None = None,
                  timestamps: Sequence[datetime] | None = None,
                  threshold: float = FILTER_THRESHOLD,
                  meta: dict[str, str] | None = None) -> MetricsReport:
    """Full metrics report for observed ``y`` and predicted ``yhat``, both (T, M, N)."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 3:
        raise MetricError(f"expected matching (T, M, N) arrays, got {y.shape} and {yhat.shape}")
    if isinstance(masks, GroupMask):
        masks = [masks]
    masks = list(masks or [])
    values: dict[tuple[str, str], float | str] = {}
    for k, v in (meta or {}).items():
        values[("meta", k)] = str(v)
    _group_metrics(values, y, yhat, None, "overall", threshold)
    for mask in masks:
        for label, cells in (("Z0", mask.disadvantaged), ("Z1", mask.privileged)):
            _group_metrics(values, y, yhat, cells, f"group:{mask.attribute}:{label}", threshold)
        z0 = values[(f"group:{mask.attribute}:Z0", "mpe")]
        z1 = values[(f"group:{mask.attribute}:Z1", "mpe")]
        values[(f"gap:{mask.attribute}", "mpe_gap")] = z0 - z1

    if timestamps is not None:
        if len(timestamps) != y.shape[0]:
            raise MetricError("timestamps do not match the number of steps")
        hours = np.array([t.hour for t in timestamps])
        for hour in sorted(set(hours.tolist())):
            sel = hours == hour
            scope = f"hour:{hour:02d}"
            _group_metrics(values, y[sel], yhat[sel], None, scope, threshold)
            for mask in masks:
                for label, cells in (("Z0", mask.disadvantaged), ("Z1", mask.privileged)):
                    values[(f"{scope}:{mask.attribute}:{label}", "mpe")] = mpe(
                        y[sel], yhat[sel], cells, threshold)

    field_ = mpe_field(y, yhat, threshold)
    try:
        values[("spatial", "morans_i")] = morans_i(field_)
    except MetricError:
        values[("spatial", "morans_i")] = math.nan
    passing = y > threshold
    values[("count", "steps")] = float(y.shape[0])
    values[("count", "cells")] = float(y[0].size)
    values[("count", "passing_observations")] = float(passing.sum())
    values[("count", "passing_cells")] = float(passing.any(axis=0).sum())
    return MetricsReport(values)


def average_reports(reports: Iterable[MetricsReport]) -> MetricsReport:
    """Elementwise mean of numeric entries; meta is taken from the first report."""
    reports = list(reports)
    if not reports:
        raise MetricError("nothing to average")
    if len(reports) == 1:
        return MetricsReport(dict(reports[0].values))
    out: dict[tuple[str, str], float | str] = {}
    for key, value in reports[0].values.items():
        if isinstance(value, str):
            out[key] = value
            continue
        column = [r.values.get(key, math.nan) for r in reports]
        out[key] = float(np.mean(column))
    out[("meta", "runs")] = str(len(reports))
    return MetricsReport(out)


def comparison_rows(reports: Sequence[tuple[str, MetricsReport]]) -> tuple[list[str], list[list]]:
    """Comparison rows: label, MAE, MAPE, then per attribute gap, Z0 MPE, Z1 MPE."""
    attributes: list[str] = []
    for _, r in reports:
        for a in r.attributes():
            if a not in attributes:
                attributes.append(a)
    header = ["label", "MAE", "MAPE"]
    for a in attributes:
        header += [f"MPE gap ({a})", f"{a} Z0 MPE", f"{a} Z1 MPE"]
    rows = []
    for label, r in reports:
        row = [label, r.mae, r.mape]
        for a in attributes:
            row += [r.get(f"gap:{a}", "mpe_gap"), r.get(f"group:{a}:Z0", "mpe"),
                    r.get(f"group:{a}:Z1", "mpe")]
        rows.append(row)
    return header, rows


def format_table(reports: Sequence[tuple[str, MetricsReport]]) -> str:
    header, rows = comparison_rows(reports)
    cells = [header] + [[row[0]] + [("n/a" if math.isnan(v) else f"{v:.3f}") for v in row[1:]]
                        for row in rows]
    widths = [max(len(str(c[i])) for c in cells) for i in range(len(header))]
    lines = []
    for k, c in enumerate(cells):
        lines.append("  ".join(str(v).ljust(widths[i]) if i == 0 else str(v).rjust(widths[i])
                               for i, v in enumerate(c)))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_mpe_map(path, field_: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "mpe"])
        m, n = field_.shape
        for r in range(m):
            for c in range(n):
                w.writerow([r, c, _fmt_value(field_[r, c])])


def write_statistics(path, stats: dict[str, float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", "value"])
        for name, value in stats.items():
            w.writerow([name, _fmt_value(value)])
