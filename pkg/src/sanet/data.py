"""Dataset ingestion, calendar features, normalisation, splitting and windows.

File formats (UTF-8, comma separated, header required):

* demand: ``timestamp,row,col,count``; omitted records are zero demand
* socio-demographics: ``row,col,<var1>,...,<varP>``
* weather: ``timestamp,precip_mm``
* holidays: one ISO date per line (``#`` starts a comment)
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geo import SocioDemographicGrid

SERVICE_HOURS = tuple(range(6, 22))
DEFAULT_SPLIT = (265, 29, 124)
SYNTH_START = date(2018, 11, 1)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# containers ----------------------------------------------------------------

@dataclass(frozen=True)
class DemandSeries:
    """Hourly M x N demand grids over in-service hours."""

    timestamps: tuple[datetime, ...]
    grids: np.ndarray  # (T, M, N)

    def __post_init__(self):
        grids = np.asarray(self.grids, dtype=np.float64)
        ts = tuple(self.timestamps)
        if grids.ndim != 3 or grids.shape[0] != len(ts):
            raise DataError(f"{len(ts)} timestamps but grids of shape {grids.shape}")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError("timestamps must be strictly increasing")
        if (grids < 0).any():
            raise DataError("demand counts must be non-negative")
        grids.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "grids", grids)

    def __len__(self):
        return len(self.timestamps)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.grids.shape[1], self.grids.shape[2]

    def days(self) -> list[date]:
        return sorted({t.date() for t in self.timestamps})

    def select(self, mask: np.ndarray) -> "DemandSeries":
        idx = np.flatnonzero(mask)
        return DemandSeries(tuple(self.timestamps[i] for i in idx), self.grids[idx])


@dataclass(frozen=True)
class CalendarFeatures:
    tod: np.ndarray      # 0 off-peak, 1 mid-peak, 2 peak
    dow: np.ndarray      # 1 weekday, 0 weekend
    holiday: np.ndarray  # 1 on supplied holidays

    def vectors(self) -> np.ndarray:
        """(T, 3) array of (dow, tod, holiday)."""
        return np.stack([self.dow, self.tod, self.holiday], axis=1).astype(np.float64)


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float

    def zscore(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


@dataclass(frozen=True)
class Dataset:
    demand: DemandSeries
    precip: np.ndarray  # (T,) millimetres, aligned with demand
    sociodemo: SocioDemographicGrid
    holidays: frozenset[date] = frozenset()

    def __post_init__(self):
        precip = np.asarray(self.precip, dtype=np.float64)
        if precip.shape != (len(self.demand),):
            raise DataError("weather series is not aligned with the demand series")
        if (precip < 0).any() or not np.isfinite(precip).all():
            raise DataError("precipitation must be finite and non-negative")
        if self.sociodemo.grid_shape != self.demand.grid_shape:
            raise DataError(f"socio-demographic grid {self.sociodemo.grid_shape} does not match "
                            f"demand grid {self.demand.grid_shape}")
        object.__setattr__(self, "precip", precip)
        object.__setattr__(self, "holidays", frozenset(self.holidays))

    def calendar(self) -> CalendarFeatures:
        return build_calendar(self.demand.timestamps, self.holidays)

    def select_days(self, days: Iterable[date]) -> "Dataset":
        wanted = set(days)
        mask = np.array([t.date() in wanted for t in self.demand.timestamps])
        return replace(self, demand=self.demand.select(mask), precip=self.precip[mask])


# calendar ------------------------------------------------------------------

def time_of_day(ts: datetime, workday: bool) -> int:
    """Peak (2), mid-peak (1) or off-peak (0) for the hour starting at ``ts``."""
    h = ts.hour
    if workday:
        if 7 <= h < 9 or 15 <= h < 19:
            return 2
        if 9 <= h < 15:
            return 1
        return 0
    return 1 if 11 <= h < 19 else 0


def build_calendar(timestamps: Sequence[datetime], holidays: Iterable[date] = ()) -> CalendarFeatures:
    holidays = set(holidays)
    tod, dow, hol = [], [], []
    for ts in timestamps:
        weekday = ts.weekday() < 5
        is_holiday = ts.date() in holidays
        tod.append(time_of_day(ts, weekday and not is_holiday))
        dow.append(int(weekday))
        hol.append(int(is_holiday))
    return CalendarFeatures(np.array(tod, dtype=int), np.array(dow, dtype=int), np.array(hol, dtype=int))


# normalisation and splitting -----------------------------------------------

def fit_normalization(train: DemandSeries) -> NormalizationStats:
    mean = float(train.grids.mean())
    std = float(train.grids.std())
    return NormalizationStats(mean, std if std > 0 else 1.0)


def split_days(days: Sequence[date], fractions: Sequence[float] = DEFAULT_SPLIT):
    """Contiguous train/val/test day lists; floor for train and val, rest to test."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or min(fractions) < 0 or sum(fractions) <= 0:
        raise DataError(f"need three non-negative split fractions, got {fractions}")
    total = sum(fractions)
    n = len(days)
    n_train = math.floor(n * fractions[0] / total + 1e-9)
    n_val = math.floor(n * fractions[1] / total + 1e-9)
    parts = (days[:n_train], days[n_train:n_train + n_val], days[n_train + n_val:])
    if any(len(p) == 0 for p in parts):
        raise DataError(f"split of {n} days into {[len(p) for p in parts]} leaves an empty part")
    return parts


def split(dataset: Dataset, fractions: Sequence[float] = DEFAULT_SPLIT) -> tuple[Dataset, Dataset, Dataset]:
    return tuple(dataset.select_days(part) for part in split_days(dataset.demand.days(), fractions))


# windows -------------------------------------------------------------------

@dataclass(frozen=True)
class Windows:
    """Supervised samples; demand inputs are z-scored, targets are raw counts."""

    demand: np.ndarray    # (S, d, M, N)
    calendar: np.ndarray  # (S, d + 1, 3)
    precip: np.ndarray    # (S, d)
    target: np.ndarray    # (S, M, N)
    timestamps: tuple[datetime, ...]

    def __len__(self):
        return len(self.timestamps)

    def subset(self, idx) -> "Windows":
        idx = np.asarray(idx)
        return Windows(self.demand[idx], self.calendar[idx], self.precip[idx], self.target[idx],
                       tuple(self.timestamps[i] for i in idx))


def make_windows(dataset: Dataset, look_back: int, stats: NormalizationStats) -> Windows:
    """All windows whose inputs and target fall on the same service day."""
    if look_back < 1:
        raise DataError("look-back must be at least 1")
    ts = dataset.demand.timestamps
    grids = dataset.demand.grids
    normed = stats.zscore(grids)
    cal = dataset.calendar().vectors()
    by_day: dict[date, list[int]] = {}
    for i, t in enumerate(ts):
        by_day.setdefault(t.date(), []).append(i)
    samples = []
    for day in sorted(by_day):
        idx = by_day[day]
        for k in range(look_back, len(idx)):
            samples.append(idx[k - look_back:k + 1])
    if not samples:
        raise DataError(f"no day has more than {look_back} service hours")
    s = np.array(samples)
    inputs = s[:, :-1]
    return Windows(
        demand=normed[inputs],
        calendar=cal[s],
        precip=dataset.precip[inputs],
        target=grids[s[:, -1]],
        timestamps=tuple(ts[i] for i in s[:, -1]),
    )


# loaders -------------------------------------------------------------------

def _parse_hour(text: str, service_hours: Sequence[int], where: str) -> datetime:
    try:
        ts = datetime.fromisoformat(text.strip())
    except ValueError as exc:
        raise DataError(f"{where}: bad timestamp {text!r}") from exc
    if ts.minute or ts.second or ts.microsecond:
        raise DataError(f"{where}: timestamp {text!r} is not on the hour")
    if ts.tzinfo is not None:
        ts = ts.replace(tzinfo=None)
    if ts.hour not in service_hours:
        raise DataError(f"{where}: {text!r} is outside the service hours")
    return ts


def _reader(path: Path, required: Sequence[str]):
    handle = open(path, newline="", encoding="utf-8")
    reader = csv.reader(handle)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        handle.close()
        raise DataError(f"{path}: empty file") from None
    if header[:len(required)] != list(required):
        handle.close()
        raise DataError(f"{path}: header must start with {','.join(required)}, got {','.join(header)}")
    return handle, reader, header


def service_timeline(first: date, last: date, service_hours: Sequence[int] = SERVICE_HOURS) -> list[datetime]:
    out = []
    day = first
    while day <= last:
        out.extend(datetime(day.year, day.month, day.day, h) for h in service_hours)
        day += timedelta(days=1)
    return out


def load_demand(path, rows: int | None = None, cols: int | None = None,
                service_hours: Sequence[int] = SERVICE_HOURS) -> DemandSeries:
    """Dense demand series covering every service hour from the first to the last day."""
    path = Path(path)
    handle, reader, _ = _reader(path, ("timestamp", "row", "col", "count"))
    records: dict[tuple[datetime, int, int], float] = {}
    with handle:
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            where = f"{path}:{lineno}"
            if len(rec) != 4:
                raise DataError(f"{where}: expected 4 fields, got {len(rec)}")
            ts = _parse_hour(rec[0], service_hours, where)
            try:
                r, c, count = int(rec[1]), int(rec[2]), float(rec[3])
            except ValueError as exc:
                raise DataError(f"{where}: malformed record {rec}") from exc
            if not math.isfinite(count) or count < 0:
                raise DataError(f"{where}: count must be finite and non-negative")
            if r < 0 or c < 0 or (rows is not None and r >= rows) or (cols is not None and c >= cols):
                raise DataError(f"{where}: cell ({r}, {c}) outside the grid")
            key = (ts, r, c)
            if key in records:
                raise DataError(f"{where}: duplicate record for {rec[0]} cell ({r}, {c})")
            records[key] = count
    if not records:
        raise DataError(f"{path}: no demand records")
    rows = rows if rows is not None else 1 + max(k[1] for k in records)
    cols = cols if cols is not None else 1 + max(k[2] for k in records)
    stamps = [k[0] for k in records]
    timeline = service_timeline(min(stamps).date(), max(stamps).date(), service_hours)
    position = {t: i for i, t in enumerate(timeline)}
    grids = np.zeros((len(timeline), rows, cols))
    for (ts, r, c), count in records.items():
        grids[position[ts], r, c] = count
    return DemandSeries(tuple(timeline), grids)


def load_weather(path, timestamps: Sequence[datetime],
                 service_hours: Sequence[int] = SERVICE_HOURS) -> np.ndarray:
    path = Path(path)
    handle, reader, _ = _reader(path, ("timestamp", "precip_mm"))
    values: dict[datetime, float] = {}
    with handle:
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            where = f"{path}:{lineno}"
            if len(rec) != 2:
                raise DataError(f"{where}: expected 2 fields")
            ts = _parse_hour(rec[0], service_hours, where)
            try:
                mm = float(rec[1])
            except ValueError as exc:
                raise DataError(f"{where}: bad precipitation {rec[1]!r}") from exc
            if not math.isfinite(mm) or mm < 0:
                raise DataError(f"{where}: precipitation must be finite and non-negative")
            if ts in values:
                raise DataError(f"{where}: duplicate weather record")
            values[ts] = mm
    missing = [t for t in timestamps if t not in values]
    if missing:
        raise DataError(f"{path}: no precipitation for {len(missing)} demand hours, first {missing[0].isoformat()}")
    return np.array([values[t] for t in timestamps])


def load_sociodemo(path, rows: int, cols: int) -> SocioDemographicGrid:
    path = Path(path)
    handle, reader, header = _reader(path, ("row", "col"))
    names = header[2:]
    if not names:
        raise DataError(f"{path}: no socio-demographic variables")
    values = np.full((len(names), rows, cols), np.nan)
    with handle:
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            where = f"{path}:{lineno}"
            if len(rec) != len(header):
                raise DataError(f"{where}: expected {len(header)} fields")
            try:
                r, c = int(rec[0]), int(rec[1])
                vals = [float(v) for v in rec[2:]]
            except ValueError as exc:
                raise DataError(f"{where}: malformed record") from exc
            if not (0 <= r < rows and 0 <= c < cols):
                raise DataError(f"{where}: cell ({r}, {c}) outside the grid")
            if not np.isnan(values[0, r, c]):
                raise DataError(f"{where}: duplicate cell ({r}, {c})")
            values[:, r, c] = vals
    if np.isnan(values).any():
        raise DataError(f"{path}: missing cells or values")
    return SocioDemographicGrid(tuple(names), values)


def load_holidays(path) -> frozenset[date]:
    out = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            out.add(date.fromisoformat(text))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad date {text!r}") from exc
    return frozenset(out)


def load_dataset(demand_path, sociodemo_path, weather_path, holidays_path=None,
                 rows: int | None = None, cols: int | None = None) -> Dataset:
    demand = load_demand(demand_path, rows, cols)
    m, n = demand.grid_shape
    return Dataset(
        demand=demand,
        precip=load_weather(weather_path, demand.timestamps),
        sociodemo=load_sociodemo(sociodemo_path, m, n),
        holidays=load_holidays(holidays_path) if holidays_path else frozenset(),
    )


# writers -------------------------------------------------------------------

def fmt(x: float) -> str:
    """Shortest repr that round-trips a float exactly."""
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def write_demand(path, series: DemandSeries):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "row", "col", "count"])
        m, n = series.grid_shape
        for ts, grid in zip(series.timestamps, series.grids):
            stamp = ts.isoformat()
            for r in range(m):
                for c in range(n):
                    w.writerow([stamp, r, c, fmt(grid[r, c])])


def write_weather(path, timestamps: Sequence[datetime], precip: np.ndarray):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "precip_mm"])
        for ts, mm in zip(timestamps, precip):
            w.writerow([ts.isoformat(), fmt(mm)])


def write_sociodemo(path, grid: SocioDemographicGrid):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", *grid.names])
        _, m, n = grid.values.shape
        for r in range(m):
            for c in range(n):
                w.writerow([r, c, *(fmt(v) for v in grid.values[:, r, c])])


def write_holidays(path, holidays: Iterable[date]):
    Path(path).write_text("".join(f"{d.isoformat()}\n" for d in sorted(holidays)), encoding="utf-8")


def write_dataset(dataset: Dataset, demand_path, sociodemo_path, weather_path, holidays_path):
    write_demand(demand_path, dataset.demand)
    write_sociodemo(sociodemo_path, dataset.sociodemo)
    write_weather(weather_path, dataset.demand.timestamps, dataset.precip)
    write_holidays(holidays_path, dataset.holidays)


# synthetic data ------------------------------------------------------------

TOD_PROFILE = (0.5, 1.0, 1.6)
EVENING_BOOST = 1.3


def synthetic_rates(timestamps: Sequence[datetime], holidays: Iterable[date], m: int, n: int) -> np.ndarray:
    """Expected hourly demand (T, M, N) of the synthetic generator."""
    cal = build_calendar(timestamps, holidays)
    base = np.where(np.arange(m)[:, None] < m // 2, 8.0, 1.0) * np.ones((m, n))
    privileged = np.arange(m) < m // 2
    rates = np.empty((len(timestamps), m, n))
    for k, ts in enumerate(timestamps):
        rate = base * TOD_PROFILE[cal.tod[k]]
        if cal.tod[k] == 2 and ts.hour >= 15:
            rate = np.where(privileged[:, None], rate * EVENING_BOOST, rate)
        rates[k] = rate
    return rates


def synthesize(seed: int, m: int, n: int, days: int, start: date = SYNTH_START,
               service_hours: Sequence[int] = SERVICE_HOURS) -> Dataset:
    """Seeded stand-in city: high-demand privileged north, low-demand disadvantaged south.

    Rows ``[0, m/2)`` have attribute 0.1 and base rate 8; rows ``[m/2, m)``
    have attribute 0.9 and base rate 1. Counts are Poisson.
    """
    if m % 2:
        raise DataError("synthetic grid needs an even number of rows")
    if days < 1 or n < 1:
        raise DataError("synthetic grid needs at least one day and one column")
    rng = np.random.default_rng(seed)
    north = (np.arange(m) < m // 2)[:, None] * np.ones((m, n), dtype=bool)
    pct_black = np.where(north, 0.1, 0.9)
    low_income = np.clip(np.where(north, 0.15, 0.45) + rng.uniform(-0.05, 0.05, (m, n)), 0.0, 1.0)
    density = np.where(north, 9000.0, 4000.0) * rng.lognormal(0.0, 0.25, (m, n))
    sociodemo = SocioDemographicGrid(("pct_black", "pct_low_income", "pop_density"),
                                     np.stack([pct_black, low_income, density]))

    timeline = service_timeline(start, start + timedelta(days=days - 1), service_hours)
    holidays = frozenset(start + timedelta(days=i) for i in range(14, days, 30))
    rates = synthetic_rates(timeline, holidays, m, n)
    counts = rng.poisson(rates).astype(np.float64)
    wet = rng.random(len(timeline)) < 0.1
    precip = np.where(wet, rng.exponential(0.3, len(timeline)), 0.0)
    return Dataset(DemandSeries(tuple(timeline), counts), precip, sociodemo, holidays)
