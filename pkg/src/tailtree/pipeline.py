"""Gauge series to event rows: daily means, rank-sum declustering, OLS deseasonalization."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .errors import RankDeficientDesign, UnparseableTimestamp

DEFAULT_WINDOW_R = 3
# meteorological seasons; autumn (Sep-Nov) is the baseline
_SEASON = {12: "winter", 1: "winter", 2: "winter", 3: "spring", 4: "spring", 5: "spring",
           6: "summer", 7: "summer", 8: "summer"}
_DUMMIES = ("spring", "summer", "winter")


@dataclass(frozen=True)
class TimeSeriesTable:
    dates: tuple[dt.date, ...]
    stations: tuple[str, ...]
    values: np.ndarray  # len(dates) x len(stations), NaN = missing


@dataclass(frozen=True)
class EventTable:
    dates: tuple[dt.date, ...]  # day of maximal rank-sum for each event
    stations: tuple[str, ...]
    values: np.ndarray
    windows: tuple[tuple[dt.date, dt.date], ...] = ()


def read_raw_csv(path) -> tuple[pd.Series, tuple[str, ...], np.ndarray]:
    frame = pd.read_csv(Path(path), dtype=str, keep_default_na=False)
    if frame.columns[0] != "timestamp":
        raise UnparseableTimestamp("first column must be named 'timestamp'")
    stations = tuple(str(c) for c in frame.columns[1:])
    values = frame.iloc[:, 1:].replace("", np.nan).apply(pd.to_numeric, errors="raise").to_numpy(dtype=float)
    return frame["timestamp"], stations, values


def daily_average(timestamps, stations, values) -> TimeSeriesTable:
    """Mean per station per calendar day; NaN readings are ignored."""
    try:
        stamps = pd.to_datetime(pd.Series(list(timestamps), dtype=str), format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise UnparseableTimestamp(f"cannot parse timestamps: {exc}") from None
    values = np.asarray(values, dtype=float).reshape(len(stamps), len(stations))
    frame = pd.DataFrame(values, columns=list(stations))
    frame["_day"] = stamps.dt.date.to_numpy()
    daily = frame.groupby("_day", sort=True).mean()
    daily = daily[daily.notna().any(axis=1)]
    return TimeSeriesTable(tuple(daily.index), tuple(stations), daily.to_numpy(dtype=float))


def _rank_sums(values: np.ndarray) -> np.ndarray:
    total = np.zeros(values.shape[0])
    for c in range(values.shape[1]):
        col = values[:, c]
        ok = ~np.isnan(col)
        if ok.any():
            total[ok] += rankdata(col[ok])
    return total


def decluster(daily: TimeSeriesTable, r: int = DEFAULT_WINDOW_R) -> EventTable:
    """Repeatedly take the 2r+1 day window around the highest rank-sum day.

    Ranks are computed once. The window is centred on the chosen day but
    shifted to stay inside its run of consecutive remaining calendar days; a
    run no longer than 2r+1 days becomes one event. Ties go to the earliest
    day. Events are returned in date order.
    """
    if r < 0:
        raise ValueError("r must be nonnegative")
    n = len(daily.dates)
    ordinal = np.array([d.toordinal() for d in daily.dates], dtype=np.int64)
    if n and np.any(np.diff(ordinal) <= 0):
        raise ValueError("dates must be strictly increasing")
    score = _rank_sums(daily.values)
    remaining = np.ones(n, dtype=bool)
    picked = []
    while remaining.any():
        star = int(np.argmax(np.where(remaining, score, -np.inf)))
        lo = star
        while lo > 0 and remaining[lo - 1] and ordinal[lo - 1] == ordinal[lo] - 1 and star - (lo - 1) <= 2 * r:
            lo -= 1
        hi = star
        while hi < n - 1 and remaining[hi + 1] and ordinal[hi + 1] == ordinal[hi] + 1 and (hi + 1) - star <= 2 * r:
            hi += 1
        # lo..hi is the run around star, truncated to 2r days each side
        a = max(lo, star - r)
        b = a + 2 * r
        if b > hi:
            b = hi
            a = max(lo, b - 2 * r)
        remaining[a:b + 1] = False
        picked.append((star, a, b))
    picked.sort()
    vals = np.full((len(picked), len(daily.stations)), np.nan)
    for i, (_, a, b) in enumerate(picked):
        block = daily.values[a:b + 1]
        has = ~np.isnan(block).all(axis=0)
        vals[i, has] = np.nanmax(block[:, has], axis=0)
    dates = tuple(daily.dates[s] for s, _, _ in picked)
    windows = tuple((daily.dates[a], daily.dates[b]) for _, a, b in picked)
    return EventTable(dates, daily.stations, vals, windows)


def season_design(dates) -> np.ndarray:
    """Columns: intercept, spring, summer, winter, trend t = 1..n."""
    n = len(dates)
    season = [_SEASON.get(d.month, "autumn") for d in dates]
    cols = [np.ones(n)] + [np.array([s == name for s in season], dtype=float) for name in _DUMMIES]
    cols.append(np.arange(1, n + 1, dtype=float))
    return np.column_stack(cols)


def deseasonalize(events: EventTable) -> EventTable:
    """Per-station OLS residuals on season dummies and a linear trend."""
    design = season_design(events.dates)
    out = np.full(events.values.shape, np.nan)
    for c, name in enumerate(events.stations):
        y = events.values[:, c]
        ok = ~np.isnan(y)
        x = design[ok]
        if ok.sum() < 8 or np.linalg.matrix_rank(x) < x.shape[1]:
            raise RankDeficientDesign(f"station {name}: season/trend design is rank deficient")
        res = y[ok].copy()
        for _ in range(2):  # second pass refines away rounding left by the first
            step, *_ = np.linalg.lstsq(x, res, rcond=None)
            res = res - x @ step
        out[ok, c] = res
    return EventTable(events.dates, events.stations, out, events.windows)


def format_event_csv(events: EventTable) -> str:
    lines = [",".join(("event_date",) + events.stations)]
    for d, row in zip(events.dates, events.values):
        cells = ["" if np.isnan(v) else repr(float(v)) for v in row]
        lines.append(",".join([d.isoformat()] + cells))
    return "\n".join(lines) + "\n"


def run_pipeline(raw_path, r: int = DEFAULT_WINDOW_R, detrend: bool = True) -> EventTable:
    stamps, stations, values = read_raw_csv(raw_path)
    events = decluster(daily_average(stamps, stations, values), r)
    return deseasonalize(events) if detrend else events
