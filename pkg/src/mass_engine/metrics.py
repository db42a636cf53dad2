"""Factor-quality and portfolio-performance metrics.

Correlations return NaN when undefined (constant input), never 0.
Standard deviations use the population form throughout.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Mapping, Sequence

import numpy as np

TRADING_DAYS = 252
MIN_CROSS_SECTION = 3


def rankdata(x: np.ndarray) -> np.ndarray:
    """1-based ranks along the last axis; ties share their average position."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n == 0:
        return x.copy()
    order = np.argsort(x, axis=-1, kind="mergesort")
    xs = np.take_along_axis(x, order, axis=-1)
    pos = np.arange(n)
    first = np.ones(x.shape, dtype=bool)
    first[..., 1:] = xs[..., 1:] != xs[..., :-1]
    last = np.ones(x.shape, dtype=bool)
    last[..., :-1] = first[..., 1:]
    start = np.maximum.accumulate(np.where(first, pos, 0), axis=-1)
    end = np.flip(np.minimum.accumulate(np.flip(np.where(last, pos, n - 1), axis=-1), axis=-1), axis=-1)
    ranks = np.empty(x.shape)
    np.put_along_axis(ranks, order, (start + end) / 2.0 + 1.0, axis=-1)
    return ranks


def _corr(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def _check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson/spearman need two 1-d vectors of equal length")
    return x, y


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _check_pair(x, y)
    if x.size < 2:
        return math.nan
    return _corr(x, y)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _check_pair(x, y)
    if x.size < 2:
        return math.nan
    return _corr(rankdata(x), rankdata(y))


# --------------------------------------------------------------------------- factor report


@dataclass
class MetricReport:
    dates: list[date] = field(default_factory=list)
    ic: list[float] = field(default_factory=list)
    ric: list[float] = field(default_factory=list)
    mean_ic: float = math.nan
    mean_ric: float = math.nan
    icir: float = math.nan
    ricir: float = math.nan
    skipped_days: int = 0

    @property
    def empty(self) -> bool:
        return not self.dates

    def summary(self) -> dict[str, float]:
        return {"IC": self.mean_ic, "ICIR": self.icir, "RIC": self.mean_ric, "RICIR": self.ricir}

    def render(self) -> str:
        if self.empty:
            return f"no usable days (skipped {self.skipped_days})"
        lines = [f"{'metric':<8}{'value':>10}"]
        for name in ("RIC", "RICIR", "IC", "ICIR"):
            lines.append(f"{name:<8}{100 * self.summary()[name]:>10.2f}")
        lines.append(f"days used: {len(self.dates)}, skipped: {self.skipped_days}")
        return "\n".join(lines)

    def to_jsonl(self) -> str:
        rows = [{"metric": k, "value": v, "units": "fraction"} for k, v in self.summary().items()]
        rows.append({"metric": "days_used", "value": len(self.dates), "units": "days"})
        rows.append({"metric": "days_skipped", "value": self.skipped_days, "units": "days"})
        return "\n".join(json.dumps(r) for r in rows) + "\n"


def information_ratio(series: Sequence[float]) -> float:
    arr = np.asarray(series, dtype=float)
    if arr.size == 0:
        return math.nan
    sd = float(arr.std())
    return float(arr.mean()) / sd if sd > 0 else math.nan


def factor_report(
    signals: Mapping[date, Mapping[str, float]],
    labels,
) -> MetricReport:
    """Daily IC/RIC of ``signals[day][stock]`` against ``labels`` (a LabelMatrix).

    Days with fewer than three labeled stocks or a constant signal are
    skipped and counted.
    """
    report = MetricReport()
    stock_pos = {s: i for i, s in enumerate(labels.stocks)}
    day_pos = {d: i for i, d in enumerate(labels.days)}
    for day in sorted(signals):
        if day not in day_pos:
            continue
        sig = signals[day]
        row = labels.values[day_pos[day]]
        xs, ys = [], []
        for stock, value in sig.items():
            j = stock_pos.get(stock)
            if j is None or math.isnan(row[j]) or math.isnan(value):
                continue
            xs.append(value)
            ys.append(row[j])
        if len(xs) < MIN_CROSS_SECTION:
            report.skipped_days += 1
            continue
        x, y = np.array(xs), np.array(ys)
        ic, ric = pearson(x, y), spearman(x, y)
        if math.isnan(ic) or math.isnan(ric):
            report.skipped_days += 1
            continue
        report.dates.append(day)
        report.ic.append(ic)
        report.ric.append(ric)
    if report.dates:
        report.mean_ic = float(np.mean(report.ic))
        report.mean_ric = float(np.mean(report.ric))
        report.icir = information_ratio(report.ic)
        report.ricir = information_ratio(report.ric)
    return report


# --------------------------------------------------------------------------- performance


def annualized_return(periodic_returns: Iterable[float], periods_per_year: int = TRADING_DAYS) -> float:
    r = np.asarray(list(periodic_returns), dtype=float)
    if r.size == 0:
        return math.nan
    if np.any(r <= -1):
        raise ValueError("periodic returns must exceed -1")
    growth = float(np.prod(1.0 + r))
    return growth ** (periods_per_year / r.size) - 1.0


def max_drawdown(equity: Iterable[float]) -> float:
    v = np.asarray(list(equity), dtype=float)
    if v.size == 0:
        return 0.0
    if np.any(v <= 0):
        raise ValueError("equity values must be positive")
    peak = np.maximum.accumulate(v)
    return float(np.max(1.0 - v / peak))


def sharpe(
    periodic_returns: Iterable[float],
    risk_free_periodic: float = 0.0,
    periods_per_year: int = TRADING_DAYS,
) -> float:
    r = np.asarray(list(periodic_returns), dtype=float)
    if r.size < 2:
        return math.nan
    sd = float(r.std())
    if sd == 0.0:
        return math.nan
    return float(np.mean(r - risk_free_periodic)) / sd * math.sqrt(periods_per_year)
