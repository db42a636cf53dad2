"""Index-enhancement backtest over daily signals.

Long-only, fully invested, equal-weighted top fraction of the ranked
universe. A signal dated ``t`` is traded at day ``t+1``'s execution price
(the same price the return labels use). Limit-flagged stocks are excluded
from the ranking on a rebalance day; flagged stocks already held cannot be
sold and are carried as they are.

Equity is marked before trading each day, so ``equity[0] == 1.0`` and
the cost of a rebalance shows up in the next day's mark.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .aggregation import default_top_k
from .dataset import MarketDataset
from .errors import ContractViolation
from .metrics import annualized_return, max_drawdown, sharpe

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BacktestConfig:
    rebalance: str = "weekly"
    top_fraction: float = 0.2
    round_trip_cost: float = 0.001
    execution_price: str = "ref_price"
    risk_free: float = 0.0

    def __post_init__(self) -> None:
        if self.rebalance not in ("weekly", "daily"):
            raise ValueError("rebalance must be 'weekly' or 'daily'")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError("top_fraction must lie in (0, 1]")
        if self.round_trip_cost < 0:
            raise ValueError("round_trip_cost must be non-negative")
        if self.execution_price not in ("ref_price", "open"):
            raise ValueError("execution_price must be 'ref_price' or 'open'")


@dataclass(frozen=True)
class Trade:
    date: date
    stock: str
    action: str
    weight_change: float
    cost: float

    def as_dict(self) -> dict:
        return {"date": self.date.isoformat(), "stock": self.stock, "action": self.action,
                "weight_change": self.weight_change, "cost": self.cost}


@dataclass
class BacktestResult:
    dates: list[date]
    equity: np.ndarray
    benchmark: np.ndarray
    excess: np.ndarray
    post_trade_equity: np.ndarray
    trades: list[Trade] = field(default_factory=list)
    holdings: dict[date, dict[str, float]] = field(default_factory=dict)
    skipped_rebalances: list[date] = field(default_factory=list)
    summary: dict[str, float] = field(default_factory=dict)

    def render(self) -> str:
        lines = [f"{'metric':<12}{'value':>10}"]
        for name in ("AR", "Sharpe", "MDD", "ExcessAR"):
            v = self.summary.get(name, math.nan)
            shown = v if name == "Sharpe" else 100 * v
            lines.append(f"{name:<12}{shown:>10.2f}")
        lines.append(f"days: {len(self.dates)}, trades: {len(self.trades)}")
        return "\n".join(lines)


def excess_curve(equity: Sequence[float], benchmark: Sequence[float]) -> np.ndarray:
    """Portfolio equity over benchmark, normalized to 1.0 at the start.

    Accepts arrays of equal length or pandas Series, whose indexes must match.
    """
    if isinstance(equity, pd.Series) and isinstance(benchmark, pd.Series):
        if not equity.index.equals(benchmark.index):
            raise ContractViolation("equity and benchmark dates are not aligned")
    e = np.asarray(equity, dtype=float)
    b = np.asarray(benchmark, dtype=float)
    if e.shape != b.shape:
        raise ContractViolation(f"equity has {e.size} points, benchmark {b.size}")
    if e.size == 0:
        return e
    if np.any(b <= 0) or np.any(np.isnan(b)):
        raise ContractViolation("benchmark must be positive")
    ratio = e / b
    return ratio / ratio[0]


def _rebalance_days(dataset: MarketDataset, idx: Sequence[int], mode: str) -> set[int]:
    if mode == "daily":
        return set(idx)
    out = {idx[0]} if idx else set()
    out.update(t for t in idx if dataset.calendar.is_week_start(t))
    return out


def run_backtest(
    signals: Mapping[date, Mapping[str, float]],
    dataset: MarketDataset,
    cfg: BacktestConfig = BacktestConfig(),
    benchmark: Sequence[float] | None = None,
) -> BacktestResult:
    """Simulate trading on ``signals`` (``{date: {stock: value}}``).

    The backtest runs from the day after the first signal date to the day
    after the last one (or the calendar end). ``benchmark`` defaults to the
    dataset's index close and must cover the whole calendar.
    """
    if not signals:
        raise ContractViolation("no signals to backtest")
    cal = dataset.calendar
    sig_idx = sorted(cal.index_of(d) for d in signals)
    first = sig_idx[0] + 1
    last = min(sig_idx[-1] + 1, len(cal.days) - 1)
    if first > last:
        raise ContractViolation("signals end on the last calendar day; nothing to trade")
    days = list(range(first, last + 1))
    bench = np.asarray(dataset.benchmark if benchmark is None else benchmark, dtype=float)
    if bench.size != len(cal.days):
        raise ContractViolation(f"benchmark has {bench.size} points for {len(cal.days)} calendar days")

    price = dataset.execution_prices(cfg.execution_price)
    flagged = dataset.limit_up | dataset.limit_down
    stocks = dataset.stocks
    S = len(stocks)
    by_day = {cal.index_of(d): v for d, v in signals.items()}
    rebalance = _rebalance_days(dataset, days, cfg.rebalance)
    half = cfg.round_trip_cost / 2.0

    value = np.zeros(S)  # marked holding values
    cash = 1.0  # only before the first rebalance
    last_price = np.full(S, np.nan)
    equity, post, trades = [], [], []
    holdings: dict[date, dict[str, float]] = {}
    skipped: list[date] = []

    for t in days:
        p = price[t]
        ok = ~np.isnan(p)
        # mark to market; untradeable (no price) holdings keep their last mark
        with np.errstate(invalid="ignore", divide="ignore"):
            growth = np.where(ok & ~np.isnan(last_price), p / last_price, 1.0)
        value = value * growth
        last_price = np.where(ok, p, last_price)
        e_pre = cash + float(value.sum())
        equity.append(e_pre)
        e_post = e_pre

        day = cal.days[t]
        sig = by_day.get(t - 1)
        if t in rebalance:
            if sig is None:
                logger.warning("no signal for %s; holding previous portfolio", cal.days[t - 1])
                skipped.append(day)
            else:
                eligible = [j for j in range(S) if ok[j] and not flagged[t, j] and stocks[j] in sig and not math.isnan(sig[stocks[j]])]
                if not eligible:
                    logger.warning("no tradable stocks on %s; holding previous portfolio", day)
                    skipped.append(day)
                else:
                    locked = np.zeros(S, dtype=bool)
                    locked[(value > 0) & (flagged[t] | ~ok)] = True
                    k = min(len(eligible), default_top_k(int(ok.sum()), cfg.top_fraction))
                    ranked = sorted(eligible, key=lambda j: (-sig[stocks[j]], stocks[j]))
                    chosen = [j for j in ranked if not locked[j]][:k]
                    free = e_pre - float(value[locked].sum())
                    target = np.where(locked, value, 0.0)
                    if chosen:
                        target[chosen] = free / len(chosen)
                    else:  # everything left is locked; keep cash out of the picture
                        target = value.copy()
                    delta = target - value
                    delta[locked] = 0.0
                    traded = np.flatnonzero(np.abs(delta) > 1e-15 * max(e_pre, 1.0))
                    cost = half * float(np.abs(delta[traded]).sum())
                    e_post = e_pre - cost
                    for j in traded:
                        c = half * abs(float(delta[j]))
                        trades.append(Trade(day, stocks[j], "buy" if delta[j] > 0 else "sell", float(delta[j]) / e_pre, c))
                    # costs come out pro rata across the new book
                    value = target * (e_post / e_pre)
                    cash = 0.0
                    held = np.flatnonzero(value > 0)
                    holdings[day] = {stocks[j]: float(value[j] / value.sum()) for j in held}
        post.append(e_post)

    dates = [cal.days[t] for t in days]
    eq = np.array(equity)
    b = bench[days] / bench[days[0]]
    ex = excess_curve(eq, b)
    result = BacktestResult(dates, eq, b, ex, np.array(post), trades, holdings, skipped)
    result.summary = summarize(eq, ex, cfg.risk_free)
    return result


def summarize(equity: np.ndarray, excess: np.ndarray, risk_free: float = 0.0) -> dict[str, float]:
    r = equity[1:] / equity[:-1] - 1.0
    xr = excess[1:] / excess[:-1] - 1.0
    return {
        "AR": annualized_return(r),
        "Sharpe": sharpe(r, risk_free),
        "MDD": max_drawdown(equity),
        "ExcessAR": annualized_return(xr),
    }


def write_curves(result: BacktestResult, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "equity", "benchmark", "excess"])
        for d, e, b, x in zip(result.dates, result.equity, result.benchmark, result.excess):
            w.writerow([d.isoformat(), repr(float(e)), repr(float(b)), repr(float(x))])


def write_trades(result: BacktestResult, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for tr in result.trades:
            fh.write(json.dumps(tr.as_dict()) + "\n")
