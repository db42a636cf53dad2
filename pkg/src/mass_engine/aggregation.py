"""Consensus / disagreement aggregation of agent decisions into stock signals."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation

logger = logging.getLogger(__name__)


class TypeDistribution:
    """A point on the probability simplex over agent types.

    Weights are renormalized on construction; negative entries are rejected.
    """

    __slots__ = ("weights",)

    def __init__(self, weights: Iterable[float]):
        w = np.array(list(weights) if not isinstance(weights, np.ndarray) else weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("distribution needs a non-empty 1-d weight vector")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValueError("distribution weights must be finite and non-negative")
        total = w.sum()
        if total <= 0:
            raise ValueError("distribution weights sum to zero")
        w = w / total
        w.setflags(write=False)
        self.weights = w

    @classmethod
    def uniform(cls, n: int) -> "TypeDistribution":
        return cls(np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return self.weights.size

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TypeDistribution) and np.array_equal(self.weights, other.weights)

    def __repr__(self) -> str:
        return f"TypeDistribution({np.array2string(self.weights, precision=4)})"

    def tolist(self) -> list[float]:
        return [float(x) for x in self.weights]


def signal_components(V: np.ndarray, d: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weighted mean, weighted population std and the combined signal per column."""
    m = d @ V
    sigma = np.sqrt(d @ (V - m) ** 2)
    return m, sigma, alpha * m - (1.0 - alpha) * sigma


@dataclass(frozen=True, eq=False)
class DailySignal:
    date: date
    stocks: tuple[str, ...]
    m: np.ndarray
    sigma: np.ndarray
    signal: np.ndarray
    alpha: float

    def as_dict(self) -> dict[str, float]:
        return {s: float(v) for s, v in zip(self.stocks, self.signal)}

    def records(self) -> list[tuple[str, float, float, float]]:
        return [(s, float(a), float(b), float(c)) for s, a, b, c in zip(self.stocks, self.m, self.sigma, self.signal)]


def aggregate(V, d: TypeDistribution, alpha: float, stocks: Sequence[str] | None = None, day: date | None = None) -> DailySignal:
    """Combine a decision matrix with a type distribution into a daily signal.

    ``V`` is either a ``DecisionMatrix`` or a raw ``[n_type, n_stock]`` array
    (then ``stocks`` and ``day`` name its columns and date).
    """
    if hasattr(V, "values") and hasattr(V, "stocks"):
        stocks = V.stocks
        day = V.date if day is None else day
        values = V.values
    else:
        values = np.asarray(V, dtype=float)
        if stocks is None:
            stocks = tuple(str(i) for i in range(values.shape[1]))
    if values.ndim != 2 or values.shape[0] != len(d):
        raise ContractViolation(f"decision matrix has {values.shape[0]} rows but distribution has {len(d)} types")
    if len(stocks) != values.shape[1]:
        raise ContractViolation("stock labels do not match decision matrix columns")
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"alpha must lie in [0, 1], got {alpha}")
    m, sigma, sig = signal_components(values, d.weights, alpha)
    return DailySignal(day, tuple(stocks), m, sigma, sig, alpha)


def rank_stocks(signal: DailySignal | dict[str, float]) -> list[str]:
    """Descending by signal; ties broken by ascending stock id."""
    items = signal.as_dict() if isinstance(signal, DailySignal) else signal
    return sorted(items, key=lambda s: (-items[s], s))


@dataclass(frozen=True)
class Portfolio:
    stocks: tuple[str, ...]
    weights: tuple[float, ...]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.stocks, self.weights))


def default_top_k(n_universe: int, fraction: float = 0.2) -> int:
    return max(1, int(math.floor(fraction * n_universe + 0.5)))


def top_k_portfolio(ranked: Sequence[str], k: int) -> Portfolio:
    if k < 1:
        raise ContractViolation("k must be at least 1")
    if k > len(ranked):
        logger.warning("top-k of %d requested from %d stocks; clamping", k, len(ranked))
        k = len(ranked)
    if k == 0:
        return Portfolio((), ())
    return Portfolio(tuple(ranked[:k]), tuple([1.0 / k] * k))


# --------------------------------------------------------------------------- export

SIGNAL_COLUMNS = ("date", "stock", "m", "sigma", "signal")


def write_signals(signals: Iterable[DailySignal], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SIGNAL_COLUMNS)
        for sig in signals:
            for stock, m, s, v in sig.records():
                writer.writerow([sig.date.isoformat(), stock, repr(m), repr(s), repr(v)])


def read_signals(path: str | Path) -> dict[date, dict[str, float]]:
    out: dict[date, dict[str, float]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SIGNAL_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ContractViolation(f"signal file lacks column(s): {missing}")
        for row in reader:
            day = date.fromisoformat(row["date"])
            out.setdefault(day, {})[row["stock"]] = float(row["signal"])
    return out
