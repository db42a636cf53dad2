"""Synthetic markets with planted, regime-dependent return predictability.

Each stock-day gets standard-normal feature values. Next-day execution
returns load on a chosen set of features, with loadings that may switch at
regime boundaries, so an agent that reads the "right" feature has a known
edge. Used by the test suite, the acceptance reproductions, and as a demo
dataset (``python -m mass_engine.synthetic OUT_DIR``).
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .dataset import DatasetSchema, LoadReport, MarketDataset, TextItem, TradingCalendar, write_dataset


@dataclass(frozen=True)
class Regime:
    start_day: int
    loadings: Mapping[str, float]


@dataclass(frozen=True)
class SyntheticSpec:
    n_stocks: int = 40
    n_days: int = 30
    features: Sequence[str] = ("alpha", "beta", "noise1", "noise2")
    regimes: Sequence[Regime] = field(default_factory=lambda: (Regime(0, {"alpha": 1.0}),))
    signal_strength: float = 0.3
    daily_vol: float = 0.02
    limit_prob: float = 0.0
    n_industries: int = 4
    news_prob: float = 0.0
    start: date = date(2023, 1, 2)
    seed: int = 0


def business_days(start: date, n: int) -> list[date]:
    days: list[date] = []
    d = start
    while len(days) < n:
        if d.weekday() < 5:
            days.append(d)
        d += timedelta(days=1)
    return days


def loadings_for_day(spec: SyntheticSpec, t: int) -> Mapping[str, float]:
    current = spec.regimes[0].loadings
    for regime in spec.regimes:
        if regime.start_day <= t:
            current = regime.loadings
    return current


def make_market(spec: SyntheticSpec | None = None, **overrides) -> MarketDataset:
    spec = spec or SyntheticSpec()
    if overrides:
        spec = SyntheticSpec(**{**spec.__dict__, **overrides})
    rng = np.random.default_rng(spec.seed)
    T, S, F = spec.n_days, spec.n_stocks, len(spec.features)
    days = business_days(spec.start, T)
    stocks = tuple(f"{600000 + s:06d}" for s in range(S))

    feats = rng.standard_normal((T, S, F))
    # r[t] is the return from the day t+1 execution to the day t+2 execution
    r = np.zeros((T, S))
    for t in range(T):
        load = loadings_for_day(spec, t)
        beta = np.array([load.get(name, 0.0) for name in spec.features])
        norm = np.linalg.norm(beta)
        z = feats[t] @ beta / norm if norm > 0 else np.zeros(S)
        eps = rng.standard_normal(S)
        s2 = spec.signal_strength
        r[t] = spec.daily_vol * (s2 * z + np.sqrt(1 - s2 * s2) * eps)
    ref = np.empty((T, S))
    ref[0] = rng.uniform(10, 100, S)
    if T > 1:
        ref[1] = ref[0] * (1 + spec.daily_vol * rng.standard_normal(S))
    for t in range(T - 2):
        ref[t + 2] = ref[t + 1] * (1 + r[t])

    open_ = ref * (1 + 0.002 * rng.standard_normal((T, S)))
    close = ref * (1 + 0.01 * rng.standard_normal((T, S)))
    hi = np.maximum(np.maximum(open_, close), ref) * (1 + 0.005 * np.abs(rng.standard_normal((T, S))))
    lo = np.minimum(np.minimum(open_, close), ref) * (1 - 0.005 * np.abs(rng.standard_normal((T, S))))
    volume = rng.integers(10_000, 1_000_000, (T, S)).astype(float)
    value = volume * close

    flagged = rng.random((T, S)) < spec.limit_prob
    up = rng.random((T, S)) < 0.5
    limit_up = flagged & up
    limit_down = flagged & ~up

    texts: dict[tuple[int, int], tuple[TextItem, ...]] = {}
    if spec.news_prob > 0:
        hits = rng.random((T, S)) < spec.news_prob
        for t, s in zip(*np.nonzero(hits)):
            kind = "news" if rng.random() < 0.7 else "report"
            texts[(int(t), int(s))] = (TextItem(kind, f"{stocks[s]} update {days[t].isoformat()}", "Synthetic summary."),)

    macro_names = ("lpr_1y", "cpi_yoy", "bond_10y")
    macro_vals = np.empty((T, 3))
    lpr, cpi, bond = 3.65, 0.5, 2.9
    for t, d in enumerate(days):
        if t == 0 or d.month != days[t - 1].month:
            cpi = round(cpi + 0.2 * rng.standard_normal(), 1)
            lpr = round(lpr - 0.05 * (rng.random() < 0.2), 2)
        bond = round(bond + 0.01 * rng.standard_normal(), 4)
        macro_vals[t] = (lpr, cpi, bond)
    macro = pd.DataFrame(macro_vals, index=pd.DatetimeIndex([pd.Timestamp(d) for d in days]), columns=list(macro_names))

    benchmark = 3000.0 * np.concatenate([[1.0], np.cumprod(1 + np.nanmean(ref[1:] / ref[:-1] - 1, axis=1))])

    metadata = pd.DataFrame(
        {
            "industry": [f"ind{s % spec.n_industries}" for s in range(S)],
            "market_cap": np.round(np.exp(rng.normal(23, 1, S)), 2),
        },
        index=pd.Index(stocks, name="stock"),
    )
    schema = DatasetSchema(
        tuple(spec.features),
        macro_names,
        {name: f"Synthetic feature {name}." for name in spec.features},
    )
    return MarketDataset(
        calendar=TradingCalendar(tuple(days)),
        stocks=stocks,
        schema=schema,
        prices={"open": open_, "high": hi, "low": lo, "close": close, "volume": volume, "value": value, "ref_price": ref},
        limit_up=limit_up,
        limit_down=limit_down,
        features=feats,
        texts=texts,
        macro=macro,
        benchmark=benchmark,
        metadata=metadata,
        report=LoadReport(),
    )


def main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description="Write a synthetic dataset directory.")
    ap.add_argument("out")
    ap.add_argument("--stocks", type=int, default=40)
    ap.add_argument("--days", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--limit-prob", type=float, default=0.0)
    args = ap.parse_args(argv)
    ds = make_market(n_stocks=args.stocks, n_days=args.days, seed=args.seed, limit_prob=args.limit_prob, news_prob=0.05)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.stocks)} stocks x {len(ds.days)} days to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
