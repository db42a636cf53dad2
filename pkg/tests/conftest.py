from __future__ import annotations

from datetime import date

import numpy as np
import pandas as pd
import pytest

from mass_engine.dataset import DatasetSchema, LoadReport, MarketDataset, TradingCalendar
from mass_engine.synthetic import business_days, make_market


def price_dataset(prices, stocks=None, limit_up=None, limit_down=None, benchmark=None, start=date(2024, 1, 1)) -> MarketDataset:
    """Dataset whose execution (ref) price panel is ``prices``; other fields filler."""
    px = np.asarray(prices, dtype=float)
    if px.ndim == 1:
        px = px[:, None]
    T, S = px.shape
    stocks = tuple(stocks or (f"{i:06d}" for i in range(S)))
    days = business_days(start, T)
    zeros = np.zeros((T, S), dtype=bool)
    return MarketDataset(
        calendar=TradingCalendar(tuple(days)),
        stocks=stocks,
        schema=DatasetSchema(("f",), (), {"f": "filler"}),
        prices={"open": px.copy(), "high": px.copy(), "low": px.copy(), "close": px.copy(),
                "volume": np.ones((T, S)), "value": np.ones((T, S)), "ref_price": px.copy()},
        limit_up=zeros.copy() if limit_up is None else np.asarray(limit_up, dtype=bool),
        limit_down=zeros.copy() if limit_down is None else np.asarray(limit_down, dtype=bool),
        features=np.zeros((T, S, 1)),
        texts={},
        macro=pd.DataFrame(index=pd.DatetimeIndex([pd.Timestamp(d) for d in days])),
        benchmark=np.full(T, 100.0) if benchmark is None else np.asarray(benchmark, dtype=float),
        report=LoadReport(),
    )


@pytest.fixture
def small_market():
    return make_market(n_stocks=30, n_days=20, seed=7, news_prob=0.05)
