"""
Market dataset loading, validation and forward-return labels.

A dataset lives in a directory of CSV files (see ``load_dataset``). Once
loaded it is immutable; all panels are dense ``[day, stock]`` numpy arrays
aligned to the trading calendar and the sorted stock universe, with NaN
standing in for missing cells.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigurationError, DataLoadError

logger = logging.getLogger(__name__)

MISSING_TOKEN = "NA"
TEXT_KINDS = ("news", "report")

PRICE_COLUMNS = ("open", "high", "low", "close", "volume", "value")
REQUIRED_FILES = ("prices", "features", "news", "macro", "index")


@dataclass(frozen=True)
class DatasetSchema:
    """Declared feature columns, macro indicators and their descriptions."""

    features: tuple[str, ...]
    macro_indicators: tuple[str, ...] = ()
    descriptions: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "DatasetSchema":
        # key = value lines; list values are comma separated
        features: list[str] = []
        macro: list[str] = []
        desc: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"schema line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key == "features":
                features = [v.strip() for v in value.split(",") if v.strip()]
            elif key in ("macro", "macro_indicators"):
                macro = [v.strip() for v in value.split(",") if v.strip()]
            elif key.startswith("describe."):
                desc[key[len("describe."):]] = value
            else:
                raise ConfigurationError(f"schema line {lineno}: unknown key {key!r}")
        if not features:
            raise ConfigurationError("schema declares no feature columns")
        if len(set(features)) != len(features):
            raise ConfigurationError("schema lists a feature column twice")
        return cls(tuple(features), tuple(macro), desc)

    @classmethod
    def from_file(cls, path: str | Path) -> "DatasetSchema":
        path = Path(path)
        if not path.exists():
            raise DataLoadError(f"schema file not found: {path}")
        return cls.parse(path.read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = [f"features = {', '.join(self.features)}"]
        if self.macro_indicators:
            lines.append(f"macro = {', '.join(self.macro_indicators)}")
        for name, text in self.descriptions.items():
            lines.append(f"describe.{name} = {text}")
        return "\n".join(lines) + "\n"

    def describe(self, columns: Iterable[str]) -> dict[str, str]:
        return {c: self.descriptions.get(c, c) for c in columns}


@dataclass(frozen=True)
class TradingCalendar:
    days: tuple[date, ...]

    def __post_init__(self) -> None:
        for prev, cur in zip(self.days, self.days[1:]):
            if cur <= prev:
                raise DataLoadError(
                    f"calendar is not strictly increasing at {prev.isoformat()} -> {cur.isoformat()}"
                )
        object.__setattr__(self, "_index", {d: i for i, d in enumerate(self.days)})

    def __len__(self) -> int:
        return len(self.days)

    def __iter__(self):
        return iter(self.days)

    def __contains__(self, day: object) -> bool:
        return day in self._index  # type: ignore[attr-defined]

    def index_of(self, day: date) -> int:
        try:
            return self._index[day]  # type: ignore[attr-defined]
        except KeyError:
            raise KeyError(f"{day} is not a trading day") from None

    def is_week_start(self, idx: int) -> bool:
        """True when day ``idx`` is the first trading day of its ISO week."""
        if idx == 0:
            return True
        return self.days[idx].isocalendar()[:2] != self.days[idx - 1].isocalendar()[:2]


@dataclass(frozen=True)
class TextItem:
    kind: str
    title: str
    summary: str


@dataclass(frozen=True)
class FeatureSubset:
    """Columns and text kinds one agent type is allowed to see."""

    columns: tuple[str, ...]
    text_kinds: tuple[str, ...] = ()

    @classmethod
    def everything(cls, schema: DatasetSchema) -> "FeatureSubset":
        return cls(schema.features, TEXT_KINDS)

    def validate(self, schema: DatasetSchema) -> None:
        unknown = [c for c in self.columns if c not in schema.features]
        if unknown:
            raise ConfigurationError(f"unknown feature column(s) in subset: {unknown}")
        bad_kinds = [k for k in self.text_kinds if k not in TEXT_KINDS]
        if bad_kinds:
            raise ConfigurationError(f"unknown text kind(s) in subset: {bad_kinds}")

    def ordered(self, schema: DatasetSchema) -> "FeatureSubset":
        cols = tuple(c for c in schema.features if c in self.columns)
        kinds = tuple(k for k in TEXT_KINDS if k in self.text_kinds)
        return FeatureSubset(cols, kinds)


@dataclass(frozen=True)
class FeatureView:
    stock: str
    date: date
    numerics: dict[str, float]
    texts: tuple[TextItem, ...]


@dataclass
class LoadReport:
    missing_cells: int = 0
    malformed_cells: int = 0
    skipped_rows: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def warn(self, msg: str) -> None:
        logger.warning(msg)
        self.warnings.append(msg)

    def skip(self, table: str, n: int = 1) -> None:
        self.skipped_rows[table] = self.skipped_rows.get(table, 0) + n

    def as_dict(self) -> dict:
        return {
            "missing_cells": self.missing_cells,
            "malformed_cells": self.malformed_cells,
            "skipped_rows": dict(self.skipped_rows),
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True, eq=False)
class MarketDataset:
    """Immutable multi-modal market data aligned on a calendar and universe.

    Price panels are ``[day, stock]`` float arrays; ``features`` is
    ``[day, stock, feature]`` in schema order. ``texts`` maps
    ``(day_idx, stock_idx)`` to the title/summary items of that day.
    """

    calendar: TradingCalendar
    stocks: tuple[str, ...]
    schema: DatasetSchema
    prices: Mapping[str, np.ndarray]
    limit_up: np.ndarray
    limit_down: np.ndarray
    features: np.ndarray
    texts: Mapping[tuple[int, int], tuple[TextItem, ...]]
    macro: pd.DataFrame
    benchmark: np.ndarray
    metadata: pd.DataFrame | None = None
    report: LoadReport = field(default_factory=LoadReport)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_stock_index", {s: i for i, s in enumerate(self.stocks)})
        arrays = [self.limit_up, self.limit_down, self.features, self.benchmark, *self.prices.values()]
        for arr in arrays:
            arr.setflags(write=False)

    @property
    def days(self) -> tuple[date, ...]:
        return self.calendar.days

    @property
    def has_ref_price(self) -> bool:
        return "ref_price" in self.prices

    def stock_index(self, stock: str) -> int:
        return self._stock_index[stock]  # type: ignore[attr-defined]

    def execution_prices(self, kind: str = "ref_price") -> np.ndarray:
        """Per-cell execution price; ref_price falls back to open where absent."""
        if kind == "open" or not self.has_ref_price:
            return self.prices["open"]
        if kind != "ref_price":
            raise ValueError(f"unknown execution price {kind!r}")
        ref = self.prices["ref_price"]
        return np.where(np.isnan(ref), self.prices["open"], ref)

    def feature_matrix(self, day_idx: int, columns: Sequence[str]) -> np.ndarray:
        """``[stock, len(columns)]`` slice of the numeric features for one day."""
        cols = [self.schema.features.index(c) for c in columns]
        return self.features[day_idx][:, cols]

    def macro_row(self, day: date) -> dict[str, float]:
        if self.macro.empty:
            return {}
        ts = pd.Timestamp(day)
        upto = self.macro.loc[:ts]
        if upto.empty:
            return {name: math.nan for name in self.macro.columns}
        return {name: float(v) for name, v in upto.iloc[-1].items()}

    def macro_narrative(self, day: date) -> str:
        row = self.macro_row(day)
        if not row:
            return "No macroeconomic data available."
        parts = []
        for name, value in row.items():
            shown = MISSING_TOKEN if math.isnan(value) else f"{value:g}"
            parts.append(f"The latest {name} is {shown}.")
        return " ".join(parts)


# --------------------------------------------------------------------------- loading


def _read_csv(root: Path, name: str, required: bool = True) -> pd.DataFrame | None:
    path = root / f"{name}.csv"
    if not path.exists():
        if required:
            raise DataLoadError(f"missing required file: {name}.csv ({path})")
        return None
    return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")


def _require_columns(df: pd.DataFrame, name: str, cols: Iterable[str]) -> None:
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise DataLoadError(f"{name}.csv lacks column(s): {missing}")


def _parse_dates(values: pd.Series, name: str) -> list[date]:
    try:
        parsed = pd.to_datetime(values, format="%Y-%m-%d")
    except (ValueError, TypeError) as exc:
        raise DataLoadError(f"{name}.csv has a malformed date: {exc}") from None
    return [ts.date() for ts in parsed]


def _to_float(text: str) -> float | None:
    try:
        value = float(text)
    except ValueError:
        return None
    return value


def _to_numeric(values: pd.Series, report: LoadReport) -> np.ndarray:
    # Python's float() round-trips repr() output exactly
    out = np.empty(len(values))
    for n, raw in enumerate(values):
        text = raw.strip()
        if text in ("", MISSING_TOKEN, "NaN", "nan"):
            out[n] = np.nan
            report.missing_cells += 1
            continue
        value = _to_float(text)
        if value is None:
            out[n] = np.nan
            report.missing_cells += 1
            report.malformed_cells += 1
        else:
            out[n] = value
    return out


def _check_calendar(dates: Iterable[date], calendar: TradingCalendar, name: str) -> None:
    off = sorted({d for d in dates if d not in calendar})
    if off:
        raise DataLoadError(f"{name}.csv references non-calendar date(s): {[d.isoformat() for d in off[:5]]}")


def load_dataset(root_path: str | Path, schema: DatasetSchema | str | Path | None = None) -> MarketDataset:
    """Load a dataset directory.

    Required files: ``prices.csv``, ``features.csv``, ``news.csv``,
    ``macro.csv``, ``index.csv``. ``stocks.csv`` (stock, industry,
    market_cap) is optional. When ``schema`` is None, ``schema.txt`` in the
    root is used.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DataLoadError(f"dataset root not found: {root}")
    if schema is None:
        schema = DatasetSchema.from_file(root / "schema.txt")
    elif not isinstance(schema, DatasetSchema):
        schema = DatasetSchema.from_file(schema)
    report = LoadReport()

    tables = {name: _read_csv(root, name) for name in REQUIRED_FILES}
    index_df = tables["index"]
    _require_columns(index_df, "index", ["date", "index_close"])
    cal_days = _parse_dates(index_df["date"], "index")
    if len(set(cal_days)) != len(cal_days):
        raise DataLoadError("index.csv has duplicate dates; calendar inconsistent")
    calendar = TradingCalendar(tuple(cal_days))
    benchmark = np.array(_to_numeric(index_df["index_close"], LoadReport()))

    prices_df = tables["prices"]
    _require_columns(prices_df, "prices", ["date", "stock", *PRICE_COLUMNS, "limit_up", "limit_down"])
    p_dates = _parse_dates(prices_df["date"], "prices")
    _check_calendar(p_dates, calendar, "prices")
    stocks = tuple(sorted(set(prices_df["stock"])))
    s_index = {s: i for i, s in enumerate(stocks)}
    T, S = len(calendar), len(stocks)
    rows = np.array([calendar.index_of(d) for d in p_dates], dtype=int)
    cols = np.array([s_index[s] for s in prices_df["stock"]], dtype=int)
    if len(set(zip(rows.tolist(), cols.tolist()))) != len(rows):
        raise DataLoadError("prices.csv has duplicate (date, stock) rows")

    price_cols = list(PRICE_COLUMNS) + (["ref_price"] if "ref_price" in prices_df.columns else [])
    prices: dict[str, np.ndarray] = {}
    for col in price_cols:
        panel = np.full((T, S), np.nan)
        panel[rows, cols] = _to_numeric(prices_df[col], report)
        prices[col] = panel
    limit_up = np.zeros((T, S), dtype=bool)
    limit_down = np.zeros((T, S), dtype=bool)
    limit_up[rows, cols] = prices_df["limit_up"].str.strip().isin(["1", "true", "True"]).to_numpy()
    limit_down[rows, cols] = prices_df["limit_down"].str.strip().isin(["1", "true", "True"]).to_numpy()
    both = int((limit_up & limit_down).sum())
    if both:
        report.warn(f"{both} stock-day(s) flagged both limit-up and limit-down; treated as untradeable")
    o, h, l, c = (prices[k] for k in ("open", "high", "low", "close"))
    with np.errstate(invalid="ignore"):
        bad = (l > np.minimum(o, c)) | (np.maximum(o, c) > h)
    if bad.any():
        report.warn(f"{int(bad.sum())} stock-day(s) violate low <= open/close <= high")

    feats_df = tables["features"]
    _require_columns(feats_df, "features", ["date", "stock", *schema.features])
    extra = [c for c in feats_df.columns if c not in ("date", "stock", *schema.features)]
    if extra:
        report.warn(f"features.csv has undeclared column(s) ignored: {extra}")
    known = feats_df["stock"].isin(s_index)
    if (~known).any():
        report.skip("features", int((~known).sum()))
        report.warn(f"features.csv: skipped {int((~known).sum())} row(s) with unknown stock")
        feats_df = feats_df[known]
    f_dates = _parse_dates(feats_df["date"], "features")
    _check_calendar(f_dates, calendar, "features")
    features = np.full((T, S, len(schema.features)), np.nan)
    if len(feats_df):
        fr = np.array([calendar.index_of(d) for d in f_dates], dtype=int)
        fc = np.array([s_index[s] for s in feats_df["stock"]], dtype=int)
        for k, name in enumerate(schema.features):
            features[fr, fc, k] = _to_numeric(feats_df[name], report)

    news_df = tables["news"]
    _require_columns(news_df, "news", ["date", "stock", "kind", "title", "summary"])
    texts: dict[tuple[int, int], list[TextItem]] = {}
    n_dates = _parse_dates(news_df["date"], "news") if len(news_df) else []
    _check_calendar(n_dates, calendar, "news")
    skipped_news = 0
    for d, rec in zip(n_dates, news_df.itertuples(index=False)):
        if rec.stock not in s_index or rec.kind not in TEXT_KINDS:
            skipped_news += 1
            continue
        key = (calendar.index_of(d), s_index[rec.stock])
        texts.setdefault(key, []).append(TextItem(rec.kind, rec.title, rec.summary))
    if skipped_news:
        report.skip("news", skipped_news)
        report.warn(f"news.csv: skipped {skipped_news} row(s) with unknown stock or kind")

    macro_df = tables["macro"]
    _require_columns(macro_df, "macro", ["date", "indicator", "value"])
    macro = _build_macro(macro_df, schema, calendar, report)

    meta_df = _read_csv(root, "stocks", required=False)
    metadata = None
    if meta_df is not None:
        _require_columns(meta_df, "stocks", ["stock"])
        meta_df = meta_df[meta_df["stock"].isin(s_index)].set_index("stock")
        if "market_cap" in meta_df.columns:
            meta_df["market_cap"] = pd.to_numeric(meta_df["market_cap"], errors="coerce")
        metadata = meta_df

    return MarketDataset(
        calendar=calendar,
        stocks=stocks,
        schema=schema,
        prices=prices,
        limit_up=limit_up,
        limit_down=limit_down,
        features=features,
        texts={k: tuple(v) for k, v in texts.items()},
        macro=macro,
        benchmark=benchmark,
        metadata=metadata,
        report=report,
    )


def _build_macro(df: pd.DataFrame, schema: DatasetSchema, calendar: TradingCalendar, report: LoadReport) -> pd.DataFrame:
    names = list(schema.macro_indicators) or sorted(set(df["indicator"]))
    index = pd.DatetimeIndex([pd.Timestamp(d) for d in calendar.days])
    if df.empty:
        return pd.DataFrame(index=index, columns=names, dtype=float)
    unknown = ~df["indicator"].isin(names)
    if unknown.any():
        report.skip("macro", int(unknown.sum()))
        report.warn(f"macro.csv: skipped {int(unknown.sum())} row(s) with undeclared indicator")
        df = df[~unknown]
    m_dates = _parse_dates(df["date"], "macro")
    _check_calendar(m_dates, calendar, "macro")
    values = _to_numeric(df["value"], LoadReport())
    long = pd.DataFrame({"date": pd.to_datetime(m_dates), "indicator": df["indicator"].to_numpy(), "value": values})
    wide = long.pivot_table(index="date", columns="indicator", values="value", aggfunc="last")
    # no staleness limit: monthly series carry forward indefinitely
    return wide.reindex(index=index, columns=names).ffill()


def write_dataset(dataset: MarketDataset, root: str | Path) -> Path:
    """Serialize a dataset to the directory format ``load_dataset`` reads.

    Floats are written with ``repr`` so a reload is bit-exact.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "schema.txt").write_text(dataset.schema.to_text(), encoding="utf-8")
    days = [d.isoformat() for d in dataset.days]

    def fmt(x: float) -> str:
        return "" if math.isnan(x) else repr(float(x))

    price_cols = list(PRICE_COLUMNS) + (["ref_price"] if dataset.has_ref_price else [])
    present = ~np.all(np.isnan(np.stack([dataset.prices[c] for c in price_cols])), axis=0)
    rows = []
    for t, s in zip(*np.nonzero(present)):
        rec = [days[t], dataset.stocks[s]]
        rec += [fmt(dataset.prices[c][t, s]) for c in price_cols]
        rec += [str(int(dataset.limit_up[t, s])), str(int(dataset.limit_down[t, s]))]
        rows.append(rec)
    _write_rows(root / "prices.csv", ["date", "stock", *price_cols, "limit_up", "limit_down"], rows)

    f_present = ~np.all(np.isnan(dataset.features), axis=2)
    rows = [
        [days[t], dataset.stocks[s], *(fmt(v) for v in dataset.features[t, s])]
        for t, s in zip(*np.nonzero(f_present))
    ]
    _write_rows(root / "features.csv", ["date", "stock", *dataset.schema.features], rows)

    rows = [
        [days[t], dataset.stocks[s], item.kind, item.title, item.summary]
        for (t, s), items in sorted(dataset.texts.items())
        for item in items
    ]
    _write_rows(root / "news.csv", ["date", "stock", "kind", "title", "summary"], rows)

    rows = []
    prev: dict[str, float] = {}
    for ts, rec in dataset.macro.iterrows():
        for name, value in rec.items():
            if math.isnan(value) or prev.get(name) == value:
                continue
            prev[name] = value
            rows.append([ts.date().isoformat(), name, repr(float(value))])
    _write_rows(root / "macro.csv", ["date", "indicator", "value"], rows)

    _write_rows(root / "index.csv", ["date", "index_close"], [[d, fmt(v)] for d, v in zip(days, dataset.benchmark)])
    if dataset.metadata is not None:
        meta = dataset.metadata.reset_index()
        meta.to_csv(root / "stocks.csv", index=False)
    return root


def _write_rows(path: Path, header: list[str], rows: list[list[str]]) -> None:
    import csv

    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# --------------------------------------------------------------------------- views


def visible_features(dataset: MarketDataset, subset: FeatureSubset, stock: str, day: date) -> FeatureView:
    t = dataset.calendar.index_of(day)
    s = dataset.stock_index(stock)
    ordered = subset.ordered(dataset.schema)
    row = dataset.feature_matrix(t, ordered.columns)[s]
    numerics = {c: float(v) for c, v in zip(ordered.columns, row)}
    texts = tuple(item for item in dataset.texts.get((t, s), ()) if item.kind in ordered.text_kinds)
    return FeatureView(stock, day, numerics, texts)


# --------------------------------------------------------------------------- labels


@dataclass(frozen=True, eq=False)
class LabelMatrix:
    """Forward returns per (day, stock); NaN marks an absent label.

    The label of day ``t`` becomes usable once day ``t + 1`` has ended, so
    at the end of day ``j`` the newest usable label is day ``j - 1``.
    """

    days: tuple[date, ...]
    stocks: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values.setflags(write=False)

    @staticmethod
    def available_through(day_idx: int) -> int:
        return day_idx - 1

    def is_available(self, label_idx: int, at_idx: int) -> bool:
        return label_idx <= self.available_through(at_idx)

    def get(self, stock: str, day: date) -> float | None:
        t = self.days.index(day)
        v = self.values[t, self.stocks.index(stock)]
        return None if math.isnan(v) else float(v)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=pd.Index(self.days, name="date"), columns=list(self.stocks))


def compute_labels(dataset: MarketDataset) -> LabelMatrix:
    """``Y[t, s] = p(t + 2) / p(t + 1) - 1`` at the execution price.

    The execution price is the first-fifteen-minute reference price, or the
    open where no reference price is recorded. Stocks missing either end get
    no label.
    """
    T, S = len(dataset.calendar), len(dataset.stocks)
    values = np.full((T, S), np.nan)
    if T < 3:
        logger.warning("fewer than 3 calendar days; label matrix is empty")
        return LabelMatrix(dataset.days, dataset.stocks, values)
    px = dataset.execution_prices("ref_price")
    with np.errstate(invalid="ignore", divide="ignore"):
        values[: T - 2] = px[2:] / px[1:-1] - 1.0
    values[~np.isfinite(values)] = np.nan
    return LabelMatrix(dataset.days, dataset.stocks, values)
