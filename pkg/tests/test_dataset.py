import math
from datetime import date

import numpy as np
import pytest

from conftest import price_dataset
from mass_engine.dataset import (
    DatasetSchema,
    FeatureSubset,
    LabelMatrix,
    TradingCalendar,
    compute_labels,
    load_dataset,
    visible_features,
    write_dataset,
)
from mass_engine.errors import ConfigurationError, DataLoadError
from mass_engine.synthetic import make_market

DAYS = ["2024-01-02", "2024-01-03", "2024-01-04"]


def write_minimal(root, malformed=False, extra_feature_stock=False, skip=()):
    root.mkdir(exist_ok=True)
    files = {
        "schema.txt": "features = E/P, B/P\nmacro = cpi\ndescribe.E/P = earnings yield\n",
        "index.csv": "date,index_close\n" + "".join(f"{d},{3000 + i}\n" for i, d in enumerate(DAYS)),
        "prices.csv": "date,stock,open,high,low,close,volume,value,limit_up,limit_down\n"
        + "".join(f"{d},{s},10,11,9,10.5,100,1000,0,0\n" for d in DAYS for s in ("000001", "600000")),
        "features.csv": "date,stock,E/P,B/P\n"
        + "".join(f"{d},{s},{'abc' if malformed and i == 0 and s == '000001' else 0.05},0.3\n" for i, d in enumerate(DAYS) for s in ("000001", "600000"))
        + ("2024-01-02,999999,0.1,0.1\n" if extra_feature_stock else ""),
        "news.csv": "date,stock,kind,title,summary\n2024-01-03,000001,news,Title A,Sum A\n2024-01-03,000001,report,Title B,Sum B\n",
        "macro.csv": "date,indicator,value\n2024-01-02,cpi,0.5\n",
    }
    for name, text in files.items():
        if name.split(".")[0] not in skip:
            (root / name).write_text(text, encoding="utf-8")
    return root


def test_minimal_complete(tmp_path):
    ds = load_dataset(write_minimal(tmp_path / "d"))
    assert len(ds.days) == 3 and ds.stocks == ("000001", "600000")
    assert ds.report.missing_cells == 0
    # macro forward-fills
    assert ds.macro_row(date(2024, 1, 4)) == {"cpi": 0.5}
    assert ds.macro_narrative(date(2024, 1, 4)) == "The latest cpi is 0.5."
    # ref_price absent: labels use open prices
    assert not ds.has_ref_price


def test_missing_prices_file(tmp_path):
    with pytest.raises(DataLoadError, match="prices"):
        load_dataset(write_minimal(tmp_path / "d", skip=("prices",)))


def test_malformed_cell_is_missing_not_dropped(tmp_path):
    ds = load_dataset(write_minimal(tmp_path / "d", malformed=True))
    assert ds.report.missing_cells == 1
    assert ds.report.malformed_cells == 1
    assert math.isnan(ds.features[0, 0, 0])
    assert ds.features[0, 0, 1] == 0.3


def test_unknown_feature_stock_skipped(tmp_path):
    ds = load_dataset(write_minimal(tmp_path / "d", extra_feature_stock=True))
    assert ds.report.skipped_rows == {"features": 1}


def test_non_calendar_date_is_fatal(tmp_path):
    root = write_minimal(tmp_path / "d")
    with (root / "news.csv").open("a") as fh:
        fh.write("2024-01-06,000001,news,t,s\n")
    with pytest.raises(DataLoadError, match="non-calendar"):
        load_dataset(root)


def test_calendar_must_increase():
    with pytest.raises(DataLoadError):
        TradingCalendar((date(2024, 1, 3), date(2024, 1, 2)))


def test_schema_parse_errors():
    with pytest.raises(ConfigurationError):
        DatasetSchema.parse("macro = cpi\n")
    with pytest.raises(ConfigurationError):
        DatasetSchema.parse("features = a\nbogus = 1\n")


def test_round_trip_bit_exact(tmp_path):
    ds = make_market(n_stocks=12, n_days=8, seed=3, news_prob=0.2, limit_prob=0.1)
    back = load_dataset(write_dataset(ds, tmp_path / "rt"))
    assert back.days == ds.days and back.stocks == ds.stocks
    for name, panel in ds.prices.items():
        np.testing.assert_array_equal(back.prices[name], panel)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.benchmark, ds.benchmark)
    np.testing.assert_array_equal(back.limit_up, ds.limit_up)
    assert back.texts == ds.texts
    np.testing.assert_array_equal(back.macro.to_numpy(), ds.macro.to_numpy())
    assert list(back.metadata["industry"]) == list(ds.metadata["industry"])


def test_label_direct_ratio():
    ds = price_dataset([50.0, 100.0, 110.0])
    lab = compute_labels(ds)
    assert lab.values[0, 0] == pytest.approx(0.10, abs=1e-15)
    assert np.isnan(lab.values[1:]).all()


def test_labels_match_hand_table():
    px = np.array([[10, 20], [11, 19], [12.1, 19], [11, np.nan], [12, 21]], dtype=float)
    lab = compute_labels(price_dataset(px))
    hand = np.full((5, 2), np.nan)
    for t in range(3):
        for s in range(2):
            hand[t, s] = px[t + 2, s] / px[t + 1, s] - 1
    np.testing.assert_allclose(lab.values, hand, atol=1e-12, equal_nan=True)
    assert np.isnan(lab.values[1, 1]) and np.isnan(lab.values[2, 1])  # delisted leg: absent, not zero


def test_labels_need_three_days(caplog):
    lab = compute_labels(price_dataset([1.0, 2.0]))
    assert np.isnan(lab.values).all()
    assert "fewer than 3" in caplog.text


def test_availability_is_strictly_earlier():
    lab = compute_labels(price_dataset(np.ones((6, 1))))
    for j in range(6):
        assert LabelMatrix.available_through(j) < j
        assert not lab.is_available(j, j)
        assert lab.is_available(j - 1, j) or j == 0


def test_visible_features(tmp_path):
    ds = load_dataset(write_minimal(tmp_path / "d"))
    full = visible_features(ds, FeatureSubset.everything(ds.schema), "000001", date(2024, 1, 2))
    assert full.numerics == {"E/P": 0.05, "B/P": 0.3}
    proj = visible_features(ds, FeatureSubset(("B/P",)), "000001", date(2024, 1, 2))
    assert list(proj.numerics) == ["B/P"]
    news = visible_features(ds, FeatureSubset((), ("news", "report")), "000001", date(2024, 1, 3))
    assert len(news.texts) == 2 and news.numerics == {}
    with pytest.raises(ConfigurationError):
        FeatureSubset(("nope",)).validate(ds.schema)
