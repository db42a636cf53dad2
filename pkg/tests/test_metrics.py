import itertools
import json
import math
from datetime import date
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mass_engine.dataset import LabelMatrix
from mass_engine.metrics import (
    annualized_return,
    factor_report,
    information_ratio,
    max_drawdown,
    pearson,
    rankdata,
    sharpe,
    spearman,
)


def rank_formula(x, y):
    """Closed form for untied data, in exact arithmetic."""
    n = len(x)
    rx = {v: i + 1 for i, v in enumerate(sorted(x))}
    ry = {v: i + 1 for i, v in enumerate(sorted(y))}
    d2 = sum((rx[a] - ry[b]) ** 2 for a, b in zip(x, y))
    return float(Fraction(1) - Fraction(6 * d2, n * (n * n - 1)))


def textbook_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def average_ranks(v):
    out = []
    for a in v:
        below = sum(1 for b in v if b < a)
        equal = sum(1 for b in v if b == a)
        out.append(below + (equal + 1) / 2)
    return out


def test_spearman_examples():
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
    assert spearman([1, 2, 3, 4, 5], [2, 4, 6, 8, 10]) == 1.0


def test_spearman_exhaustive_permutations():
    for n in range(2, 7):
        base = list(range(1, n + 1))
        for perm in itertools.permutations(base):
            assert spearman(base, list(perm)) == rank_formula(base, list(perm))


def test_pearson_textbook():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(3, 40))
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        assert abs(pearson(x, y) - textbook_pearson(list(x), list(y))) < 1e-12


def test_spearman_ties_match_rank_then_pearson():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(4, 20))
        x = rng.integers(0, 4, n).astype(float)
        y = rng.integers(0, 4, n).astype(float)
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        want = textbook_pearson(average_ranks(list(x)), average_ranks(list(y)))
        assert abs(spearman(x, y) - want) < 1e-12


def test_undefined_correlations_are_nan():
    assert math.isnan(spearman([1, 1, 1], [1, 2, 3]))
    assert math.isnan(pearson([2, 2, 2], [1, 2, 3]))
    assert math.isnan(pearson([1], [1]))
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2, 3])


def test_rankdata_batched_matches_rows():
    rng = np.random.default_rng(2)
    x = rng.integers(0, 5, (6, 9)).astype(float)
    batched = rankdata(x)
    for row, want in zip(x, batched):
        assert list(want) == average_ranks(list(row))


@settings(max_examples=200)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=30), st.data())
def test_spearman_bounded_and_symmetric(x, data):
    y = data.draw(st.lists(st.floats(-1e6, 1e6), min_size=len(x), max_size=len(x)))
    r = spearman(x, y)
    if not math.isnan(r):
        assert -1.0 <= r <= 1.0
        assert r == pytest.approx(spearman(y, x), abs=1e-12)


def _labels(values, days):
    values = np.asarray(values, dtype=float)
    return LabelMatrix(tuple(days), tuple(f"s{i}" for i in range(values.shape[1])), values)


def test_factor_report_identity_signal():
    rng = np.random.default_rng(3)
    days = [date(2024, 1, d) for d in range(1, 11)]
    lab = _labels(rng.standard_normal((10, 8)), days)
    sig = {d: {s: float(lab.values[t, j]) for j, s in enumerate(lab.stocks)} for t, d in enumerate(days)}
    rep = factor_report(sig, lab)
    assert rep.mean_ric == 1.0 and rep.mean_ic == pytest.approx(1.0, abs=1e-12)
    assert "100.00" in rep.render()
    assert math.isnan(rep.ricir)  # constant series has no dispersion


def test_factor_report_skips_thin_and_constant_days():
    days = [date(2024, 1, d) for d in range(1, 5)]
    vals = np.array([[1, 2, 3, 4], [1, np.nan, np.nan, 4], [1, 2, 3, 4], [4, 3, 2, 1]], dtype=float)
    lab = _labels(vals, days)
    sig = {
        days[0]: {"s0": 1, "s1": 2, "s2": 3, "s3": 4},
        days[1]: {"s0": 1, "s1": 2, "s2": 3, "s3": 4},  # only 2 labeled
        days[2]: {"s0": 5, "s1": 5, "s2": 5, "s3": 5},  # constant signal
        days[3]: {"s0": 1, "s1": 2, "s2": 3, "s3": 4},
    }
    rep = factor_report(sig, lab)
    assert rep.skipped_days == 2
    assert rep.ric == [1.0, -1.0]
    assert rep.mean_ric == 0.0
    rows = [json.loads(line) for line in rep.to_jsonl().splitlines()]
    assert {r["metric"] for r in rows} >= {"IC", "ICIR", "RIC", "RICIR"}


def test_information_ratio_population_std():
    assert information_ratio([0.1, 0.3]) == pytest.approx(0.2 / 0.1)
    assert math.isnan(information_ratio([]))


def test_annualized_return():
    assert abs(annualized_return([0.001] * 252) - (1.001**252 - 1)) < 1e-12
    assert annualized_return([0.0] * 10) == 0.0
    assert math.isnan(annualized_return([]))
    with pytest.raises(ValueError):
        annualized_return([-1.0])


def test_max_drawdown():
    assert max_drawdown([1.0, 1.2, 0.9, 1.1]) == 0.25
    assert max_drawdown([1.0, 1.1, 1.2]) == 0.0
    with pytest.raises(ValueError):
        max_drawdown([1.0, 0.0])


def test_sharpe_two_points():
    r = [0.01, 0.03]
    want = 0.02 / 0.01 * math.sqrt(252)
    assert abs(sharpe(r) - want) < 1e-12
    assert abs(sharpe(r, risk_free_periodic=0.005) - 0.015 / 0.01 * math.sqrt(252)) < 1e-12
    assert math.isnan(sharpe([0.01, 0.01]))
