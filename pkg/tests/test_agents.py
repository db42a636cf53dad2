import logging

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from mass_engine.agents import (
    AgentPopulation,
    AgentStyle,
    DecisionMatrix,
    DeterministicProvider,
    StrategyBook,
    build_population,
    execute_decisions,
    generate_strategies,
    read_decisions,
    select_pool,
    selection_count,
    write_decisions,
)
from mass_engine.errors import ConfigurationError, ProviderError, SelectionRejected
from mass_engine.synthetic import make_market


@pytest.fixture(scope="module")
def market():
    return make_market(n_stocks=40, n_days=12, seed=5, news_prob=0.1)


def make_pop(ds, n_type=3, n_inv=4, n_sel=10, seed=1, provider=None):
    provider = provider or DeterministicProvider(seed=seed)
    return build_population(ds, n_type, n_inv, n_sel, seed, provider, ds.macro_narrative(ds.days[0])), provider


def run_day(ds, pop, provider, day=2, **kw):
    book = StrategyBook()
    strategies = generate_strategies(pop, "macro", ds, day, provider, book)
    return execute_decisions(pop, ds, day, strategies, provider, **kw)


def test_population_shape():
    ds = make_market(n_stocks=300, n_days=3, seed=0)
    pop, provider = make_pop(ds, 16, 32, 30)
    assert len(pop) == 512 and pop.n_type == 16
    assert all(len(inst.pool) == 30 for inst in pop.instances)
    assert provider.calls["style"] == 16
    # every type's feature subset keeps 25%..75% of the 4 columns
    assert all(1 <= len(t.feature_subset.columns) <= 3 for t in pop.types)


def test_population_round_trip(market):
    pop, _ = make_pop(market)
    back = AgentPopulation.from_dict(pop.to_dict())
    assert back.to_dict() == pop.to_dict()


def test_population_rejects_zero_sizes(market):
    with pytest.raises(ConfigurationError):
        make_pop(market, n_inv=0)


def test_style_validation():
    with pytest.raises(ValueError):
        AgentStyle("o", "extreme", "one day", 0.5, 0.5, "Random")
    with pytest.raises(ValueError):
        AgentStyle("o", "aggressive", "one day", 1.5, 0.5, "Random")


def test_industry_equal_pool():
    universe = [f"{i:06d}" for i in range(40)]
    meta = pd.DataFrame({"industry": [f"ind{i % 4}" for i in range(40)]}, index=universe)
    pool = select_pool("IndustryEqual", universe, 8, seed=3, metadata=meta)
    counts = meta.loc[list(pool), "industry"].value_counts()
    assert len(pool) == 8 and set(counts) == {2}


def test_industry_basis_falls_back(caplog):
    universe = [f"{i:06d}" for i in range(40)]
    meta = pd.DataFrame({"industry": [f"ind{i % 4}" for i in range(40)]}, index=universe)
    with caplog.at_level(logging.WARNING):
        pool = select_pool("IndustryBasis", universe, 20, seed=3, metadata=meta, industries=["ind0"])
    assert len(pool) == 20 and "falling back to Random" in caplog.text
    ok = select_pool("IndustryBasis", universe, 5, seed=3, metadata=meta, industries=["ind0"])
    assert set(meta.loc[list(ok), "industry"]) == {"ind0"}


def test_pool_equal_to_universe():
    universe = [f"{i:06d}" for i in range(10)]
    assert select_pool("Random", universe, 10, seed=0) == tuple(universe)


def test_mv_equal_pool_spreads_over_buckets():
    universe = [f"{i:06d}" for i in range(50)]
    meta = pd.DataFrame({"market_cap": np.arange(50, dtype=float)}, index=universe)
    pool = select_pool("MVEqual", universe, 10, seed=2, metadata=meta)
    buckets = [int(s) // 10 for s in pool]
    assert sorted(np.bincount(buckets, minlength=5)) == [2] * 5


def test_selector_needs_metadata():
    with pytest.raises(ConfigurationError):
        select_pool("MVEqual", [f"{i:06d}" for i in range(10)], 5, seed=0)


def test_selection_count():
    assert selection_count(30) == 6
    assert selection_count(1) == 1
    assert selection_count(12) == 2


def test_decision_matrix_invariants(market):
    pop, provider = make_pop(market)
    m = run_day(market, pop, provider)
    assert m.values.shape == (3, 40)
    assert ((m.values >= 0) & (m.values <= 1)).all()
    # row sums equal picks per instance times n_inv over n_inv
    assert np.allclose(m.values.sum(axis=1), selection_count(10))
    for (i, k), codes in m.selections.items():
        assert set(codes) <= set(pop.instances[i * pop.n_inv + k].pool)
    assert not m.values.flags.writeable


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(0, 7), max_size=4), min_size=6, max_size=6))
def test_fraction_bounds(raw):
    stocks = [f"{i:06d}" for i in range(8)]
    sel = {(i // 3, i % 3): [stocks[j] for j in picks] for i, picks in enumerate(raw)}
    m = DecisionMatrix.from_selections(pd.Timestamp("2024-01-02").date(), stocks, 2, 3, sel)
    assert ((m.values >= 0) & (m.values <= 1)).all()
    assert np.all(m.values * 3 == np.round(m.values * 3))


class Scripted(DeterministicProvider):
    """Returns a fixed answer for instance 0 of type 0."""

    def __init__(self, answer, reject=False):
        super().__init__(seed=0)
        self.answer, self.reject, self.attempts = answer, reject, []

    def select_stocks(self, request):
        if request.type_index == 0 and request.instance_index == 0:
            self.attempts.append(request.attempt)
            codes = self.answer(request.stocks)
            if self.reject:
                raise SelectionRejected("bad", codes)
            return codes
        return super().select_stocks(request)


def test_illegal_answer_is_retried_then_repaired(market):
    provider = Scripted(lambda pool: [pool[0], pool[0], "999999"], reject=False)
    pop, _ = make_pop(market, provider=provider)
    m = run_day(market, pop, provider)
    assert provider.attempts == [0, 1]
    assert m.selections[(0, 0)] == (pop.instances[0].pool[0],)
    assert (0, 0) in m.repaired


def test_rejected_with_nothing_legal_abstains(market, caplog):
    provider = Scripted(lambda pool: ["999999"], reject=True)
    pop, _ = make_pop(market, provider=provider)
    with caplog.at_level(logging.WARNING):
        m = run_day(market, pop, provider)
    assert m.selections[(0, 0)] == ()
    assert m.abstained == ((0, 0),)
    assert "abstained" in caplog.text


def test_workers_do_not_change_result(market):
    pop, provider = make_pop(market)
    a = run_day(market, pop, provider, max_workers=1)
    b = run_day(market, pop, provider, max_workers=4)
    assert a.selections == b.selections
    np.testing.assert_array_equal(a.values, b.values)


def test_decisions_round_trip(market, tmp_path):
    pop, provider = make_pop(market)
    m = run_day(market, pop, provider)
    write_decisions(m, tmp_path / "d.jsonl", "deterministic")
    back = read_decisions(tmp_path / "d.jsonl", market.stocks, pop.n_type, pop.n_inv)
    assert back.selections == m.selections and back.date == m.date
    np.testing.assert_array_equal(back.values, m.values)


def test_strategies_refresh_weekly(market):
    pop, provider = make_pop(market)
    book = StrategyBook()
    refreshed = []
    for j in range(len(market.days)):
        before = provider.calls["strategy"]
        generate_strategies(pop, "macro", market, j, provider, book)
        refreshed.append(provider.calls["strategy"] > before)
    expected = [market.calendar.is_week_start(j) for j in range(len(market.days))]
    assert refreshed == expected


class Flaky(DeterministicProvider):
    fail = False

    def generate_strategy(self, *a, **kw):
        if self.fail:
            raise RuntimeError("timeout")
        return super().generate_strategy(*a, **kw)


def test_strategy_failure_reuses_previous(market):
    provider = Flaky(seed=0)
    pop, _ = make_pop(market, provider=provider)
    book = StrategyBook()
    first = generate_strategies(pop, "macro", market, 0, provider, book)
    provider.fail = True
    again = generate_strategies(pop, "macro", market, 0, provider, book, daily=True)
    assert again == first
    with pytest.raises(ProviderError):
        generate_strategies(pop, "macro", market, 0, provider, StrategyBook())


def test_book_round_trip(market):
    pop, provider = make_pop(market)
    book = StrategyBook()
    generate_strategies(pop, "macro", market, 0, provider, book)
    assert StrategyBook.from_list(book.to_list()).current == book.current
