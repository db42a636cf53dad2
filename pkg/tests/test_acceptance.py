"""Acceptance suite: one test per headline criterion, each printing a
``[PASS]``/``[FAIL]`` line with the measured numbers."""
import itertools
import math
import random
import time
from datetime import date, timedelta
from fractions import Fraction

import numpy as np
import pytest

from conftest import price_dataset
from gateway_support import CFG, WORKED_PICKS, ScriptedTransport, fixture, worked_example_request
from mass_engine import engine as eng
from mass_engine.agents import DeterministicProvider
from mass_engine.aggregation import TypeDistribution, aggregate
from mass_engine.backtest import BacktestConfig, run_backtest
from mass_engine.engine import Ablations, RunConfig, run_simulation, scaling_sweep
from mass_engine.errors import SelectionRejected
from mass_engine.llm_gateway import PromptBundle, select_stocks
from mass_engine.metrics import annualized_return, max_drawdown, pearson, sharpe, spearman
from mass_engine.optimizer import AnnealConfig, OptimizationWindow, WindowDay, anneal, objective
from mass_engine.synthetic import Regime, make_market


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] #{number} {detail}")
    assert ok, detail


def random_simplex(rng, n):
    w = rng.random(n)
    w[rng.random(n) < 0.2] = 0.0
    if w.sum() == 0:
        w[rng.integers(n)] = 1.0
    return TypeDistribution(w)


# ---------------------------------------------------------------- 1


def naive_aggregate(V, d, alpha):
    out = []
    for s in range(len(V[0])):
        m = 0.0
        for i in range(len(V)):
            m += d[i] * V[i][s]
        var = 0.0
        for i in range(len(V)):
            var += d[i] * (V[i][s] - m) ** 2
        out.append(alpha * m - (1 - alpha) * math.sqrt(var))
    return out


def test_1_aggregation_oracle(capsys):
    rng = np.random.default_rng(1)
    cases = []
    for _ in range(1000):
        n, S = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        n_inv = int(rng.integers(1, 9))
        V = rng.integers(0, n_inv + 1, (n, S)) / n_inv
        cases.append((V, random_simplex(rng, n), float(rng.random())))
    t0 = time.perf_counter()
    sigs = [aggregate(V, d, a).signal for V, d, a in cases]
    elapsed = time.perf_counter() - t0
    err = max(
        max(abs(x - y) for x, y in zip(sig, naive_aggregate(V.tolist(), d.tolist(), a)))
        for sig, (V, d, a) in zip(sigs, cases)
    )
    verdict(capsys, 1, err <= 1e-12 and elapsed < 1.0, f"aggregation oracle: 1000 cases, max error {err:.2e}, {elapsed:.3f}s")


# ---------------------------------------------------------------- 2


def rank_formula(x, y):
    n = len(x)
    rx = {v: i + 1 for i, v in enumerate(sorted(x))}
    ry = {v: i + 1 for i, v in enumerate(sorted(y))}
    d2 = sum((rx[a] - ry[b]) ** 2 for a, b in zip(x, y))
    return float(Fraction(1) - Fraction(6 * d2, n * (n * n - 1)))


def textbook_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    return sxy / math.sqrt(sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y))


def average_ranks(v):
    return [sum(b < a for b in v) + (sum(b == a for b in v) + 1) / 2 for a in v]


def test_2_correlation_oracles(capsys):
    exact_bad = 0
    n_perm = 0
    for n in range(2, 7):
        base = list(range(1, n + 1))
        for perm in itertools.permutations(base):
            n_perm += 1
            exact_bad += spearman(base, list(perm)) != rank_formula(base, list(perm))
    rng = np.random.default_rng(2)
    p_err = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 50))
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        p_err = max(p_err, abs(pearson(x, y) - textbook_pearson(x.tolist(), y.tolist())))
    t_err = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 20))
        x, y = rng.integers(0, 4, n).astype(float), rng.integers(0, 4, n).astype(float)
        rx, ry = average_ranks(x.tolist()), average_ranks(y.tolist())
        if len(set(rx)) == 1 or len(set(ry)) == 1:
            assert math.isnan(spearman(x, y))
            continue
        t_err = max(t_err, abs(spearman(x, y) - textbook_pearson(rx, ry)))
    ok = exact_bad == 0 and p_err <= 1e-12 and t_err <= 1e-12
    verdict(capsys, 2, ok, f"correlations: {n_perm} permutations exact ({exact_bad} off), pearson err {p_err:.1e}, tied err {t_err:.1e}")


# ---------------------------------------------------------------- 3


def planted_window(seed, n_type=3, S=40, T=10):
    rng = np.random.default_rng(seed)
    days = []
    for t in range(T):
        y = 0.02 * rng.standard_normal(S)
        V = rng.random((n_type, S))
        V[0] = (np.argsort(np.argsort(y)) + 1) / S  # type 0 ranks exactly like the labels
        days.append(WindowDay(date(2023, 1, 2) + timedelta(t), V, y))
    return OptimizationWindow(tuple(days))


def grid_best(window, alpha, step=0.05):
    n = round(1 / step)
    best = -math.inf
    for i in range(n + 1):
        for j in range(n + 1 - i):
            best = max(best, objective(TypeDistribution([i * step, j * step, max(0.0, 1 - (i + j) * step)]), window, alpha))
    return best


def test_3_planted_recovery(capsys):
    cfg = AnnealConfig(initial_temperature=40.0, max_iterations=100, cooling_rate=0.95)
    hits, elapsed = 0, 0.0
    for seed in range(100):
        w = planted_window(seed)
        t0 = time.perf_counter()
        res = anneal(w, TypeDistribution.uniform(3), AnnealConfig(**{**cfg.__dict__, "seed": seed}), 0.5)
        elapsed += time.perf_counter() - t0
        hits += res.distribution.weights[0] >= 0.8 and res.objective >= 0.95 * grid_best(w, 0.5)
    verdict(capsys, 3, hits >= 95 and elapsed < 10, f"planted recovery: {hits}/100 seeds, optimizer time {elapsed:.2f}s")


# ---------------------------------------------------------------- 4


def test_4_anytime_improvement(capsys):
    rng = np.random.default_rng(4)
    violations = 0
    for seed in range(500):
        n, S, T = int(rng.integers(1, 7)), int(rng.integers(3, 30)), int(rng.integers(1, 8))
        n_inv = int(rng.integers(1, 9))
        days = tuple(
            WindowDay(date(2023, 1, 2) + timedelta(t), rng.integers(0, n_inv + 1, (n, S)) / n_inv, rng.standard_normal(S))
            for t in range(T)
        )
        w = OptimizationWindow(days)
        d0 = random_simplex(rng, n)
        alpha = float(rng.random())
        res = anneal(w, d0, AnnealConfig(seed=seed), alpha)
        violations += objective(res.distribution, w, alpha) < objective(d0, w, alpha)
    verdict(capsys, 4, violations == 0, f"anytime improvement: 500 windows, {violations} violations")


# ---------------------------------------------------------------- 5


def test_5_no_lookahead(capsys, tmp_path, monkeypatch):
    ds = make_market(n_stocks=30, n_days=30, seed=5)
    cfg = RunConfig(n_type=3, n_inv=4, n_sel=15, omega_opt=5, seed=5)
    leaks, windows = [], 0

    def observer(j, window):
        nonlocal windows
        windows += 1
        leaks.extend((j, wd.date) for wd in window.days if ds.calendar.index_of(wd.date) >= j)

    base = run_simulation(ds, cfg, tmp_path / "base", observer=observer)

    # replace d_j on day 12 after the fact: day 12's signal must not move
    real = eng.anneal
    target = 12

    def tampered(window, d_init, acfg, alpha):
        res = real(window, d_init, acfg, alpha)
        if window.days and window.days[-1].date == ds.days[target - 1]:
            res.distribution = TypeDistribution([0.0, 0.0, 1.0])
        return res

    monkeypatch.setattr(eng, "anneal", tampered)
    alt = run_simulation(ds, cfg, tmp_path / "alt")
    a, b = base.store.read_signals(), alt.store.read_signals()
    same_through_j = all(a[d] == b[d] for d in ds.days[: target + 1])
    moved_after = a[ds.days[target + 1]] != b[ds.days[target + 1]]
    ok = windows == 30 and not leaks and same_through_j and moved_after
    verdict(capsys, 5, ok, f"no-lookahead: {windows} windows, {len(leaks)} leaked labels, day-j signal invariant={same_through_j}")


# ---------------------------------------------------------------- 6


@pytest.mark.slow
def test_6_scaling_effect(capsys, tmp_path):
    counts = [16, 32, 64, 128, 256, 512]
    per_seed = []
    t0 = time.perf_counter()
    for seed in range(3):
        # every agent reads the one informative feature through heavy noise
        ds = make_market(n_stocks=100, n_days=30, seed=seed, signal_strength=0.5)
        base = RunConfig(
            n_type=2, n_inv=1, n_sel=30, seed=seed, feature_subsets=(("alpha",),) * 2,
            provider_options={"weights": {0: {"alpha": 1.0}, 1: {"alpha": 1.0}}, "rationality": 0.0, "noise_scale": 3.0},
        )
        rows = scaling_sweep(ds, base, counts, tmp_path / f"s{seed}")
        per_seed.append([r.mean_ric for r in rows])
    elapsed = time.perf_counter() - t0
    ric = np.mean(per_seed, axis=0)
    rho = spearman(ric, np.log2(counts))
    rel = ric[-1] / ric[0] - 1
    ok = rho >= 0.9 and ric[0] > 0 and rel >= 0.2 and elapsed < 300
    shown = " ".join(f"{n}:{100 * r:.2f}" for n, r in zip(counts, ric))
    verdict(capsys, 6, ok, f"scaling: RIC x100 {shown}; rho={rho:.3f}, RIC(512)/RIC(16)-1={rel:.2f}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_7_ablation_direction(capsys, tmp_path):
    weights = {0: {"alpha": 1.0}, 1: {"beta": 1.0}, 2: {"noise1": 1.0}, 3: {"noise2": 1.0}}
    n_days = 60
    margins = []
    for seed in range(10):
        ds = make_market(
            n_stocks=40, n_days=n_days, seed=seed, signal_strength=0.5,
            regimes=(Regime(0, {"alpha": 1.0}), Regime(n_days // 2, {"beta": 1.0})),
        )
        ric = {}
        for name, ab in (("full", Ablations()), ("no_bo", Ablations(no_bo=True))):
            cfg = RunConfig(
                n_type=4, n_inv=8, n_sel=20, seed=seed, ablations=ab, feature_subsets=(("alpha", "beta", "noise1", "noise2"),) * 4,
                provider_options={"weights": weights, "rationality": 0.5, "noise_scale": 1.0},
            )
            ric[name] = run_simulation(ds, cfg, tmp_path / f"{name}{seed}").report.mean_ric
        margins.append(ric["full"] - ric["no_bo"])
    ok = min(margins) >= 0.05
    verdict(capsys, 7, ok, f"ablation: full minus no-BO RIC over 10 seeds, mean {np.mean(margins):.3f}, min {min(margins):.3f}")


# ---------------------------------------------------------------- 8


def test_8_backtest_arithmetic(capsys):
    checks = {}
    ds = price_dataset([10.0, 10.0, 10.5, 10.2, 10.8, 11.0])
    sig = {ds.days[t]: {ds.stocks[0]: 1.0} for t in range(5)}
    res = run_backtest(sig, ds, BacktestConfig(round_trip_cost=0.001))
    checks["one-stock"] = abs(res.equity[-1] - (1 - 0.0005) * 1.10) <= 1e-10

    rng = np.random.default_rng(8)
    T, S = 30, 15
    px = 10 * np.cumprod(1 + 0.02 * rng.standard_normal((T, S)), axis=0)
    flagged = rng.random((T, S)) < 0.15
    up = rng.random((T, S)) < 0.5
    mkt = price_dataset(px, limit_up=flagged & up, limit_down=flagged & ~up)
    sigs = {mkt.days[t]: dict(zip(mkt.stocks, rng.standard_normal(S))) for t in range(T - 1)}
    terminal = [run_backtest(sigs, mkt, BacktestConfig(round_trip_cost=c)).equity[-1] for c in (0.0, 0.0005, 0.001, 0.003, 0.01)]
    checks["cost-monotone"] = all(a >= b for a, b in zip(terminal, terminal[1:]))

    daily = run_backtest(sigs, mkt, BacktestConfig(rebalance="daily"))
    pos = {s: j for j, s in enumerate(mkt.stocks)}
    bad = [tr for tr in daily.trades if flagged[mkt.calendar.index_of(tr.date), pos[tr.stock]]]
    checks["limit-untouched"] = not bad and len(daily.trades) > 0

    checks["mdd"] = max_drawdown([1.0, 1.2, 0.9, 1.1]) == 0.25
    checks["ar"] = abs(annualized_return([0.001] * 252) - (1.001**252 - 1)) <= 1e-12
    checks["sharpe"] = abs(sharpe([0.01, 0.03]) - 2.0 * math.sqrt(252)) <= 1e-12
    failed = [k for k, v in checks.items() if not v]
    verdict(capsys, 8, not failed, f"backtest arithmetic: {len(checks) - len(failed)}/{len(checks)} fixtures" + (f", failed {failed}" if failed else ""))


# ---------------------------------------------------------------- 9


def test_9_determinism_and_resume(capsys, tmp_path):
    ds = make_market(n_stocks=30, n_days=20, seed=9)
    cfg = RunConfig(n_type=3, n_inv=4, n_sel=15, omega_opt=4, seed=9)
    full = run_simulation(ds, cfg, tmp_path / "full")
    run_simulation(ds, cfg, tmp_path / "split", max_days=7)
    split = run_simulation(ds, cfg, tmp_path / "split")

    def snaps(root):
        return {p.name: p.read_bytes() for p in sorted((root / "snapshots").glob("*.json"))}

    identical = snaps(tmp_path / "full") == snaps(tmp_path / "split") and len(snaps(tmp_path / "full")) == 20
    provider = DeterministicProvider(seed=9)
    replay_cfg = RunConfig(**{**cfg.__dict__, "provider": "replay", "replay_from": str(tmp_path / "full")})
    replay = run_simulation(ds, replay_cfg, tmp_path / "replay", provider=provider)
    calls = provider.total_calls + replay.provider_calls
    same_metrics = replay.report.summary() == full.report.summary()
    ok = identical and calls == 0 and same_metrics and split.report.summary() == full.report.summary()
    verdict(capsys, 9, ok, f"determinism: split run byte-identical={identical}, replay provider calls={calls}")


# ---------------------------------------------------------------- 10


def test_10_gateway_contract(capsys):
    bundle = PromptBundle.default()
    req = worked_example_request()
    worked = select_stocks(ScriptedTransport(fixture("worked_example")), bundle, req, CFG) == WORKED_PICKS

    repaired = rejected = 0
    for bad in ("wrong_count", "illegal_code", "duplicate", "no_json"):
        t = ScriptedTransport(fixture(bad), fixture("worked_example"))
        repaired += select_stocks(t, bundle, req, CFG) == WORKED_PICKS and len(t.requests) == 2
        try:
            select_stocks(ScriptedTransport(fixture(bad), fixture(bad)), bundle, req, CFG)
        except SelectionRejected:
            rejected += 1

    # random answers: whatever is accepted must be legal
    rng = random.Random(10)
    pool = list(req.stocks)
    accepted = illegal = 0
    for _ in range(500):
        def answer():
            k = rng.choice([2, 3, 3, 3, 4])
            codes = rng.sample(pool + ["000001", "999999"], k)
            if rng.random() < 0.2:
                codes[-1] = codes[0]
            return "{'Stock': %r}" % codes

        try:
            out = select_stocks(ScriptedTransport(answer(), answer()), bundle, req, CFG)
        except SelectionRejected:
            continue
        accepted += 1
        illegal += not (set(out) <= set(pool) and len(out) == req.num_stocks == len(set(out)))
    ok = worked and repaired == 4 and rejected == 4 and accepted > 0 and illegal == 0
    verdict(capsys, 10, ok, f"gateway: worked example accepted={worked}, repaired 4/4={repaired == 4}, rejected {rejected}/4, {accepted} accepted random answers, {illegal} illegal")
