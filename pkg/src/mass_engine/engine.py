"""Daily simulation loop, run store, resume/replay, and the scaling sweep.

Each trading day ``j``: refresh strategies (weekly unless configured
daily), collect every instance's selections into ``V_j``, aggregate with
yesterday's distribution ``d_{j-1}`` into the day's signal and top-k
portfolio, then re-optimize the distribution over the most recent
``omega_opt`` labeled days (all strictly before ``j``) to get ``d_j``.

Run store layout (one directory per run)::

    config.json              canonical config (sorted keys)
    run.json                 config hash, status, failed days, call counts
    population.json          agent types, styles, feature subsets, pools
    decisions/<date>.jsonl   per-instance selections (the decision cache)
    snapshots/<date>.json    d_j, objective, portfolio, strategies in force
    signals/<date>.csv       per-stock m, sigma, signal
    signals.csv              all days combined
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import date
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .agents import (
    AgentPopulation,
    DecisionMatrix,
    DeterministicProvider,
    StrategyBook,
    build_population,
    daily_pools,
    derive_seed,
    execute_decisions,
    generate_strategies,
    read_decisions,
    selection_count,
    write_decisions,
)
from .aggregation import DailySignal, TypeDistribution, aggregate, default_top_k, rank_stocks, read_signals, top_k_portfolio, write_signals
from .dataset import FeatureSubset, LabelMatrix, MarketDataset, compute_labels, load_dataset
from .errors import ConfigMismatch, ConfigurationError, IncompleteStore, ProviderError
from .metrics import MetricReport, factor_report
from .optimizer import AnnealConfig, OptimizationWindow, WindowDay, anneal

logger = logging.getLogger(__name__)

NO_MACRO_TEXT = "No macroeconomic or market data is available."


@dataclass(frozen=True)
class Ablations:
    no_pmd: bool = False
    no_bo: bool = False
    no_mdh: bool = False
    daily_pool_update: bool = False
    daily_strategy_update: bool = False


@dataclass(frozen=True)
class RunConfig:
    dataset: str = ""
    n_type: int = 16
    n_inv: int = 32
    n_sel: int = 30
    num_stocks: int | None = None
    alpha: float = 0.5
    omega_opt: int = 5
    anneal: AnnealConfig = AnnealConfig()
    provider: str = "deterministic"
    provider_options: Mapping[str, Any] = field(default_factory=dict)
    replay_from: str | None = None
    seed: int = 0
    start: date | None = None
    end: date | None = None
    ablations: Ablations = Ablations()
    top_k: int | None = None
    feature_subsets: tuple[tuple[str, ...], ...] | None = None
    max_workers: int = 1

    def __post_init__(self) -> None:
        problems = []
        for name in ("n_type", "n_inv", "n_sel", "omega_opt", "max_workers"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be at least 1")
        if self.num_stocks is not None and self.num_stocks < 1:
            problems.append("num_stocks must be at least 1")
        if self.top_k is not None and self.top_k < 1:
            problems.append("top_k must be at least 1")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("alpha must lie in [0, 1]")
        if self.provider not in ("deterministic", "llm", "replay"):
            problems.append("provider must be one of deterministic, llm, replay")
        if self.provider == "replay" and not self.replay_from:
            problems.append("replay provider needs replay_from (a source run store)")
        if self.start and self.end and self.start > self.end:
            problems.append("start is after end")
        if self.feature_subsets is not None and len(self.feature_subsets) != self.n_type:
            problems.append(f"feature_subsets has {len(self.feature_subsets)} entries for n_type={self.n_type}")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @property
    def effective_alpha(self) -> float:
        return 1.0 if self.ablations.no_mdh else self.alpha

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["anneal"] = asdict(self.anneal)
        d["ablations"] = asdict(self.ablations)
        d["provider_options"] = _plain(dict(self.provider_options))
        d["start"] = self.start.isoformat() if self.start else None
        d["end"] = self.end.isoformat() if self.end else None
        d["feature_subsets"] = [list(x) for x in self.feature_subsets] if self.feature_subsets is not None else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {unknown}")
        try:
            if "anneal" in d:
                d["anneal"] = AnnealConfig(**d["anneal"])
            if "ablations" in d:
                d["ablations"] = Ablations(**d["ablations"])
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None
        except ValueError as exc:
            raise ConfigurationError(f"anneal: {exc}") from None
        for key in ("start", "end"):
            if isinstance(d.get(key), str):
                d[key] = date.fromisoformat(d[key])
        if d.get("feature_subsets") is not None:
            d["feature_subsets"] = tuple(tuple(x) for x in d["feature_subsets"])
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plain(x):
    if isinstance(x, Mapping):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def diff_configs(a: Mapping, b: Mapping, prefix: str = "") -> list[str]:
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        name = f"{prefix}{key}"
        if isinstance(va, Mapping) and isinstance(vb, Mapping):
            out.extend(diff_configs(va, vb, name + "."))
        elif va != vb:
            out.append(name)
    return out


# --------------------------------------------------------------------------- store


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class RunStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    # paths
    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def run_path(self) -> Path:
        return self.root / "run.json"

    @property
    def population_path(self) -> Path:
        return self.root / "population.json"

    def snapshot_path(self, day: date) -> Path:
        return self.root / "snapshots" / f"{day.isoformat()}.json"

    def decisions_path(self, day: date) -> Path:
        return self.root / "decisions" / f"{day.isoformat()}.jsonl"

    def signal_path(self, day: date) -> Path:
        return self.root / "signals" / f"{day.isoformat()}.csv"

    @property
    def signals_path(self) -> Path:
        return self.root / "signals.csv"

    # io
    def exists(self) -> bool:
        return self.config_path.exists()

    def read_config(self) -> RunConfig:
        if not self.config_path.exists():
            raise IncompleteStore(f"{self.root}: missing config.json")
        return RunConfig.from_dict(json.loads(self.config_path.read_text(encoding="utf-8")))

    def read_run(self) -> dict:
        if not self.run_path.exists():
            raise IncompleteStore(f"{self.root}: missing run.json")
        return json.loads(self.run_path.read_text(encoding="utf-8"))

    def write_run(self, info: Mapping) -> None:
        _write_atomic(self.run_path, _dump(dict(info)))

    def snapshot_days(self) -> list[date]:
        folder = self.root / "snapshots"
        if not folder.exists():
            return []
        return sorted(date.fromisoformat(p.stem) for p in folder.glob("*.json"))

    def read_snapshot(self, day: date) -> dict:
        return json.loads(self.snapshot_path(day).read_text(encoding="utf-8"))

    def write_snapshot(self, day: date, snap: Mapping) -> None:
        _write_atomic(self.snapshot_path(day), _dump(dict(snap)))

    def read_population(self) -> AgentPopulation:
        if not self.population_path.exists():
            raise IncompleteStore(f"{self.root}: missing population.json")
        return AgentPopulation.from_dict(json.loads(self.population_path.read_text(encoding="utf-8")))

    def read_signals(self) -> dict[date, dict[str, float]]:
        if not self.signals_path.exists():
            raise IncompleteStore(f"{self.root}: missing signals.csv")
        return read_signals(self.signals_path)


# --------------------------------------------------------------------------- simulation


@dataclass
class DayResult:
    date: date
    status: str
    distribution: TypeDistribution
    objective: float | None
    signal: DailySignal | None = None
    portfolio: tuple[str, ...] = ()


@dataclass
class RunResult:
    store: RunStore
    days: list[DayResult]
    failed_days: list[date]
    report: MetricReport
    provider_calls: int

    @property
    def signals(self) -> dict[date, dict[str, float]]:
        return {r.date: r.signal.as_dict() for r in self.days if r.signal is not None}


WindowObserver = Callable[[int, OptimizationWindow], None]


def make_provider(config: RunConfig):
    if config.provider == "deterministic":
        opts = dict(config.provider_options)
        if "weights" in opts and opts["weights"] is not None:
            opts["weights"] = {int(k): dict(v) for k, v in opts["weights"].items()}
        return DeterministicProvider(seed=config.seed, **opts)
    if config.provider == "llm":
        from .llm_gateway import LLMProvider, ProviderConfig

        return LLMProvider.from_config(ProviderConfig(**config.provider_options))
    return None


def _day_range(dataset: MarketDataset, config: RunConfig) -> list[int]:
    days = dataset.days
    idx = [i for i, d in enumerate(days) if (config.start is None or d >= config.start) and (config.end is None or d <= config.end)]
    if not idx:
        raise ConfigurationError("date range selects no trading days")
    return idx


def _provider_calls(provider) -> int:
    if provider is None:
        return 0
    if hasattr(provider, "total_calls"):
        return int(provider.total_calls)
    transport = getattr(provider, "transport", None)
    return int(getattr(transport, "misses", 0))


def _build_window(
    j: int, matrices: Mapping[int, DecisionMatrix], labels: LabelMatrix, omega: int
) -> OptimizationWindow:
    """Most recent ``omega`` days before ``j`` with a decision matrix and available labels."""
    out = []
    for t in sorted((t for t in matrices if t < j and labels.is_available(t, j)), reverse=True)[:omega]:
        out.append(WindowDay(labels.days[t], matrices[t].values, labels.values[t]))
    return OptimizationWindow(tuple(reversed(out)))


def run_simulation(
    dataset: MarketDataset,
    config: RunConfig,
    out: str | Path,
    provider=None,
    observer: WindowObserver | None = None,
    max_days: int | None = None,
    on_day: Callable[[DayResult], None] | None = None,
) -> RunResult:
    """Run (or continue) a simulation into the store at ``out``.

    An existing store is resumed when its config matches; a mismatch raises
    ``ConfigMismatch`` naming the changed keys. ``max_days`` stops after that
    many newly simulated days (an interruption, for testing).
    """
    store = RunStore(out)
    if store.exists():
        stored = store.read_config()
        changed = diff_configs(stored.to_dict(), config.to_dict())
        if changed:
            raise ConfigMismatch(changed)
    else:
        store.root.mkdir(parents=True, exist_ok=True)
        _write_atomic(store.config_path, config.canonical_json())

    replay: RunStore | None = None
    if config.provider == "replay":
        replay = RunStore(config.replay_from)
        provider = None
    elif provider is None:
        provider = make_provider(config)

    for sub in ("decisions", "signals", "snapshots"):
        (store.root / sub).mkdir(parents=True, exist_ok=True)
    labels = compute_labels(dataset)
    idx = _day_range(dataset, config)
    days = dataset.days
    calls_before = _provider_calls(provider)

    # population
    if store.population_path.exists():
        population = store.read_population()
    elif replay is not None:
        population = replay.read_population()
        _write_atomic(store.population_path, _dump(population.to_dict()))
    else:
        subsets = [FeatureSubset(tuple(cols), ("news", "report")) for cols in config.feature_subsets] if config.feature_subsets else None
        macro0 = NO_MACRO_TEXT if config.ablations.no_pmd else dataset.macro_narrative(days[idx[0]])
        population = build_population(
            dataset, config.n_type, config.n_inv, config.n_sel, config.seed, provider, macro0, feature_subsets=subsets
        )
        _write_atomic(store.population_path, _dump(population.to_dict()))
    if population.n_type != config.n_type or population.n_inv != config.n_inv:
        raise ConfigurationError("stored population does not match n_type/n_inv")

    # state from completed days
    done = {d for d in store.snapshot_days()}
    d_prev = TypeDistribution.uniform(config.n_type)
    book = StrategyBook()
    matrices: dict[int, DecisionMatrix] = {}
    results: list[DayResult] = []
    failed: list[date] = []
    for j in idx:
        if days[j] not in done:
            break
        snap = store.read_snapshot(days[j])
        d_prev = TypeDistribution(snap["distribution"])
        book = StrategyBook.from_list(snap.get("strategies", []))
        if snap["status"] == "ok":
            matrices[j] = read_decisions(store.decisions_path(days[j]), dataset.stocks, config.n_type, config.n_inv)
            sig = _read_day_signal(store.signal_path(days[j]), days[j], snap["alpha"])
            results.append(DayResult(days[j], "ok", d_prev, snap["objective"], sig, tuple(snap["portfolio"])))
        else:
            failed.append(days[j])
            results.append(DayResult(days[j], "failed", d_prev, None))
    remaining = [j for j in idx if days[j] not in done]
    if done and remaining:
        logger.info("resuming %s at %s (%d day(s) done)", store.root, days[remaining[0]], len(results))

    alpha = config.effective_alpha
    num_stocks = config.num_stocks or selection_count(config.n_sel)
    k = config.top_k or default_top_k(len(dataset.stocks))
    simulated = 0
    for j in remaining:
        if max_days is not None and simulated >= max_days:
            break
        day = days[j]
        d_used = d_prev
        try:
            if replay is not None:
                V = read_decisions(replay.decisions_path(day), dataset.stocks, config.n_type, config.n_inv)
            else:
                macro = NO_MACRO_TEXT if config.ablations.no_pmd else dataset.macro_narrative(day)
                strategies = generate_strategies(
                    population, macro, dataset, j, provider, book, daily=config.ablations.daily_strategy_update
                )
                pools = daily_pools(population, dataset, j) if config.ablations.daily_pool_update else None
                V = execute_decisions(
                    population, dataset, j, strategies, provider, num_stocks, pools=pools, max_workers=config.max_workers
                )
        except (ProviderError, FileNotFoundError, ValueError) as exc:
            logger.error("day %s failed: %s", day, exc)
            failed.append(day)
            store.write_snapshot(day, _snapshot(day, "failed", d_prev, d_used, None, None, (), book, alpha, (), error=str(exc)))
            results.append(DayResult(day, "failed", d_prev, None))
            if on_day is not None:
                on_day(results[-1])
            simulated += 1
            continue

        write_decisions(V, store.decisions_path(day), getattr(provider, "provider_id", "replay"))
        matrices[j] = V
        signal = aggregate(V, d_used, alpha)
        portfolio = top_k_portfolio(rank_stocks(signal), k)
        write_signals([signal], store.signal_path(day))

        window = _build_window(j, matrices, labels, config.omega_opt)
        if observer is not None:
            observer(j, window)
        objective = init_obj = None
        if config.ablations.no_bo:
            d_new = TypeDistribution.uniform(config.n_type)
        elif len(window) < config.omega_opt:
            d_new = d_prev  # warm-up: not enough labeled history yet
        else:
            res = anneal(window, d_prev, replace(config.anneal, seed=derive_seed(config.anneal.seed, config.seed, j)), alpha)
            d_new, objective, init_obj = res.distribution, res.objective, res.initial_objective
        store.write_snapshot(
            day,
            _snapshot(day, "ok", d_new, d_used, objective, init_obj, portfolio.stocks, book, alpha,
                      window.label_dates, abstained=len(V.abstained), repaired=len(V.repaired)),
        )
        results.append(DayResult(day, "ok", d_new, objective, signal, portfolio.stocks))
        if on_day is not None:
            on_day(results[-1])
        d_prev = d_new
        simulated += 1

    complete = len(results) == len(idx)
    ok = [r for r in results if r.signal is not None]
    write_signals([r.signal for r in ok], store.signals_path)
    report = factor_report({r.date: r.signal.as_dict() for r in ok}, labels)
    calls = _provider_calls(provider) - calls_before
    info = {
        "config_hash": config.config_hash(),
        "status": "complete" if complete else "incomplete",
        "days_done": len(results),
        "days_total": len(idx),
        "failed_days": [d.isoformat() for d in failed],
        "last_invocation_provider_calls": calls,
    }
    store.write_run(info)
    return RunResult(store, results, failed, report, calls)


def _snapshot(day, status, d_new, d_used, objective, init_obj, portfolio, book, alpha, window_dates, **extra) -> dict:
    snap = {
        "date": day.isoformat(),
        "status": status,
        "distribution": d_new.tolist(),
        "distribution_used": d_used.tolist(),
        "objective": objective,
        "initial_objective": init_obj,
        "alpha": alpha,
        "portfolio": list(portfolio),
        "window_label_dates": [d.isoformat() for d in window_dates],
        "strategies": book.to_list(),
        "decisions": f"decisions/{day.isoformat()}.jsonl" if status == "ok" else None,
        "signal": f"signals/{day.isoformat()}.csv" if status == "ok" else None,
    }
    snap.update(extra)
    return snap


def _read_day_signal(path: Path, day: date, alpha: float) -> DailySignal:
    stocks, m, s, v = [], [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            stocks.append(row["stock"])
            m.append(float(row["m"]))
            s.append(float(row["sigma"]))
            v.append(float(row["signal"]))
    return DailySignal(day, tuple(stocks), np.array(m), np.array(s), np.array(v), alpha)


def resume(store_path: str | Path, dataset: MarketDataset, config: RunConfig | None = None, **kwargs) -> RunResult:
    """Continue the run in ``store_path``; ``config`` defaults to the stored one."""
    store = RunStore(store_path)
    if not store.snapshot_days():
        raise IncompleteStore(f"{store.root}: no snapshots to resume from")
    return run_simulation(dataset, config or store.read_config(), store_path, **kwargs)


def load_run_dataset(config: RunConfig, override: str | Path | None = None) -> MarketDataset:
    root = override or config.dataset or os.environ.get("MASS_DATA_DIR")
    if not root:
        raise ConfigurationError("no dataset path: set 'dataset' in the config or MASS_DATA_DIR")
    return load_dataset(root)


# --------------------------------------------------------------------------- sweep


@dataclass(frozen=True)
class SweepRow:
    n_agents: int
    n_type: int
    n_inv: int
    mean_ric: float
    ricir: float
    status: str


def counts_to_shapes(counts: Sequence[int], base_n_type: int) -> list[tuple[int, int]]:
    """Total agent counts to (n_type, n_inv); types fixed at ``base_n_type``
    while the count allows it, instances scale."""
    shapes = []
    for n in counts:
        if n < 1:
            raise ConfigurationError(f"agent count must be positive, got {n}")
        n_type = min(base_n_type, n)
        if n % n_type:
            raise ConfigurationError(f"agent count {n} is not a multiple of n_type={n_type}")
        shapes.append((n_type, n // n_type))
    return shapes


def scaling_sweep(
    dataset: MarketDataset,
    base: RunConfig,
    counts: Sequence[int | tuple[int, int]],
    out: str | Path,
) -> list[SweepRow]:
    """One run per agent count (shared seed), reporting mean RIC per count.

    Failed runs are reported with NaN metrics and ``status='failed'``.
    """
    shapes = [c if isinstance(c, tuple) else None for c in counts]
    ints = [c for c in counts if not isinstance(c, tuple)]
    mapped = iter(counts_to_shapes(ints, base.n_type))
    shapes = [s if s is not None else next(mapped) for s in shapes]
    totals = [a * b for a, b in shapes]
    if totals != sorted(totals):
        raise ConfigurationError("agent counts must be ascending")
    rows = []
    out = Path(out)
    for n_type, n_inv in shapes:
        n = n_type * n_inv
        subsets = base.feature_subsets
        if subsets is not None and len(subsets) != n_type:
            subsets = tuple(subsets[i % len(subsets)] for i in range(n_type))
        cfg = replace(base, n_type=n_type, n_inv=n_inv, feature_subsets=subsets)
        try:
            res = run_simulation(dataset, cfg, out / f"N{n}")
            rep = res.report
            rows.append(SweepRow(n, n_type, n_inv, rep.mean_ric, rep.ricir, "ok" if not res.failed_days else "partial"))
        except Exception as exc:  # a failed count must not sink the sweep
            logger.error("sweep run N=%d failed: %s", n, exc)
            rows.append(SweepRow(n, n_type, n_inv, math.nan, math.nan, "failed"))
        logger.info("N=%d mean RIC=%.4f", n, rows[-1].mean_ric)
    write_sweep(rows, out / "sweep.csv")
    return rows


def write_sweep(rows: Sequence[SweepRow], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["n_agents", "n_type", "n_inv", "mean_ric", "ricir", "log2_n", "status"])
        for r in rows:
            w.writerow([r.n_agents, r.n_type, r.n_inv, repr(r.mean_ric), repr(r.ricir), repr(math.log2(r.n_agents)), r.status])
