"""Heterogeneous investor population: styles, candidate pools, daily decisions.

An agent *type* owns a style and a visible feature subset; each of its
``n_inv`` *instances* watches a fixed candidate pool of ``n_sel`` stocks and
picks a few of them every day through a decision provider. The fraction of a
type's instances choosing each stock forms one row of the decision matrix.
"""
from __future__ import annotations

import json
import logging
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import pandas as pd

from .dataset import FeatureSubset, MarketDataset, TextItem
from .errors import ConfigurationError, ProviderError, SelectionRejected

logger = logging.getLogger(__name__)

RISK_APPETITES = (
    "conservative",
    "moderately conservative",
    "moderate",
    "moderately aggressive",
    "aggressive",
)
HOLDING_PERIODS = (
    "one day",
    "about one week",
    "about one month",
    "about half a year",
    "more than one year",
)
POOL_SELECTORS = ("Random", "IndustryEqual", "MVEqual", "IndustryBasis")


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class AgentStyle:
    outline: str
    risk_appetite: str
    holding_period: str
    strategy_consistency: float
    rationality: float
    pool_selector: str = "Random"
    industries: tuple[str, ...] = ()
    others: str = ""

    def __post_init__(self) -> None:
        if self.risk_appetite not in RISK_APPETITES:
            raise ValueError(f"unknown risk appetite {self.risk_appetite!r}")
        if self.holding_period not in HOLDING_PERIODS:
            raise ValueError(f"unknown holding period {self.holding_period!r}")
        for name in ("strategy_consistency", "rationality"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.pool_selector not in POOL_SELECTORS:
            raise ValueError(f"unknown pool selector {self.pool_selector!r}")
        if self.pool_selector == "IndustryBasis" and not self.industries:
            raise ValueError("IndustryBasis selector needs a non-empty industry list")

    def to_prompt_dict(self) -> dict:
        """Style in the JSON layout the prompts use."""
        selector = f"{self.pool_selector}StockSelector"
        details = {
            "Risk Appetite": self.risk_appetite,
            "Holding Period": self.holding_period,
            "Strategy Consistency": f"{self.strategy_consistency:g}",
            "Rationality": f"{self.rationality:g}",
            "StockPoolSelector": [selector, *self.industries] if self.industries else selector,
            "Others": self.others,
        }
        return {"Outline": self.outline, "Details": details}

    def to_dict(self) -> dict:
        return {
            "outline": self.outline,
            "risk_appetite": self.risk_appetite,
            "holding_period": self.holding_period,
            "strategy_consistency": self.strategy_consistency,
            "rationality": self.rationality,
            "pool_selector": self.pool_selector,
            "industries": list(self.industries),
            "others": self.others,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AgentStyle":
        return cls(**{**d, "industries": tuple(d.get("industries", ()))})


@dataclass(frozen=True)
class AgentType:
    index: int
    style: AgentStyle
    feature_subset: FeatureSubset


@dataclass(frozen=True)
class AgentInstance:
    type_index: int
    instance_index: int
    pool: tuple[str, ...]
    rng_seed: int


@dataclass(frozen=True)
class AgentPopulation:
    types: tuple[AgentType, ...]
    instances: tuple[AgentInstance, ...]
    n_inv: int
    n_sel: int
    seed: int

    @property
    def n_type(self) -> int:
        return len(self.types)

    def __len__(self) -> int:
        return len(self.instances)

    def to_dict(self) -> dict:
        return {
            "n_inv": self.n_inv,
            "n_sel": self.n_sel,
            "seed": self.seed,
            "types": [
                {
                    "index": t.index,
                    "style": t.style.to_dict(),
                    "columns": list(t.feature_subset.columns),
                    "text_kinds": list(t.feature_subset.text_kinds),
                }
                for t in self.types
            ],
            "instances": [
                {"type_index": a.type_index, "instance_index": a.instance_index, "pool": list(a.pool), "rng_seed": a.rng_seed}
                for a in self.instances
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AgentPopulation":
        types = tuple(
            AgentType(t["index"], AgentStyle.from_dict(t["style"]), FeatureSubset(tuple(t["columns"]), tuple(t["text_kinds"])))
            for t in d["types"]
        )
        instances = tuple(
            AgentInstance(a["type_index"], a["instance_index"], tuple(a["pool"]), int(a["rng_seed"])) for a in d["instances"]
        )
        return cls(types, instances, int(d["n_inv"]), int(d["n_sel"]), int(d["seed"]))


@dataclass(frozen=True)
class DailyStrategy:
    type_index: int
    date: date
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("strategy text is empty")


@dataclass(frozen=True)
class SelectionRequest:
    """Everything a provider sees when one instance picks stocks."""

    date: date
    type_index: int
    instance_index: int
    strategy: str
    style: AgentStyle
    stocks: tuple[str, ...]
    columns: tuple[str, ...]
    features: np.ndarray
    descriptions: Mapping[str, str]
    texts: Mapping[str, tuple[TextItem, ...]]
    num_stocks: int
    seed: int
    attempt: int = 0


class DecisionProvider(Protocol):
    provider_id: str

    def generate_style(self, type_index: int, macro_narrative: str, feature_descriptions: Mapping[str, str]) -> AgentStyle: ...

    def generate_strategy(self, type_index: int, style: AgentStyle, macro_narrative: str, day: date) -> str: ...

    def select_stocks(self, request: SelectionRequest) -> list[str]: ...


# --------------------------------------------------------------------------- pools


def select_pool(
    selector: str,
    universe: Sequence[str],
    n_sel: int,
    seed: int,
    metadata: pd.DataFrame | None = None,
    industries: Sequence[str] = (),
) -> tuple[str, ...]:
    """Draw a candidate pool of ``n_sel`` stocks; returned in ascending id order."""
    universe = sorted(universe)
    if n_sel >= len(universe):
        if n_sel > len(universe):
            logger.warning("n_sel=%d exceeds universe of %d; pool is the full universe", n_sel, len(universe))
        return tuple(universe)
    rng = np.random.default_rng(seed)
    if selector == "Random":
        picked = rng.choice(len(universe), size=n_sel, replace=False)
        return tuple(sorted(universe[i] for i in picked))
    if selector in ("IndustryEqual", "IndustryBasis"):
        if metadata is None or "industry" not in metadata.columns:
            raise ConfigurationError(f"{selector} selector needs industry metadata (stocks.csv)")
        ind = metadata.reindex(universe)["industry"]
        if selector == "IndustryBasis":
            wanted = set(industries)
            cands = [s for s in universe if ind.get(s) in wanted]
            if len(cands) < n_sel:
                logger.warning(
                    "IndustryBasis(%s) has only %d stocks for a pool of %d; falling back to Random",
                    sorted(wanted), len(cands), n_sel,
                )
                return select_pool("Random", universe, n_sel, seed)
            picked = rng.choice(len(cands), size=n_sel, replace=False)
            return tuple(sorted(cands[i] for i in picked))
        groups: dict[str, list[str]] = {}
        for s in universe:
            groups.setdefault(str(ind.get(s)), []).append(s)
        order = sorted(groups)
        queues = [list(rng.permutation(groups[g])) for g in (order[i] for i in rng.permutation(len(order)))]
        out: list[str] = []
        while len(out) < n_sel:
            for q in queues:
                if q and len(out) < n_sel:
                    out.append(q.pop())
        return tuple(sorted(out))
    if selector == "MVEqual":
        if metadata is None or "market_cap" not in metadata.columns:
            raise ConfigurationError("MVEqual selector needs market_cap metadata (stocks.csv)")
        cap = metadata.reindex(universe)["market_cap"].to_numpy(dtype=float)
        if np.isnan(cap).any():
            raise ConfigurationError("MVEqual selector: market_cap missing for some stocks")
        by_cap = [universe[i] for i in np.argsort(cap, kind="mergesort")]
        buckets = [list(b) for b in np.array_split(np.array(by_cap, dtype=object), 5)]
        alloc = [n_sel // 5] * 5
        for b in range(n_sel % 5):
            alloc[4 - b] += 1  # remainder to the largest-cap buckets
        # spill allocation a small bucket cannot hold into larger-cap buckets
        for b in range(5):
            extra = alloc[b] - len(buckets[b])
            if extra > 0:
                alloc[b] -= extra
                for c in sorted(range(5), key=lambda c: (c <= b, -c)):
                    room = len(buckets[c]) - alloc[c]
                    take = min(room, extra)
                    alloc[c] += take
                    extra -= take
        out = []
        for bucket, k in zip(buckets, alloc):
            if k:
                out.extend(bucket[i] for i in rng.choice(len(bucket), size=k, replace=False))
        return tuple(sorted(out))
    raise ConfigurationError(f"unknown pool selector {selector!r}")


def draw_feature_subset(columns: Sequence[str], seed: int) -> FeatureSubset:
    """Random subset holding between 25% and 75% of the declared columns."""
    rng = np.random.default_rng(seed)
    n = len(columns)
    lo, hi = max(1, int(np.ceil(0.25 * n))), max(1, int(np.floor(0.75 * n)))
    size = int(rng.integers(lo, max(lo, hi) + 1))
    picked = sorted(rng.choice(n, size=size, replace=False))
    return FeatureSubset(tuple(columns[i] for i in picked), ("news", "report"))


def build_population(
    dataset: MarketDataset,
    n_type: int,
    n_inv: int,
    n_sel: int,
    seed: int,
    provider: DecisionProvider,
    macro_narrative: str,
    feature_subsets: Sequence[FeatureSubset] | None = None,
) -> AgentPopulation:
    if n_type < 1 or n_inv < 1 or n_sel < 1:
        raise ConfigurationError("n_type, n_inv and n_sel must all be at least 1")
    schema = dataset.schema
    if feature_subsets is not None:
        if len(feature_subsets) != n_type:
            raise ConfigurationError(f"{len(feature_subsets)} feature subsets given for {n_type} types")
        subsets = [fs.ordered(schema) for fs in feature_subsets]
        for fs in feature_subsets:
            fs.validate(schema)
    else:
        subsets = [draw_feature_subset(schema.features, derive_seed(seed, 3, i)) for i in range(n_type)]
    if n_sel > len(dataset.stocks):
        logger.warning("n_sel=%d exceeds universe of %d; pools are the full universe", n_sel, len(dataset.stocks))

    types = []
    for i in range(n_type):
        try:
            style = provider.generate_style(i, macro_narrative, schema.describe(subsets[i].columns))
        except ProviderError:
            raise
        except Exception as exc:  # provider bugs surface as build failures
            raise ProviderError(f"style generation failed for type {i}: {exc}") from exc
        types.append(AgentType(i, style, subsets[i]))

    instances = []
    for t in types:
        for k in range(n_inv):
            inst_seed = derive_seed(seed, t.index, k)
            pool = select_pool(t.style.pool_selector, dataset.stocks, n_sel, inst_seed, dataset.metadata, t.style.industries)
            instances.append(AgentInstance(t.index, k, pool, inst_seed))
    return AgentPopulation(tuple(types), tuple(instances), n_inv, n_sel, seed)


def daily_pools(population: AgentPopulation, dataset: MarketDataset, day_idx: int) -> dict[tuple[int, int], tuple[str, ...]]:
    """Re-drawn pools for the daily-update variant; deterministic per day."""
    out = {}
    for inst in population.instances:
        style = population.types[inst.type_index].style
        seed = derive_seed(inst.rng_seed, day_idx)
        out[(inst.type_index, inst.instance_index)] = select_pool(
            style.pool_selector, dataset.stocks, population.n_sel, seed, dataset.metadata, style.industries
        )
    return out


# --------------------------------------------------------------------------- strategies


class StrategyBook:
    """Per-type strategies, regenerated weekly (or daily) and cached in between."""

    def __init__(self, strategies: Sequence[DailyStrategy] = ()):
        self.current: dict[int, DailyStrategy] = {s.type_index: s for s in strategies}

    def needs_refresh(self, dataset: MarketDataset, day_idx: int, n_type: int, daily: bool) -> bool:
        if daily or len(self.current) < n_type:
            return True
        return dataset.calendar.is_week_start(day_idx)

    def to_list(self) -> list[dict]:
        return [{"type_index": s.type_index, "date": s.date.isoformat(), "text": s.text} for s in self.current.values()]

    @classmethod
    def from_list(cls, rows: Sequence[Mapping]) -> "StrategyBook":
        return cls([DailyStrategy(int(r["type_index"]), date.fromisoformat(r["date"]), r["text"]) for r in rows])


def generate_strategies(
    population: AgentPopulation,
    macro_narrative: str,
    dataset: MarketDataset,
    day_idx: int,
    provider: DecisionProvider,
    book: StrategyBook,
    daily: bool = False,
) -> list[DailyStrategy]:
    """Return today's strategy per type, calling the provider only when due.

    On a provider failure the previous strategy of that type is reused; a
    type with no previous strategy fails the day.
    """
    day = dataset.days[day_idx]
    if book.needs_refresh(dataset, day_idx, population.n_type, daily):
        for t in population.types:
            try:
                text = provider.generate_strategy(t.index, t.style, macro_narrative, day)
                book.current[t.index] = DailyStrategy(t.index, day, text)
            except Exception as exc:
                if t.index not in book.current:
                    raise ProviderError(f"no strategy available for type {t.index} on {day}: {exc}") from exc
                logger.warning("strategy refresh failed for type %d on %s; reusing previous: %s", t.index, day, exc)
    return [book.current[t.index] for t in population.types]


# --------------------------------------------------------------------------- decisions


def selection_count(n_sel: int) -> int:
    return max(1, int(np.floor(0.2 * n_sel + 0.5)))


@dataclass(frozen=True, eq=False)
class DecisionMatrix:
    """Per-type selection fractions for one day plus the raw selections."""

    date: date
    stocks: tuple[str, ...]
    values: np.ndarray
    selections: Mapping[tuple[int, int], tuple[str, ...]]
    n_inv: int
    abstained: tuple[tuple[int, int], ...] = ()
    repaired: tuple[tuple[int, int], ...] = ()

    @classmethod
    def from_selections(
        cls,
        day: date,
        stocks: Sequence[str],
        n_type: int,
        n_inv: int,
        selections: Mapping[tuple[int, int], Sequence[str]],
        **extra,
    ) -> "DecisionMatrix":
        pos = {s: j for j, s in enumerate(stocks)}
        counts = np.zeros((n_type, len(stocks)))
        for (i, _k), codes in selections.items():
            for code in set(codes):
                counts[i, pos[code]] += 1
        values = counts / n_inv
        values.setflags(write=False)
        sel = {key: tuple(v) for key, v in sorted(selections.items())}
        return cls(day, tuple(stocks), values, sel, n_inv, **extra)

    @property
    def n_type(self) -> int:
        return self.values.shape[0]

    def to_records(self, provider_id: str) -> list[dict]:
        return [
            {"date": self.date.isoformat(), "type_index": i, "instance_index": k, "selected": list(codes), "provider_id": provider_id}
            for (i, k), codes in self.selections.items()
        ]


def write_decisions(matrix: DecisionMatrix, path: str | Path, provider_id: str) -> None:
    lines = [json.dumps(rec, sort_keys=True) for rec in matrix.to_records(provider_id)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_decisions(path: str | Path, stocks: Sequence[str], n_type: int, n_inv: int) -> DecisionMatrix:
    day = None
    selections: dict[tuple[int, int], list[str]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        day = date.fromisoformat(rec["date"])
        selections[(int(rec["type_index"]), int(rec["instance_index"]))] = list(rec["selected"])
    if day is None:
        raise ValueError(f"decision cache {path} is empty")
    abstained = tuple(key for key, codes in sorted(selections.items()) if not codes)
    return DecisionMatrix.from_selections(day, stocks, n_type, n_inv, selections, abstained=abstained)


def _repair(codes: Sequence[str], pool: Sequence[str], n: int) -> list[str]:
    allowed = set(pool)
    seen: list[str] = []
    for c in codes:
        c = str(c).strip()
        if c in allowed and c not in seen:
            seen.append(c)
    return seen[:n]


def _is_legal(codes: Sequence[str], pool: Sequence[str], n: int) -> bool:
    return len(codes) == n and len(set(codes)) == n and set(codes) <= set(pool)


def execute_decisions(
    population: AgentPopulation,
    dataset: MarketDataset,
    day_idx: int,
    strategies: Sequence[DailyStrategy],
    provider: DecisionProvider,
    num_stocks: int | None = None,
    pools: Mapping[tuple[int, int], tuple[str, ...]] | None = None,
    max_workers: int = 1,
) -> DecisionMatrix:
    """Run every instance's stock selection for one day.

    Illegal or wrong-sized answers get one repair retry; what is still
    illegal is intersected with the pool and truncated in provider order.
    An instance left with nothing abstains.
    """
    day = dataset.days[day_idx]
    n = num_stocks or selection_count(population.n_sel)
    by_type = {s.type_index: s for s in strategies}
    missing = [t.index for t in population.types if t.index not in by_type]
    if missing:
        raise ProviderError(f"no strategy for type(s) {missing} on {day}")
    stock_pos = {s: j for j, s in enumerate(dataset.stocks)}
    day_feats = dataset.features[day_idx]
    col_idx = {c: j for j, c in enumerate(dataset.schema.features)}

    def run(inst: AgentInstance) -> tuple[tuple[int, int], list[str], bool]:
        t = population.types[inst.type_index]
        pool = pools[(inst.type_index, inst.instance_index)] if pools else inst.pool
        rows = [stock_pos[s] for s in pool]
        cols = [col_idx[c] for c in t.feature_subset.columns]
        texts = {}
        for s, r in zip(pool, rows):
            items = tuple(x for x in dataset.texts.get((day_idx, r), ()) if x.kind in t.feature_subset.text_kinds)
            if items:
                texts[s] = items
        req = SelectionRequest(
            date=day,
            type_index=t.index,
            instance_index=inst.instance_index,
            strategy=by_type[t.index].text,
            style=t.style,
            stocks=tuple(pool),
            columns=t.feature_subset.columns,
            features=day_feats[np.ix_(rows, cols)],
            descriptions=dataset.schema.describe(t.feature_subset.columns),
            texts=texts,
            num_stocks=min(n, len(pool)),
            seed=derive_seed(inst.rng_seed, day_idx),
        )
        key = (inst.type_index, inst.instance_index)
        try:
            codes = list(provider.select_stocks(req))
            if _is_legal(codes, pool, req.num_stocks):
                return key, codes, False
            retry = SelectionRequest(**{**req.__dict__, "attempt": 1})
            codes = list(provider.select_stocks(retry))
            if _is_legal(codes, pool, req.num_stocks):
                return key, codes, False
        except SelectionRejected as exc:
            codes = list(exc.codes)
        return key, _repair(codes, pool, req.num_stocks), True

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            results = list(ex.map(run, population.instances))
    else:
        results = [run(inst) for inst in population.instances]

    selections = {key: codes for key, codes, _ in results}
    repaired = tuple(key for key, _, fixed in results if fixed)
    abstained = tuple(key for key, codes, _ in results if not codes)
    if abstained:
        logger.warning("%d instance(s) abstained on %s", len(abstained), day)
    return DecisionMatrix.from_selections(
        day, dataset.stocks, population.n_type, population.n_inv, selections, abstained=abstained, repaired=repaired
    )


# --------------------------------------------------------------------------- deterministic provider


def _column_seed(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class DeterministicProvider:
    """Reproducible stand-in for the LLM.

    Each type scores the stocks it can see by a linear functional of their
    cross-sectionally standardized features plus Gaussian noise scaled by
    ``noise_scale * (1 - rationality)``, and picks the top scorers. Weights
    are drawn per (type, column) from the seed unless given explicitly.
    """

    provider_id = "deterministic"

    def __init__(
        self,
        seed: int = 0,
        weights: Mapping[int, Mapping[str, float]] | None = None,
        noise_scale: float = 1.0,
        rationality: float | Sequence[float] | None = None,
        selectors: Sequence[str] = ("Random",),
    ):
        self.seed = seed
        self.weights = weights
        self.noise_scale = noise_scale
        self.rationality = rationality
        self.selectors = tuple(selectors)
        self._lock = threading.Lock()
        self.calls: dict[str, int] = {"style": 0, "strategy": 0, "select": 0}

    def _count(self, kind: str) -> None:
        with self._lock:
            self.calls[kind] += 1

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())

    def generate_style(self, type_index: int, macro_narrative: str, feature_descriptions: Mapping[str, str]) -> AgentStyle:
        self._count("style")
        rng = np.random.default_rng(derive_seed(self.seed, 1, type_index))
        if self.rationality is None:
            rationality = round(float(rng.uniform(0.3, 1.0)), 2)
        elif isinstance(self.rationality, (int, float)):
            rationality = float(self.rationality)
        else:
            rationality = float(self.rationality[type_index])
        risk = RISK_APPETITES[int(rng.integers(len(RISK_APPETITES)))]
        holding = HOLDING_PERIODS[int(rng.integers(len(HOLDING_PERIODS)))]
        cols = ", ".join(feature_descriptions) or "no numeric features"
        return AgentStyle(
            outline=f"Synthetic type {type_index}: {risk} investor reading {cols}.",
            risk_appetite=risk,
            holding_period=holding,
            strategy_consistency=round(float(rng.uniform(0.3, 1.0)), 2),
            rationality=rationality,
            pool_selector=self.selectors[int(rng.integers(len(self.selectors)))],
            others="Deterministic test double.",
        )

    def generate_strategy(self, type_index: int, style: AgentStyle, macro_narrative: str, day: date) -> str:
        self._count("strategy")
        digest = zlib.crc32(macro_narrative.encode("utf-8"))
        return f"{style.outline} Plan from {day.isoformat()} under macro state {digest:08x}."

    def _weights(self, type_index: int, columns: Sequence[str]) -> np.ndarray:
        if self.weights is not None:
            w = self.weights.get(type_index, {})
            return np.array([float(w.get(c, 0.0)) for c in columns])
        return np.array(
            [np.random.default_rng(derive_seed(self.seed, 2, type_index, _column_seed(c))).standard_normal() for c in columns]
        )

    def select_stocks(self, request: SelectionRequest) -> list[str]:
        self._count("select")
        x = np.asarray(request.features, dtype=float)
        if x.size:
            with np.errstate(invalid="ignore", divide="ignore"):
                mu = np.nanmean(x, axis=0) if x.shape[0] else 0.0
                sd = np.nanstd(x, axis=0)
                z = (x - mu) / np.where(sd > 0, sd, 1.0)
            z = np.nan_to_num(z, nan=0.0)  # missing cells contribute nothing
            score = z @ self._weights(request.type_index, request.columns)
        else:
            score = np.zeros(len(request.stocks))
        rng = np.random.default_rng(request.seed)
        score = score + self.noise_scale * (1.0 - request.style.rationality) * rng.standard_normal(len(request.stocks))
        order = sorted(range(len(request.stocks)), key=lambda j: (-score[j], request.stocks[j]))
        return [request.stocks[j] for j in order[: request.num_stocks]]
