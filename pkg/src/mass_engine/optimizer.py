"""Backward optimization of the agent-type distribution.

Simulated annealing over the probability simplex. The objective replays
cached decision matrices over a look-back window under a candidate
distribution and scores the resulting signals against realized returns by
mean daily rank correlation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregation import TypeDistribution
from .metrics import MIN_CROSS_SECTION, rankdata


@dataclass(frozen=True)
class AnnealConfig:
    initial_temperature: float = 40.0
    max_iterations: int = 100
    cooling_rate: float = 0.95
    step_scale: float = 1.0
    seed: int = 0
    similarity: str = "rank"
    # objective differences are scored in percentage points (RIC x 100),
    # the unit in which a starting temperature of 40 is meaningful
    acceptance_scale: float = 100.0

    def __post_init__(self) -> None:
        if not self.initial_temperature > 0:
            raise ValueError("initial_temperature must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if not 0 < self.cooling_rate < 1:
            raise ValueError("cooling_rate must lie in (0, 1)")
        if not self.step_scale > 0:
            raise ValueError("step_scale must be positive")
        if not self.acceptance_scale > 0:
            raise ValueError("acceptance_scale must be positive")
        if self.similarity not in ("rank", "pearson"):
            raise ValueError("similarity must be 'rank' or 'pearson'")


@dataclass(frozen=True, eq=False)
class WindowDay:
    date: date
    V: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class OptimizationWindow:
    """Cached decision matrices paired with their realized labels.

    Construct only from days whose labels are already available; the engine
    assembles windows from days strictly before the current one.
    """

    days: tuple[WindowDay, ...] = ()

    def __len__(self) -> int:
        return len(self.days)

    @property
    def label_dates(self) -> tuple[date, ...]:
        return tuple(day.date for day in self.days)

    @property
    def n_type(self) -> int:
        return self.days[0].V.shape[0] if self.days else 0


class _Prepared:
    """Masked, pre-ranked and centered labels for fast repeated evaluation.

    Days are grouped by labeled-stock count so each group is scored with a
    single batched aggregation.
    """

    def __init__(self, window: OptimizationWindow, similarity: str):
        self.rank = similarity == "rank"
        groups: dict[int, list[tuple[np.ndarray, np.ndarray, float]]] = {}
        for day in window.days:
            mask = ~np.isnan(day.labels)
            if mask.sum() < MIN_CROSS_SECTION:
                continue
            y = day.labels[mask]
            y = rankdata(y) if self.rank else y
            dy = y - y.mean()
            syy = float(dy @ dy)
            if syy == 0.0:
                continue
            groups.setdefault(int(mask.sum()), []).append((day.V[:, mask], dy, syy))
        self.batches = [
            (np.stack([g[0] for g in items]), np.stack([g[1] for g in items]), np.array([g[2] for g in items]))
            for _, items in sorted(groups.items())
        ]

    def __call__(self, d: np.ndarray, alpha: float) -> float:
        total, used = 0.0, 0
        for V, dy, syy in self.batches:
            m = np.einsum("k,dks->ds", d, V)
            sigma = np.sqrt(np.einsum("k,dks->ds", d, (V - m[:, None, :]) ** 2))
            sig = alpha * m - (1.0 - alpha) * sigma
            x = rankdata(sig) if self.rank else sig
            dx = x - x.mean(axis=1, keepdims=True)
            sxx = np.einsum("ds,ds->d", dx, dx)
            ok = sxx > 0
            if ok.any():
                r = np.einsum("ds,ds->d", dx[ok], dy[ok]) / np.sqrt(sxx[ok] * syy[ok])
                total += float(r.sum())
                used += int(ok.sum())
        return total / used if used else 0.0


def objective(d: TypeDistribution, window: OptimizationWindow, alpha: float, similarity: str = "rank") -> float:
    """Mean daily correlation between replayed signals and labels.

    Days with fewer than three labeled stocks, constant labels or a
    constant signal are skipped; an all-skipped window scores 0.
    """
    return _Prepared(window, similarity)(d.weights, alpha)


def propose_neighbor(
    d: TypeDistribution,
    temperature: float,
    step_scale: float,
    rng: np.random.Generator,
    initial_temperature: float = 40.0,
) -> TypeDistribution:
    """Move a random amount of mass from one type to another.

    The donor is drawn among types holding mass, the recipient among the
    rest. The transfer is uniform on ``[0, step_scale * (T/T0 + 0.1)]``
    capped at the donor's mass ``d_a``, so the result stays on the simplex.
    """
    w = d.weights
    n = w.size
    if n == 1:
        return d
    donors = np.flatnonzero(w > 0)
    a = int(donors[rng.integers(donors.size)])
    b = int(rng.integers(n - 1))
    if b >= a:
        b += 1
    bound = min(w[a], step_scale * (temperature / initial_temperature + 0.1))
    delta = rng.uniform(0.0, bound)
    out = w.copy()
    out[a] = max(0.0, out[a] - delta)
    out[b] += delta
    return TypeDistribution(out)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    temperature: float
    proposal_objective: float
    accepted: bool
    best_objective: float


@dataclass
class AnnealResult:
    distribution: TypeDistribution
    objective: float
    initial_objective: float
    trace: list[TraceRow] = field(default_factory=list)


def anneal(window: OptimizationWindow, d_init: TypeDistribution, cfg: AnnealConfig, alpha: float) -> AnnealResult:
    f = _Prepared(window, cfg.similarity)
    current, cur_obj = d_init, f(d_init.weights, alpha)
    result = AnnealResult(d_init, cur_obj, cur_obj)
    if not len(window) or len(d_init) == 1:
        return result
    rng = np.random.default_rng(cfg.seed)
    temp = cfg.initial_temperature
    for it in range(cfg.max_iterations):
        cand = propose_neighbor(current, temp, cfg.step_scale, rng, cfg.initial_temperature)
        cand_obj = f(cand.weights, alpha)
        delta = (cand_obj - cur_obj) * cfg.acceptance_scale
        accepted = delta >= 0 or rng.random() < math.exp(delta / temp)
        if accepted:
            current, cur_obj = cand, cand_obj
        if cand_obj > result.objective:
            result.distribution, result.objective = cand, cand_obj
        result.trace.append(TraceRow(it, temp, cand_obj, accepted, result.objective))
        temp *= cfg.cooling_rate
    return result


def optimize_distribution(
    window: OptimizationWindow, d_init: TypeDistribution, cfg: AnnealConfig, alpha: float
) -> TypeDistribution:
    """Best distribution seen by the annealing chain (never worse than ``d_init``)."""
    return anneal(window, d_init, cfg, alpha).distribution


def write_trace(trace: Sequence[TraceRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "temperature", "proposal_objective", "accepted", "best_objective"])
        for row in trace:
            writer.writerow([row.iteration, repr(row.temperature), repr(row.proposal_objective), int(row.accepted), repr(row.best_objective)])
