"""Multi-agent scaling simulation engine for portfolio construction."""
from .aggregation import DailySignal, TypeDistribution, aggregate, rank_stocks, top_k_portfolio
from .backtest import BacktestConfig, BacktestResult, run_backtest
from .dataset import MarketDataset, compute_labels, load_dataset
from .engine import Ablations, RunConfig, resume, run_simulation, scaling_sweep
from .metrics import factor_report, pearson, spearman
from .optimizer import AnnealConfig, OptimizationWindow, optimize_distribution

__version__ = "0.1.0"

__all__ = [
    "Ablations",
    "AnnealConfig",
    "BacktestConfig",
    "BacktestResult",
    "DailySignal",
    "MarketDataset",
    "OptimizationWindow",
    "RunConfig",
    "TypeDistribution",
    "aggregate",
    "compute_labels",
    "factor_report",
    "load_dataset",
    "optimize_distribution",
    "pearson",
    "rank_stocks",
    "resume",
    "run_backtest",
    "run_simulation",
    "scaling_sweep",
    "spearman",
    "top_k_portfolio",
]
