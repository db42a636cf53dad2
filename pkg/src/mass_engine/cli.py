"""Command-line entry point: ``mass-engine <command> --config FILE --out DIR``.

Exit codes: 0 success, 1 user error (bad flags, config or data), 2 runtime
failure (provider errors, incomplete run store).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backtest import BacktestConfig, run_backtest, write_curves, write_trades
from .dataset import compute_labels, load_dataset
from .engine import DayResult, RunConfig, RunStore, load_run_dataset, run_simulation, scaling_sweep
from .errors import ConfigMismatch, ConfigurationError, DataLoadError, IncompleteStore, MassError
from .metrics import factor_report

logger = logging.getLogger(__name__)

DEFAULT_COUNTS = "16,32,64,128,256,512"


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # unknown or malformed flags are user errors
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- config


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key=value`` overrides; dotted keys address sections."""
    out = json.loads(json.dumps(raw, default=str))
    for item in overrides:
        if "=" not in item:
            raise UserError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UserError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(value.strip())
    return out


def read_config_file(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    if not p.exists():
        raise UserError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise UserError(f"{p}: {exc}") from None
    return raw, p.resolve().parent


def build_run_config(raw: dict, base_dir: Path) -> tuple[RunConfig, BacktestConfig]:
    raw = dict(raw)
    bt_raw = raw.pop("backtest", {})
    if raw.get("dataset"):
        raw["dataset"] = str((base_dir / raw["dataset"]).resolve())
    if raw.get("replay_from"):
        raw["replay_from"] = str((base_dir / raw["replay_from"]).resolve())
    try:
        cfg = RunConfig.from_dict(raw)
        bt = BacktestConfig(**bt_raw)
    except TypeError as exc:
        raise UserError(f"config: {exc}") from None
    except (ConfigurationError, ValueError) as exc:
        raise UserError(f"config: {exc}") from None
    return cfg, bt


# --------------------------------------------------------------------------- commands


def _print_day(r: DayResult) -> None:
    if r.status != "ok":
        print(f"{r.date}  FAILED")
        return
    obj = "   (warm-up)" if r.objective is None else f"{r.objective:+.4f}"
    w = r.distribution.weights
    top = sorted(range(w.size), key=lambda i: (-w[i], i))[:5]
    print(f"{r.date}  objective {obj}  top types " + " ".join(f"{i}:{w[i]:.3f}" for i in top))


def cmd_run(args) -> int:
    raw, base = read_config_file(args.config)
    raw = apply_overrides(raw, args.set or [])
    if args.dataset:
        raw["dataset"] = str(Path(args.dataset).resolve())
    cfg, _ = build_run_config(raw, base)
    if args.out is None:
        raise UserError("--out is required")
    dataset = load_run_dataset(cfg)
    res = run_simulation(dataset, cfg, args.out, on_day=_print_day, max_days=args.max_days)
    print(res.report.render())
    if res.failed_days:
        print(f"failed days: {', '.join(d.isoformat() for d in res.failed_days)}")
    return 0


def cmd_resume(args) -> int:
    if args.out is None:
        raise UserError("--out is required")
    store = RunStore(args.out)
    if not store.exists():
        raise UserError(f"{args.out} is not a run store")
    if args.config:
        raw, base = read_config_file(args.config)
        cfg, _ = build_run_config(apply_overrides(raw, args.set or []), base)
    else:
        cfg = store.read_config()
        if args.set:
            cfg, _ = build_run_config(apply_overrides(cfg.to_dict(), args.set), Path.cwd())
    dataset = load_run_dataset(cfg)
    res = run_simulation(dataset, cfg, args.out, on_day=_print_day, max_days=args.max_days)
    print(res.report.render())
    return 0


def _backtest_config(args) -> BacktestConfig:
    raw, base = read_config_file(args.config)
    bt_raw = apply_overrides(raw.get("backtest", {}), args.set or [])
    try:
        return BacktestConfig(**bt_raw)
    except (TypeError, ValueError) as exc:
        raise UserError(f"backtest config: {exc}") from None


def cmd_backtest(args) -> int:
    if args.out is None:
        raise UserError("--out is required")
    store = RunStore(args.out)
    cfg = store.read_config()
    bt = _backtest_config(args)
    dataset = load_run_dataset(cfg, args.dataset)
    res = run_backtest(store.read_signals(), dataset, bt)
    folder = store.root / "backtest"
    folder.mkdir(exist_ok=True)
    write_curves(res, folder / "curves.csv")
    write_trades(res, folder / "trades.jsonl")
    (folder / "summary.json").write_text(json.dumps(res.summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(res.render())
    return 0


def cmd_report(args) -> int:
    if args.out is None:
        raise UserError("--out is required")
    store = RunStore(args.out)
    cfg = store.read_config()
    signals = store.read_signals()
    dataset = load_run_dataset(cfg, args.dataset)
    report = factor_report(signals, compute_labels(dataset))
    folder = store.root / "report"
    folder.mkdir(exist_ok=True)
    lines = [report.render()]
    (folder / "metrics.jsonl").write_text(report.to_jsonl(), encoding="utf-8")

    summary = store.root / "backtest" / "summary.json"
    if summary.exists():
        s = json.loads(summary.read_text(encoding="utf-8"))
        lines.append("")
        lines.append("backtest " + "  ".join(f"{k} {100 * v if k != 'Sharpe' else v:.2f}" for k, v in sorted(s.items())))
        shutil.copyfile(store.root / "backtest" / "curves.csv", folder / "equity_excess.csv")

    days = store.snapshot_days()
    if days:
        with (folder / "distribution.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["date", *(f"type_{i}" for i in range(cfg.n_type))])
            for d in days:
                w.writerow([d.isoformat(), *(repr(x) for x in store.read_snapshot(d)["distribution"])])
    text = "\n".join(lines)
    (folder / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    if args.svg:
        _render_svg(folder)
    return 0


def _render_svg(folder: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        import pandas as pd
    except ImportError:
        logger.warning("matplotlib not installed; skipping SVG rendering")
        return
    dist = folder / "distribution.csv"
    if dist.exists():
        df = pd.read_csv(dist, parse_dates=["date"]).set_index("date")
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.stackplot(df.index, df.T.values, labels=df.columns)
        ax.set_ylabel("type weight")
        fig.savefig(folder / "distribution.svg")
        plt.close(fig)
    curves = folder / "equity_excess.csv"
    if curves.exists():
        df = pd.read_csv(curves, parse_dates=["date"]).set_index("date")
        fig, ax = plt.subplots(figsize=(8, 4))
        df.plot(ax=ax)
        fig.savefig(folder / "equity.svg")
        plt.close(fig)


def parse_counts(text: str) -> list[int]:
    try:
        counts = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UserError(f"malformed --counts {text!r}; expected e.g. {DEFAULT_COUNTS}") from None
    if not counts or any(c < 1 for c in counts):
        raise UserError(f"malformed --counts {text!r}")
    return counts


def cmd_sweep(args) -> int:
    counts = parse_counts(args.counts)
    raw, base = read_config_file(args.config)
    cfg, _ = build_run_config(apply_overrides(raw, args.set or []), base)
    if args.out is None:
        raise UserError("--out is required")
    dataset = load_run_dataset(cfg, args.dataset)
    rows = scaling_sweep(dataset, cfg, counts, args.out)
    print(f"{'N':>6}{'RIC':>10}{'RICIR':>10}  status")
    for r in rows:
        print(f"{r.n_agents:>6}{100 * r.mean_ric:>10.2f}{100 * r.ricir:>10.2f}  {r.status}")
    return 0 if all(r.status != "failed" for r in rows) else 2


def cmd_validate(args) -> int:
    root = args.dataset
    if root is None and args.config:
        raw, base = read_config_file(args.config)
        root = str((base / raw["dataset"]).resolve()) if raw.get("dataset") else None
    if root is None:
        import os

        root = os.environ.get("MASS_DATA_DIR")
    if not root:
        raise UserError("no dataset given (--dataset, config 'dataset' or MASS_DATA_DIR)")
    ds = load_dataset(root)
    rep = ds.report.as_dict()
    text = json.dumps({"days": len(ds.days), "stocks": len(ds.stocks), **rep}, indent=2, default=str)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "validation.json").write_text(text + "\n", encoding="utf-8")
    return 0


# --------------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mass-engine", description="Multi-agent portfolio simulation engine.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="TOML run configuration")
        p.add_argument("--out", help="run store / output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
        p.add_argument("--dataset", help="dataset directory (overrides the config)")
        return p

    p = common(sub.add_parser("run", help="run a simulation"), config_required=True)
    p.add_argument("--max-days", type=int, help="stop after this many new days")
    p.set_defaults(func=cmd_run)
    p = common(sub.add_parser("resume", help="continue an interrupted run"))
    p.add_argument("--max-days", type=int, help="stop after this many new days")
    p.set_defaults(func=cmd_resume)
    common(sub.add_parser("backtest", help="backtest a run's signals")).set_defaults(func=cmd_backtest)
    p = common(sub.add_parser("report", help="factor metrics and plot data for a run"))
    p.add_argument("--svg", action="store_true", help="also render SVG charts (needs matplotlib)")
    p.set_defaults(func=cmd_report)
    p = common(sub.add_parser("sweep", help="agent-count scaling sweep"), config_required=True)
    p.add_argument("--counts", default=DEFAULT_COUNTS, help=f"total agent counts (default {DEFAULT_COUNTS})")
    p.set_defaults(func=cmd_sweep)
    common(sub.add_parser("validate-data", help="load a dataset and report problems")).set_defaults(func=cmd_validate)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, ConfigurationError, ConfigMismatch, DataLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except IncompleteStore as exc:
        print(f"error: incomplete run store: {exc}", file=sys.stderr)
        return 2
    except MassError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
