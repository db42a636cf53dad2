"""Recorded gateway fixtures and a scripted transport for tests."""
from __future__ import annotations

import csv
import io
from datetime import date
from pathlib import Path

import numpy as np

from mass_engine.agents import AgentStyle, SelectionRequest
from mass_engine.llm_gateway import PromptBundle, ProviderConfig

FIXTURES = Path(__file__).parent / "fixtures" / "gateway"
WORKED_PICKS = ["000858", "600900", "601288"]


def fixture(name: str) -> str:
    return (FIXTURES / f"{name}.txt").read_text(encoding="utf-8")


def worked_example_request() -> SelectionRequest:
    """The bundled worked example's 8-stock table as a selection request."""
    text = PromptBundle.default().decision_examples
    lines = [ln for ln in text.splitlines() if ln.startswith("Stock,") or ln[:6].isdigit()]
    rows = list(csv.reader(io.StringIO("\n".join(lines))))
    header, body = rows[0], rows[1:]
    columns = tuple(header[2:])
    style = AgentStyle(
        outline="Value investor.",
        risk_appetite="moderately conservative",
        holding_period="more than one year",
        strategy_consistency=0.85,
        rationality=0.9,
        pool_selector="MVEqual",
    )
    return SelectionRequest(
        date=date(2019, 1, 2),
        type_index=0,
        instance_index=0,
        strategy="Prefer cheap, cash-generative stocks.",
        style=style,
        stocks=tuple(r[0] for r in body),
        columns=columns,
        features=np.array([[float(x) for x in r[2:]] for r in body]),
        descriptions={c: f"{c} factor" for c in columns},
        texts={},
        num_stocks=3,
        seed=0,
    )


CFG = ProviderConfig(endpoint_url="http://localhost:9/v1", model_name="test-model")


class ScriptedTransport:
    """Plays back queued answers and records what was asked."""

    def __init__(self, *answers: str):
        self.answers = list(answers)
        self.requests: list[tuple[list[dict], float, str]] = []

    def complete(self, messages, temperature, tag=""):
        self.requests.append((messages, temperature, tag))
        if not self.answers:
            raise AssertionError("transport called more often than scripted")
        return self.answers.pop(0)
