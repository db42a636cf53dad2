"""Decision provider backed by a chat-completion HTTP endpoint.

Renders the style / strategy / stock-selection prompts, talks to any
OpenAI-compatible ``/chat/completions`` endpoint, extracts and validates
the JSON answers, and retries with a repair note when they are malformed.
Responses are cached by a hash of the request body; a replay directory of
``<hash>.txt`` files makes runs hermetic.
"""
from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from datetime import date
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence
from urllib.parse import urlparse

import numpy as np

from .agents import HOLDING_PERIODS, POOL_SELECTORS, RISK_APPETITES, AgentStyle, SelectionRequest
from .dataset import MISSING_TOKEN
from .errors import ConfigurationError, ProviderError, SelectionRejected

logger = logging.getLogger(__name__)

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


@dataclass(frozen=True)
class ProviderConfig:
    endpoint_url: str
    model_name: str
    temperature: float = 0.7
    selection_temperature: float = 0.2
    max_retries: int = 1
    requests_per_minute: int = 60
    api_key_env: str = "MASS_LLM_API_KEY"
    timeout: float = 120.0
    cache_dir: str | None = None
    replay_only: bool = False

    def __post_init__(self) -> None:
        url = urlparse(self.endpoint_url)
        if url.scheme not in ("http", "https") or not url.netloc:
            raise ConfigurationError(f"endpoint_url is not a valid http(s) URL: {self.endpoint_url!r}")
        if not self.model_name:
            raise ConfigurationError("model_name is empty")
        if self.temperature < 0 or self.selection_temperature < 0:
            raise ConfigurationError("temperatures must be non-negative")
        if self.max_retries < 0:
            raise ConfigurationError("max_retries must be non-negative")
        if self.requests_per_minute <= 0:
            raise ConfigurationError("requests_per_minute must be positive")


# --------------------------------------------------------------------------- prompts


def _load(name: str) -> str:
    return resources.files("mass_engine").joinpath("prompts", name).read_text(encoding="utf-8")


def render(template: str, **values: Any) -> str:
    """Fill ``{name}`` placeholders in one pass; every placeholder must be given.

    Inserted values are not rescanned, so data containing braces is safe.
    """
    missing = sorted({m for m in _PLACEHOLDER.findall(template) if m not in values})
    if missing:
        raise ValueError(f"unfilled prompt placeholder(s): {missing}")
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), template)


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    style_template: str
    strategy_template: str
    decision_template: str
    style_examples: str
    decision_examples: str

    @classmethod
    def default(cls) -> "PromptBundle":
        return cls(
            system_text=_load("system.txt").strip(),
            style_template=_load("style.txt"),
            strategy_template=_load("strategy.txt"),
            decision_template=_load("decision.txt"),
            style_examples=_load("style_examples.txt").strip(),
            decision_examples=_load("decision_examples.txt").strip(),
        )

    def style_prompt(self, feature_descriptions: Mapping[str, str], macro_narrative: str) -> str:
        return render(
            self.style_template,
            examples=self.style_examples,
            input_data=json.dumps(dict(feature_descriptions), ensure_ascii=False),
            macro_data=macro_narrative,
        )

    def strategy_prompt(self, style: AgentStyle, macro_narrative: str, day: date) -> str:
        return render(
            self.strategy_template,
            style=json.dumps(style.to_prompt_dict(), ensure_ascii=False),
            macro_data=macro_narrative,
            date=day.isoformat(),
        )

    def decision_prompt(self, request: SelectionRequest) -> str:
        return render(
            self.decision_template,
            num_stocks=request.num_stocks,
            examples=self.decision_examples,
            input_data=decision_input(request),
        )


def _fmt(v: float) -> str:
    return MISSING_TOKEN if np.isnan(v) else repr(float(v))


def stock_table(request: SelectionRequest) -> str:
    """The pool as comma-separated rows: Stock, Date, visible columns[, News]."""
    has_text = bool(request.texts)
    header = ["Stock", "Date", *request.columns] + (["News"] if has_text else [])
    day = request.date.strftime("%Y%m%d")
    lines = [",".join(header)]
    for j, stock in enumerate(request.stocks):
        row = [stock, day, *(_fmt(v) for v in request.features[j])]
        if has_text:
            items = request.texts.get(stock, ())
            row.append(json.dumps(" | ".join(f"[{x.kind}] {x.title}: {x.summary}" for x in items), ensure_ascii=False))
        lines.append(",".join(row))
    return "\n".join(lines)


def decision_input(request: SelectionRequest) -> str:
    return "\n\n".join(
        [
            "Input Data for investing decision:",
            "1. Input Data Description:",
            json.dumps(dict(request.descriptions), ensure_ascii=False),
            "2. Investing Style:",
            json.dumps(request.style.to_prompt_dict(), ensure_ascii=False),
            "3. Investing Strategy:",
            request.strategy,
            "4. Input data:",
            stock_table(request),
            "LLM output:",
        ]
    )


# --------------------------------------------------------------------------- parsing


def _balanced_end(text: str, start: int) -> int | None:
    depth, quote, escaped = 0, None, False
    for i in range(start, len(text)):
        ch = text[i]
        if quote:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i
    return None


def extract_json(text: str) -> dict:
    """First balanced top-level object in ``text`` that parses.

    Tries strict JSON first, then a Python literal (models often answer
    with single-quoted dicts).
    """
    pos = text.find("{")
    while pos != -1:
        end = _balanced_end(text, pos)
        if end is not None:
            chunk = text[pos : end + 1]
            for parse in (json.loads, ast.literal_eval):
                try:
                    obj = parse(chunk)
                except (ValueError, SyntaxError, MemoryError, RecursionError):
                    continue
                if isinstance(obj, dict):
                    return obj
        pos = text.find("{", pos + 1)
    raise ValueError("no JSON object found in response")


class StyleParseError(ValueError):
    pass


def _get(d: Mapping, key: str):
    wanted = key.replace(" ", "").lower()
    for k, v in d.items():
        if str(k).replace(" ", "").replace("_", "").lower() == wanted:
            return v
    raise StyleParseError(f"missing key {key!r}")


def _enum(value, options: Sequence[str], name: str) -> str:
    v = " ".join(str(value).strip().lower().split())
    if v in options:
        return v
    raise StyleParseError(f"{name} {value!r} is not one of {list(options)}")


def _unit(value, name: str) -> float:
    try:
        x = float(str(value).strip())
    except ValueError:
        raise StyleParseError(f"{name} {value!r} is not a number") from None
    if not np.isfinite(x):
        raise StyleParseError(f"{name} is not finite")
    if not 0.0 <= x <= 1.0:
        logger.warning("%s %g outside [0, 1]; clamped", name, x)
        x = min(1.0, max(0.0, x))
    return x


def _selector(value) -> tuple[str, tuple[str, ...]]:
    items = list(value) if isinstance(value, (list, tuple)) else [value]
    if not items:
        raise StyleParseError("empty StockPoolSelector")
    head = str(items[0]).strip()
    name = re.sub(r"stockselector$", "", head.replace(" ", ""), flags=re.I)
    for option in POOL_SELECTORS:
        if option.lower() == name.lower():
            industries = tuple(str(x).strip() for x in items[1:] if str(x).strip())
            if option == "IndustryBasis" and not industries:
                logger.warning("IndustryBasis selector without industries; using Random")
                return "Random", ()
            return option, industries if option == "IndustryBasis" else ()
    raise StyleParseError(f"unknown StockPoolSelector {head!r}")


def parse_style(obj: Mapping) -> AgentStyle:
    details = _get(obj, "Details")
    if not isinstance(details, Mapping):
        raise StyleParseError("'Details' is not an object")
    selector, industries = _selector(_get(details, "StockPoolSelector"))
    try:
        others = str(_get(details, "Others"))
    except StyleParseError:
        others = ""
    return AgentStyle(
        outline=str(_get(obj, "Outline")).strip(),
        risk_appetite=_enum(_get(details, "Risk Appetite"), RISK_APPETITES, "Risk Appetite"),
        holding_period=_enum(_get(details, "Holding Period"), HOLDING_PERIODS, "Holding Period"),
        strategy_consistency=_unit(_get(details, "Strategy Consistency"), "Strategy Consistency"),
        rationality=_unit(_get(details, "Rationality"), "Rationality"),
        pool_selector=selector,
        industries=industries,
        others=others,
    )


def parse_selection(obj: Mapping, pool: Sequence[str]) -> list[str]:
    codes = _get(obj, "Stock")
    if not isinstance(codes, (list, tuple)):
        raise ValueError("'Stock' is not a list")
    widths = {len(p) for p in pool}
    out = []
    for c in codes:
        s = str(c).strip()
        # integer codes lose their leading zeros in JSON; restore them
        if isinstance(c, int) and len(widths) == 1:
            s = s.zfill(next(iter(widths)))
        out.append(s)
    return out


def selection_problems(codes: Sequence[str], pool: Sequence[str], num_stocks: int) -> list[str]:
    problems = []
    illegal = [c for c in codes if c not in set(pool)]
    if illegal:
        problems.append(f"codes not in the input \"Stock\" list: {illegal}")
    if len(set(codes)) != len(codes):
        problems.append("duplicate codes")
    if len(codes) != num_stocks:
        problems.append(f"{len(codes)} codes given but {num_stocks} requested")
    return problems


# --------------------------------------------------------------------------- transport


class Throttle:
    """Blocking token bucket of capacity one: admissions spaced 60/rpm apart.

    Slots are reserved under a lock, so callers are admitted in the order
    they reserved and none is lost.
    """

    def __init__(self, requests_per_minute: int, clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        self.interval = 60.0 / requests_per_minute
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = -float("inf")
        self.admitted = 0

    def acquire(self) -> float:
        with self._lock:
            now = self._clock()
            slot = max(now, self._next)
            self._next = slot + self.interval
            self.admitted += 1
        wait = slot - now
        if wait > 0:
            self._sleep(wait)
        return slot


class ChatTransport(Protocol):
    def complete(self, messages: list[dict], temperature: float, tag: str = "") -> str: ...


def request_body(model: str, messages: list[dict], temperature: float) -> dict:
    return {"model": model, "messages": messages, "temperature": temperature}


def request_hash(body: Mapping) -> str:
    canonical = json.dumps(body, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class HttpTransport:
    """POST ``{endpoint}/chat/completions`` with throttling and retry on transient errors."""

    def __init__(self, cfg: ProviderConfig, client=None, throttle: Throttle | None = None):
        import httpx

        self.cfg = cfg
        self._httpx = httpx
        self.client = client or httpx.Client(timeout=cfg.timeout)
        self.throttle = throttle or Throttle(cfg.requests_per_minute)
        self.calls = 0
        self._lock = threading.Lock()

    def _headers(self) -> dict:
        key = os.environ.get(self.cfg.api_key_env)
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, messages: list[dict], temperature: float, tag: str = "") -> str:
        url = self.cfg.endpoint_url.rstrip("/") + "/chat/completions"
        body = request_body(self.cfg.model_name, messages, temperature)
        last: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            self.throttle.acquire()
            with self._lock:
                self.calls += 1
            try:
                resp = self.client.post(url, json=body, headers=self._headers())
            except self._httpx.HTTPError as exc:
                last = exc
                logger.warning("request to %s failed (attempt %d): %s", url, attempt + 1, type(exc).__name__)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = ProviderError(f"HTTP {resp.status_code}")
                logger.warning("endpoint returned HTTP %d (attempt %d)", resp.status_code, attempt + 1)
                time.sleep(min(30.0, 2.0**attempt))
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"endpoint rejected request: HTTP {resp.status_code}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProviderError(f"malformed chat-completion response: {exc}") from exc
        raise ProviderError(f"endpoint unavailable after {self.cfg.max_retries + 1} attempt(s): {last}")


class CachedTransport:
    """Response cache keyed by request hash; ``replay_only`` forbids network use.

    ``tag`` separates otherwise identical requests that must be sampled
    independently (two instances with the same pool); it is hashed but never
    sent.
    """

    def __init__(self, model: str, cache_dir: str | Path | None, inner: ChatTransport | None = None, replay_only: bool = False):
        self.model = model
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.inner = inner
        self.replay_only = replay_only
        self.hits = 0
        self.misses = 0
        self._mem: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path | None:
        return self.cache_dir / f"{key}.txt" if self.cache_dir else None

    def complete(self, messages: list[dict], temperature: float, tag: str = "") -> str:
        body = request_body(self.model, messages, temperature)
        if tag:
            body["tag"] = tag
        key = request_hash(body)
        path = self._path(key)
        with self._lock:
            if key in self._mem:
                self.hits += 1
                return self._mem[key]
            if path is not None and path.exists():
                self.hits += 1
                text = path.read_text(encoding="utf-8")
                self._mem[key] = text
                return text
            self.misses += 1
        if self.replay_only or self.inner is None:
            raise ProviderError(f"no recorded response for request {key[:12]}")
        text = self.inner.complete(messages, temperature, tag)
        with self._lock:
            self._mem[key] = text
            if path is not None:
                tmp = path.with_suffix(".tmp")
                tmp.write_text(text, encoding="utf-8")
                tmp.replace(path)
        return text


# --------------------------------------------------------------------------- operations


def _messages(bundle: PromptBundle, user: str, repair: str | None = None) -> list[dict]:
    if repair:
        user = f"{user}\n\n{repair}"
    return [{"role": "system", "content": bundle.system_text}, {"role": "user", "content": user}]


def generate_style(
    transport: ChatTransport,
    bundle: PromptBundle,
    macro_narrative: str,
    feature_descriptions: Mapping[str, str],
    cfg: ProviderConfig,
) -> AgentStyle:
    if not macro_narrative.strip():
        raise ValueError("macro narrative is empty")
    prompt = bundle.style_prompt(feature_descriptions, macro_narrative)
    repair = None
    for attempt in range(cfg.max_retries + 1):
        text = transport.complete(_messages(bundle, prompt, repair), cfg.temperature)
        try:
            return parse_style(extract_json(text))
        except ValueError as exc:
            logger.warning("style answer rejected (attempt %d): %s", attempt + 1, exc)
            repair = (
                f"Your previous answer could not be used ({exc}). Answer again with a single JSON object "
                'with keys "Outline" and "Details", following the output format exactly.'
            )
    raise ProviderError("style generation failed: no parseable answer")


def generate_strategy(
    transport: ChatTransport, bundle: PromptBundle, style: AgentStyle, macro_narrative: str, day: date, cfg: ProviderConfig
) -> str:
    prompt = bundle.strategy_prompt(style, macro_narrative, day)
    repair = None
    for attempt in range(cfg.max_retries + 1):
        text = transport.complete(_messages(bundle, prompt, repair), cfg.temperature)
        try:
            strategy = str(_get(extract_json(text), "Strategy")).strip()
            if strategy:
                return strategy
            raise ValueError("empty strategy")
        except ValueError as exc:
            logger.warning("strategy answer rejected (attempt %d): %s", attempt + 1, exc)
            repair = 'Answer again with a single JSON object of the form {"Strategy": "..."}.'
    raise ProviderError("strategy generation failed: no parseable answer")


def select_stocks(transport: ChatTransport, bundle: PromptBundle, request: SelectionRequest, cfg: ProviderConfig) -> list[str]:
    """Codes chosen for ``request``; raises ``SelectionRejected`` with the last
    answer when it is still illegal after one repair retry."""
    pool = list(request.stocks)
    prompt = bundle.decision_prompt(request)
    repair = None
    codes: list[str] = []
    for attempt in range(2):
        tag = f"{request.type_index}/{request.instance_index}"
        text = transport.complete(_messages(bundle, prompt, repair), cfg.selection_temperature, tag)
        try:
            codes = parse_selection(extract_json(text), pool)
        except ValueError as exc:
            problems = [str(exc)]
            codes = []
        else:
            problems = selection_problems(codes, pool, request.num_stocks)
            if not problems:
                return codes
        logger.info("selection by type %d instance %d rejected: %s", request.type_index, request.instance_index, "; ".join(problems))
        repair = (
            f"Your previous answer was invalid: {'; '.join(problems)}. "
            f"The number of stock codes must be exactly {request.num_stocks}, and every code must be in the input data \"Stock\" list. "
            'Answer with a JSON object {"Stock": [...]} only.'
        )
    raise SelectionRejected(f"illegal selection after repair retry for type {request.type_index}", codes)


@dataclass
class LLMProvider:
    """``DecisionProvider`` over a chat transport (HTTP, cache or replay)."""

    cfg: ProviderConfig
    transport: ChatTransport
    bundle: PromptBundle = field(default_factory=PromptBundle.default)
    provider_id: str = "llm"

    @classmethod
    def from_config(cls, cfg: ProviderConfig) -> "LLMProvider":
        inner = None if cfg.replay_only else HttpTransport(cfg)
        transport = CachedTransport(cfg.model_name, cfg.cache_dir, inner, replay_only=cfg.replay_only)
        return cls(cfg, transport, provider_id=f"llm:{cfg.model_name}")

    def generate_style(self, type_index: int, macro_narrative: str, feature_descriptions: Mapping[str, str]) -> AgentStyle:
        # the type index is not part of the prompt; vary the request so types
        # do not all receive one cached answer
        descs = dict(feature_descriptions)
        return generate_style(self.transport, self.bundle, f"{macro_narrative}\n(Investor profile #{type_index + 1})", descs, self.cfg)

    def generate_strategy(self, type_index: int, style: AgentStyle, macro_narrative: str, day: date) -> str:
        return generate_strategy(self.transport, self.bundle, style, macro_narrative, day, self.cfg)

    def select_stocks(self, request: SelectionRequest) -> list[str]:
        return select_stocks(self.transport, self.bundle, request, self.cfg)
