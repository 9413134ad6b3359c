"""Backbone pool and chat-completion transport.

Holds the priced catalog of LLM backbones, speaks the OpenAI-compatible
chat-completions protocol over HTTP (single POST, role-tagged message
array, bearer auth from an environment variable), retries transient
failures with exponential backoff, and accounts every exchange's cost
in exact micro-currency. A deterministic mock backend stands in for
providers during tests and offline runs.
"""

from __future__ import annotations

import hashlib
import math
import os
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Sequence

import requests
import yaml

from .errors import MasforgeError, UnknownBackbone
from .money import exchange_cost_micro, to_micro

Message = dict[str, str]

DEFAULT_RETRIES = 2
DEFAULT_BACKOFF_BASE = 0.25
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class GatewayError(MasforgeError):
    pass


class DuplicateBackbone(GatewayError):
    pass


class TransportError(GatewayError):
    """Transport-level failure persisting after all retries."""


class ProviderError(GatewayError):
    """Provider answered with a non-retryable error status."""

    def __init__(self, status: int, detail: str):
        super().__init__(f"provider returned {status}: {detail}")
        self.status = status
        self.detail = detail


class BudgetExceeded(GatewayError):
    """Projected call cost exceeds the configured per-call ceiling."""


@dataclass(frozen=True)
class BackboneCard:
    """One entry of the backbone pool: endpoint, identity, and prices.

    Prices are currency per one million tokens. The description feeds
    the model-selection prompt, so it must say something.
    """

    id: str
    endpoint: str
    model_name: str
    description: str
    price_in: Decimal
    price_out: Decimal
    api_key_env: str = "OPENAI_API_KEY"

    def __post_init__(self):
        if not self.description:
            raise ValueError(f"backbone {self.id!r} needs a non-empty description")
        object.__setattr__(self, "price_in", Decimal(str(self.price_in)))
        object.__setattr__(self, "price_out", Decimal(str(self.price_out)))
        if self.price_in < 0 or self.price_out < 0:
            raise ValueError(f"backbone {self.id!r} has a negative price")

    @property
    def price_in_micro(self) -> int:
        return to_micro(self.price_in)

    @property
    def price_out_micro(self) -> int:
        return to_micro(self.price_out)

    @property
    def is_mock(self) -> bool:
        return self.endpoint.startswith("mock:")


class Catalog:
    """Registry of backbone cards; listing order is registration order."""

    def __init__(self, cards: Sequence[BackboneCard] = ()):
        self._cards: dict[str, BackboneCard] = {}
        for card in cards:
            self.register(card)

    def register(self, card: BackboneCard) -> None:
        if card.id in self._cards:
            raise DuplicateBackbone(f"backbone {card.id!r} is already registered")
        self._cards[card.id] = card

    def get(self, backbone_id: str) -> BackboneCard:
        try:
            return self._cards[backbone_id]
        except KeyError:
            raise UnknownBackbone(backbone_id) from None

    def ids(self) -> tuple[str, ...]:
        return tuple(self._cards)

    def cards(self) -> tuple[BackboneCard, ...]:
        return tuple(self._cards.values())

    def __contains__(self, backbone_id: str) -> bool:
        return backbone_id in self._cards

    def __len__(self) -> int:
        return len(self._cards)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "Catalog":
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        entries = raw.get("backbones", raw) if isinstance(raw, dict) else raw
        cards = [
            BackboneCard(
                id=e["id"],
                endpoint=e.get("endpoint", "mock://local"),
                model_name=e.get("model_name", e["id"]),
                description=e["description"],
                price_in=Decimal(str(e.get("price_in", 0))),
                price_out=Decimal(str(e.get("price_out", 0))),
                api_key_env=e.get("api_key_env", "OPENAI_API_KEY"),
            )
            for e in entries
        ]
        return cls(cards)


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.0
    max_tokens: int = 2048
    seed: int | None = None


@dataclass(frozen=True)
class ChatExchange:
    """One completed request/response with token counts and exact cost."""

    backbone_id: str
    messages: tuple[Message, ...]
    params: SamplingParams
    response_text: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: int
    cost_micro: int


def mock_token_count(text: str) -> int:
    """Deterministic stand-in tokenizer: ceil(utf-8 bytes / 4)."""
    return math.ceil(len(text.encode("utf-8")) / 4)


def _prompt_text(messages: Sequence[Message]) -> str:
    return "\n".join(m.get("content", "") for m in messages)


def cost_of(exchange: ChatExchange, catalog: Catalog) -> int:
    """Recompute an exchange's cost in micro-units from catalog prices."""
    card = catalog.get(exchange.backbone_id)
    return exchange_cost_micro(
        exchange.prompt_tokens,
        exchange.completion_tokens,
        card.price_in_micro,
        card.price_out_micro,
    )


class MockBackend:
    """Scripted or procedurally deterministic responses.

    Script entries are dicts: ``reply`` (the response text), optional
    ``when`` (substring of the prompt required to match), and optional
    ``times`` (consumption limit; omitted means once). The first live
    matching entry wins; with no match the backend echoes a digest of
    (prompt, seed), which is what makes repeated identical requests
    byte-identical.
    """

    def __init__(self, script: Sequence[dict] | None = None):
        self._lock = threading.Lock()
        self._entries = [dict(e) for e in (script or [])]
        for entry in self._entries:
            entry.setdefault("times", 1)

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        entries = raw.get("responses", raw) if isinstance(raw, dict) else raw
        return cls(entries or [])

    def respond(self, backbone_id: str, messages: Sequence[Message],
                params: SamplingParams) -> str:
        prompt = _prompt_text(messages)
        with self._lock:
            for entry in self._entries:
                times = entry.get("times")
                if times is not None and times <= 0:
                    continue
                when = entry.get("when")
                if when is not None and when not in prompt:
                    continue
                if times is not None:
                    entry["times"] = times - 1
                return str(entry["reply"])
        digest = hashlib.sha256(
            f"{backbone_id}\x00{prompt}\x00{params.seed}".encode("utf-8")
        ).hexdigest()
        return f"mock-reply-{digest[:16]}"


Transport = Callable[[str, dict, dict, float], tuple[int, dict]]


def _http_transport(url: str, payload: dict, headers: dict, timeout: float) -> tuple[int, dict]:
    response = requests.post(url, json=payload, headers=headers, timeout=timeout)
    try:
        body = response.json()
    except ValueError:
        body = {"error": {"message": response.text[:500]}}
    return response.status_code, body


@dataclass
class Gateway:
    """Chat-completion front door with retries and cost accounting.

    Safe for concurrent ``complete`` calls: the catalog is read-only
    after setup and the mock backend locks its script. Cost aggregation
    across calls is the caller's job.
    """

    catalog: Catalog
    mock: MockBackend | None = None
    force_mock: bool = False
    retries: int = DEFAULT_RETRIES
    backoff_base: float = DEFAULT_BACKOFF_BASE
    timeout: float = 120.0
    call_cost_ceiling_micro: int | None = None
    transport: Transport = field(default=_http_transport, repr=False)
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)

    def complete(
        self,
        backbone_id: str,
        messages: Sequence[Message],
        params: SamplingParams = SamplingParams(),
    ) -> ChatExchange:
        if not messages:
            raise GatewayError("messages must be non-empty")
        card = self.catalog.get(backbone_id)
        prompt = _prompt_text(messages)
        self._check_ceiling(card, prompt, params)

        if self.force_mock or card.is_mock:
            backend = self.mock or MockBackend()
            text = backend.respond(backbone_id, messages, params)
            return self._build_exchange(card, messages, params, text,
                                        prompt_tokens=mock_token_count(prompt),
                                        completion_tokens=mock_token_count(text),
                                        latency_ms=0)
        return self._complete_http(card, messages, params, prompt)

    def _check_ceiling(self, card: BackboneCard, prompt: str,
                       params: SamplingParams) -> None:
        ceiling = self.call_cost_ceiling_micro
        if ceiling is None:
            return
        projected = exchange_cost_micro(
            mock_token_count(prompt), params.max_tokens,
            card.price_in_micro, card.price_out_micro,
        )
        if projected > ceiling:
            raise BudgetExceeded(
                f"projected call cost {projected} exceeds ceiling {ceiling} "
                f"(micro-units, backbone {card.id!r})"
            )

    def _complete_http(self, card: BackboneCard, messages: Sequence[Message],
                       params: SamplingParams, prompt: str) -> ChatExchange:
        url = card.endpoint.rstrip("/") + "/chat/completions"
        payload: dict = {
            "model": card.model_name,
            "messages": list(messages),
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if params.seed is not None:
            payload["seed"] = params.seed
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(card.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        last_error: str = ""
        for attempt in range(1 + self.retries):
            if attempt:
                self.sleep(self.backoff_base * (2 ** (attempt - 1)))
            started = time.monotonic()
            try:
                status, body = self.transport(url, payload, headers, self.timeout)
            except requests.RequestException as exc:
                last_error = str(exc)
                continue
            latency_ms = int((time.monotonic() - started) * 1000)
            if status in RETRYABLE_STATUS:
                last_error = f"HTTP {status}"
                continue
            if not 200 <= status < 300:
                detail = ""
                if isinstance(body, dict):
                    err = body.get("error")
                    detail = err.get("message", "") if isinstance(err, dict) else str(err)
                raise ProviderError(status, detail)
            return self._parse_response(card, messages, params, prompt, body, latency_ms)
        raise TransportError(
            f"gave up after {1 + self.retries} attempts against {card.id!r}: {last_error}"
        )

    def _parse_response(self, card: BackboneCard, messages: Sequence[Message],
                        params: SamplingParams, prompt: str, body: dict,
                        latency_ms: int) -> ChatExchange:
        try:
            text = body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(200, f"malformed completion body: {exc}") from exc
        usage = body.get("usage") or {}
        prompt_tokens = int(usage.get("prompt_tokens", mock_token_count(prompt)))
        completion_tokens = int(usage.get("completion_tokens", mock_token_count(text)))
        return self._build_exchange(card, messages, params, text,
                                    prompt_tokens, completion_tokens, latency_ms)

    def _build_exchange(self, card: BackboneCard, messages: Sequence[Message],
                        params: SamplingParams, text: str, prompt_tokens: int,
                        completion_tokens: int, latency_ms: int) -> ChatExchange:
        cost = exchange_cost_micro(prompt_tokens, completion_tokens,
                                   card.price_in_micro, card.price_out_micro)
        return ChatExchange(
            backbone_id=card.id,
            messages=tuple(dict(m) for m in messages),
            params=params,
            response_text=text,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            latency_ms=latency_ms,
            cost_micro=cost,
        )


def register_backbone(catalog: Catalog, card: BackboneCard) -> Catalog:
    """Add a card to the catalog and hand the catalog back."""
    catalog.register(card)
    return catalog


def seed_pool_cards(endpoint: str = "https://openrouter.ai/api/v1",
                    api_key_env: str = "OPENROUTER_API_KEY") -> list[BackboneCard]:
    """Default five-member backbone pool offered to the model selector.

    Prices are configuration defaults, not ground truth; override them
    in the catalog file for real accounting.
    """
    specs = [
        ("gpt-4o", "openai/gpt-4o", "2.5", "10",
         "GPT-4o is OpenAI's flagship multimodal model, offering exceptional "
         "performance in complex reasoning, including mathematical proofs and "
         "multi-step derivations. Its long-context capabilities make it ideal "
         "for high-precision evaluations."),
        ("gpt-4o-mini", "openai/gpt-4o-mini", "0.15", "0.6",
         "GPT-4o Mini is a smaller, faster variant of OpenAI's GPT-4o "
         "multimodal model. It's optimized for lower latency and is best "
         "suited for lightweight tasks or when speed is prioritized over peak "
         "performance."),
        ("qwen/qwen-2.5-72b-instruct", "qwen/qwen-2.5-72b-instruct", "0.35", "0.4",
         "This is a 72-billion-parameter instruction-tuned model that excels "
         "in advanced mathematical reasoning, theorem verification, and "
         "long-form derivations. It's one of the most powerful open-source "
         "models for high-stakes reasoning tasks."),
        ("qwen/qwen3-14b", "qwen/qwen3-14b", "0.08", "0.24",
         "A mid-sized general model with solid instruction following; a good "
         "budget default for drafting, summarizing, and routine generation."),
        ("qwen/qwq-32b", "qwen/qwq-32b", "0.15", "0.2",
         "This is a medium-sized, reasoning-optimized model from Qwen that is "
         "strong at step-by-step multi-hop reasoning and QA."),
    ]
    return [
        BackboneCard(id=bid, endpoint=endpoint, model_name=model,
                     description=desc, price_in=Decimal(pin), price_out=Decimal(pout),
                     api_key_env=api_key_env)
        for bid, model, pin, pout, desc in specs
    ]


def seed_meta_card(endpoint: str = "https://openrouter.ai/api/v1",
                   api_key_env: str = "OPENROUTER_API_KEY") -> BackboneCard:
    """Default backbone shared by the three meta-agents."""
    return BackboneCard(
        id="qwen/qwen3-8b",
        endpoint=endpoint,
        model_name="qwen/qwen3-8b",
        description="Compact reasoning model used to draft, configure, and "
                    "repair workflows.",
        price_in=Decimal("0.035"),
        price_out=Decimal("0.138"),
        api_key_env=api_key_env,
    )


def dump_catalog_yaml(cards: Sequence[BackboneCard]) -> str:
    entries = [
        {
            "id": c.id,
            "endpoint": c.endpoint,
            "model_name": c.model_name,
            "description": c.description,
            "price_in": str(c.price_in),
            "price_out": str(c.price_out),
            "api_key_env": c.api_key_env,
        }
        for c in cards
    ]
    return yaml.safe_dump({"backbones": entries}, sort_keys=False)

