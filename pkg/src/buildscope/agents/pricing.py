"""Model price table, token ledger and exact-decimal cost estimates."""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from decimal import Decimal
from importlib import resources
from pathlib import Path

from ..errors import ConfigError

IMAGE_CAPABILITIES = ("analysis", "ocr", "none")
_MILLION = Decimal(1_000_000)


@dataclass(frozen=True)
class ModelPrice:
    model_id: str
    input_usd_per_1m: Decimal
    output_usd_per_1m: Decimal
    cached_input_multiplier: Decimal = Decimal(1)
    image_processing: str = "none"
    model_class: str = ""
    model_type: str = ""

    def __post_init__(self):
        if self.input_usd_per_1m < 0 or self.output_usd_per_1m < 0:
            raise ConfigError(f"{self.model_id}: negative rate")
        if not Decimal(0) <= self.cached_input_multiplier <= Decimal(1):
            raise ConfigError(f"{self.model_id}: cached-input multiplier outside [0, 1]")
        if self.image_processing not in IMAGE_CAPABILITIES:
            raise ConfigError(f"{self.model_id}: unknown image capability {self.image_processing!r}")


class PriceTable:
    def __init__(self, prices: dict[str, ModelPrice], aliases: dict[str, str] | None = None,
                 compiled: str | None = None):
        self.prices = dict(prices)
        self.aliases = dict(aliases or {})
        self.compiled = compiled

    @classmethod
    def from_document(cls, doc: dict) -> "PriceTable":
        prices, aliases = {}, {}
        for model_id, row in doc["models"].items():
            prices[model_id] = ModelPrice(
                model_id,
                Decimal(str(row["input_usd_per_1m"])),
                Decimal(str(row["output_usd_per_1m"])),
                Decimal(str(row.get("cached_input_multiplier", "1"))),
                row.get("image_processing", "none"),
                row.get("model_class", ""),
                row.get("model_type", ""),
            )
            for alias in row.get("aliases", []):
                aliases[alias] = model_id
        return cls(prices, aliases, doc.get("compiled"))

    @classmethod
    def load(cls, path=None) -> "PriceTable":
        if path is None:
            text = resources.files("buildscope.data").joinpath("prices.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_document(json.loads(text))

    def resolve(self, model_id: str) -> str:
        return self.aliases.get(model_id, model_id)

    def __contains__(self, model_id):
        return self.resolve(model_id) in self.prices

    def get(self, model_id: str) -> ModelPrice:
        try:
            return self.prices[self.resolve(model_id)]
        except KeyError:
            raise ConfigError(f"model {model_id!r} is not in the price table") from None


@dataclass
class TokenCounts:
    input_tokens: int = 0
    cached_input_tokens: int = 0
    output_tokens: int = 0
    requests: int = 0


class TokenLedger:
    """Per-model token counters; increments are atomic."""

    def __init__(self, counts: dict[str, TokenCounts] | None = None):
        self._counts: dict[str, TokenCounts] = dict(counts or {})
        self._lock = threading.Lock()

    def add(self, model_id: str, input_tokens: int = 0, cached_input_tokens: int = 0,
            output_tokens: int = 0, requests: int = 1):
        if min(input_tokens, cached_input_tokens, output_tokens, requests) < 0:
            raise ValueError("token counts must be non-negative")
        with self._lock:
            c = self._counts.setdefault(model_id, TokenCounts())
            c.input_tokens += input_tokens
            c.cached_input_tokens += cached_input_tokens
            c.output_tokens += output_tokens
            c.requests += requests

    def merge(self, other: "TokenLedger"):
        for model_id, c in other.items():
            self.add(model_id, c.input_tokens, c.cached_input_tokens, c.output_tokens, c.requests)

    def __add__(self, other: "TokenLedger") -> "TokenLedger":
        out = TokenLedger()
        out.merge(self)
        out.merge(other)
        return out

    def items(self):
        with self._lock:
            return [(m, TokenCounts(**vars(c))) for m, c in sorted(self._counts.items())]

    def models(self) -> list[str]:
        return [m for m, _ in self.items()]

    def counts(self, model_id: str) -> TokenCounts:
        with self._lock:
            return TokenCounts(**vars(self._counts.get(model_id, TokenCounts())))

    @property
    def total_requests(self) -> int:
        return sum(c.requests for _, c in self.items())

    def to_dict(self) -> dict:
        return {m: vars(c) for m, c in self.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TokenLedger":
        return cls({m: TokenCounts(**c) for m, c in doc.items()})

    def __eq__(self, other):
        return isinstance(other, TokenLedger) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"TokenLedger({self.to_dict()})"


def estimate_cost(ledger: TokenLedger, prices: PriceTable) -> Decimal:
    """USD cost of a ledger, computed in exact decimal arithmetic."""
    total = Decimal(0)
    for model_id, c in ledger.items():
        p = prices.get(model_id)
        total += (Decimal(c.input_tokens) * p.input_usd_per_1m
                  + Decimal(c.cached_input_tokens) * p.input_usd_per_1m * p.cached_input_multiplier
                  + Decimal(c.output_tokens) * p.output_usd_per_1m) / _MILLION
    return total
