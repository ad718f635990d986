"""Agents with replayed memory and the keyword -> aggregate -> caption pipeline."""
from __future__ import annotations

import re
import string
import threading
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

from ..errors import CapabilityError, ConfigError, DomainError, ParseError, PipelineError
from .messages import DETAILS, ChatMessage, Conversation, ImagePart
from .pricing import PriceTable, TokenLedger
from .providers import ChatProvider, parse_completion

AGGREGATE_SOURCE = "aggregate"

ProviderFactory = Callable[[str], ChatProvider]


# ---------------------------------------------------------------------------
# prompt templates


class PromptTemplates:
    """Named text templates with strictly checked ``{placeholder}`` fields."""

    def __init__(self, templates: dict[str, str]):
        self.templates = dict(templates)

    @classmethod
    def load(cls, directory=None) -> "PromptTemplates":
        if directory is None:
            root = resources.files("buildscope.data").joinpath("prompts")
            entries = [p for p in root.iterdir() if p.name.endswith(".txt")]
        else:
            directory = Path(directory)
            if not directory.is_dir():
                raise ConfigError(f"prompt directory {directory} does not exist")
            entries = list(directory.glob("*.txt"))
        return cls({p.name[:-4]: p.read_text().rstrip("\n") for p in entries})

    def fields(self, name: str) -> set[str]:
        return {f for _, f, _, _ in string.Formatter().parse(self.get(name)) if f}

    def get(self, name: str) -> str:
        try:
            return self.templates[name]
        except KeyError:
            raise ConfigError(f"no prompt template named {name!r}") from None

    def render(self, name: str, **values) -> str:
        want = self.fields(name)
        if want != set(values):
            raise ConfigError(f"template {name!r} takes {sorted(want)}, got {sorted(values)}")
        return self.get(name).format(**values)


_default_templates: PromptTemplates | None = None


def default_templates() -> PromptTemplates:
    global _default_templates
    if _default_templates is None:
        _default_templates = PromptTemplates.load()
    return _default_templates


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    model_id: str
    system_prompt: str = ""
    sampling: dict = field(default_factory=dict)
    image_detail: str = "high"

    def __post_init__(self):
        if self.image_detail not in DETAILS:
            raise ConfigError(f"image_detail must be one of {DETAILS}")
        reserved = {"model", "messages"} & set(self.sampling)
        if reserved:
            raise ConfigError(f"sampling may not override {sorted(reserved)}")


@dataclass(frozen=True)
class KeywordSet:
    source_asset: str
    keywords: tuple[str, ...]

    def __post_init__(self):
        kws = tuple(self.keywords)
        object.__setattr__(self, "keywords", kws)
        if any(not k or k != k.lower() for k in kws):
            raise DomainError("keywords must be non-empty lowercase strings")
        if len(set(kws)) != len(kws):
            raise DomainError("keywords must be unique")

    def __len__(self):
        return len(self.keywords)

    def to_dict(self) -> dict:
        return {"source_asset": self.source_asset, "keywords": list(self.keywords)}

    @classmethod
    def from_dict(cls, doc: dict) -> "KeywordSet":
        return cls(doc["source_asset"], tuple(doc["keywords"]))


@dataclass(frozen=True)
class Caption:
    text: str
    contributing_keywords: KeywordSet
    model_id: str
    iteration: int = 0

    def __post_init__(self):
        if not self.text.strip():
            raise DomainError("caption text is empty")

    def to_dict(self) -> dict:
        return {"text": self.text, "contributing_keywords": self.contributing_keywords.to_dict(),
                "model_id": self.model_id, "iteration": self.iteration}

    @classmethod
    def from_dict(cls, doc: dict) -> "Caption":
        return cls(doc["text"], KeywordSet.from_dict(doc["contributing_keywords"]),
                   doc["model_id"], doc["iteration"])


@dataclass(frozen=True)
class ModelConfig:
    """Model assignment per pipeline stage."""

    label: str
    keyword_model: str = "gpt-4o"
    aggregate_model: str = "gpt-4o-mini"
    caption_model: str = "gpt-4o-mini"
    image_detail: str = "high"
    sampling: dict = field(default_factory=dict)

    @classmethod
    def single(cls, model_id: str, keyword_model: str = "gpt-4o", **kw) -> "ModelConfig":
        """The experiment layout: a fixed keyword model, ``model_id`` for the rest."""
        return cls(model_id, keyword_model, model_id, model_id, **kw)

    def to_dict(self) -> dict:
        return {"label": self.label, "keyword_model": self.keyword_model,
                "aggregate_model": self.aggregate_model, "caption_model": self.caption_model,
                "image_detail": self.image_detail, "sampling": dict(self.sampling)}

    @classmethod
    def from_dict(cls, doc) -> "ModelConfig":
        if isinstance(doc, str):
            return cls.single(doc)
        doc = dict(doc)
        if "model" in doc:
            model = doc.pop("model")
            doc.setdefault("label", model)
            doc.setdefault("aggregate_model", model)
            doc.setdefault("caption_model", model)
        unknown = set(doc) - {"label", "keyword_model", "aggregate_model", "caption_model",
                              "image_detail", "sampling"}
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        if "label" not in doc:
            doc["label"] = doc.get("caption_model", "model")
        return cls(**doc)


STUDY_MODELS = ("gpt-4o-mini", "chatgpt-4o-latest", "deepseek-chat", "deepseek-reasoner")


def study_model_configs() -> list[ModelConfig]:
    return [ModelConfig.single(m) for m in STUDY_MODELS]


# ---------------------------------------------------------------------------
# agents


class Agent:
    """An LLM actor with its own provider client and conversation memory.

    Providers are stateless, so every ``send`` replays the whole stored
    conversation followed by the new user message.
    """

    def __init__(self, spec: AgentSpec, provider: ChatProvider, prices: PriceTable,
                 ledger: TokenLedger):
        self.spec = spec
        self.provider = provider
        self.price = prices.get(spec.model_id)
        self.model_id = prices.resolve(spec.model_id)
        self.ledger = ledger
        msgs = [ChatMessage.text("system", spec.system_prompt)] if spec.system_prompt else []
        self.conversation = Conversation(spec.agent_id, msgs)
        self.calls = 0
        self._lock = threading.Lock()

    def __repr__(self):
        return f"Agent({self.spec.agent_id!r}, {self.model_id!r}, {len(self.conversation)} messages)"

    @property
    def agent_id(self) -> str:
        return self.spec.agent_id

    def request_for(self, message: ChatMessage) -> dict:
        req = {"model": self.model_id,
               "messages": self.conversation.to_wire() + [message.to_wire()]}
        req.update(self.spec.sampling)
        return req

    def send(self, message: ChatMessage) -> ChatMessage:
        if message.role != "user":
            raise DomainError("only user messages can be sent to an agent")
        with self._lock:
            doc = self.provider.complete(self.request_for(message))
            self.calls += 1
            text, usage = parse_completion(doc)
            self.ledger.add(self.model_id, usage["input_tokens"], usage["cached_input_tokens"],
                            usage["output_tokens"])
            reply = ChatMessage.text("assistant", text).with_tokens(usage["output_tokens"])
            self.conversation.append_exchange(
                message.with_tokens(usage["input_tokens"] + usage["cached_input_tokens"]), reply)
        return reply

    def ask(self, text: str) -> str:
        return self.send(ChatMessage.user(text)).content_text


def new_agent(spec: AgentSpec, provider_factory: ProviderFactory, prices: PriceTable,
              ledger: TokenLedger | None = None) -> Agent:
    """Create an agent with a dedicated provider instance."""
    if spec.model_id not in prices:
        raise ConfigError(f"model {spec.model_id!r} is not in the price table")
    provider = provider_factory(prices.resolve(spec.model_id))
    return Agent(spec, provider, prices, ledger if ledger is not None else TokenLedger())


def derive_system_prompt(author: Agent, role_description: str,
                         templates: PromptTemplates | None = None) -> str:
    """Have ``author`` write the system prompt for an agent with the given role."""
    templates = templates or default_templates()
    reply = author.ask(templates.render("system_prompt_request", role=role_description))
    if not reply.strip():
        raise ParseError("derived system prompt is empty", reply)
    return reply


# ---------------------------------------------------------------------------
# pipeline stages

_BULLET = re.compile(r"^(?:[-*•]+|\d+[.)])\s*")


def parse_keywords(text: str) -> tuple[str, ...]:
    """Split on commas, semicolons and newlines; trim, lowercase, dedupe in order."""
    out: list[str] = []
    for piece in re.split(r"[,;\n]", text):
        word = _BULLET.sub("", piece.strip()).strip().strip(".").strip().lower()
        if word and word not in out:
            out.append(word)
    return tuple(out)


def _require_image_support(agent: Agent):
    if agent.price.image_processing != "analysis":
        raise CapabilityError(
            f"model {agent.model_id} cannot analyze images "
            f"(image processing: {agent.price.image_processing})")


def extract_keywords(agent: Agent, image, templates: PromptTemplates | None = None) -> KeywordSet:
    """One call: the image plus the keyword instruction, parsed into a KeywordSet."""
    _require_image_support(agent)
    templates = templates or default_templates()
    msg = ChatMessage.user(templates.render("keyword_extraction"),
                           ImagePart(image.asset_id, agent.spec.image_detail))
    raw = agent.send(msg).content_text
    words = parse_keywords(raw)
    if not words:
        raise ParseError(f"no keywords in reply for {image.asset_id}", raw)
    return KeywordSet(image.asset_id, words)


def aggregate_keywords(agent: Agent, sets: Sequence[KeywordSet],
                       templates: PromptTemplates | None = None) -> KeywordSet:
    if not sets:
        raise DomainError("nothing to aggregate")
    templates = templates or default_templates()
    listing = "\n".join(", ".join(s.keywords) for s in sets)
    raw = agent.ask(templates.render("aggregate", image_count=len(sets), keywords=listing))
    words = parse_keywords(raw)
    if not words:
        raise ParseError("aggregation reply has no keywords", raw)
    return KeywordSet(AGGREGATE_SOURCE, words)


def compose_caption(agent: Agent, agg: KeywordSet, iteration: int = 0,
                    templates: PromptTemplates | None = None) -> Caption:
    if not agg.keywords:
        raise DomainError("cannot caption an empty keyword set")
    templates = templates or default_templates()
    raw = agent.ask(templates.render("caption", keywords=", ".join(agg.keywords)))
    if not raw.strip():
        raise ParseError("caption reply is empty", raw)
    return Caption(raw.strip(), agg, agent.model_id, iteration)


class CaptionRun(NamedTuple):
    caption: Caption
    keyword_sets: list[KeywordSet]
    ledger: TokenLedger


def captionable(images) -> list:
    """Images used for captioning by default: street maps are left out."""
    return [im for im in images if im.kind != "street_map"]


def caption_building(images, config: ModelConfig, provider_factory: ProviderFactory,
                     prices: PriceTable, *, templates: PromptTemplates | None = None,
                     iteration: int = 0, max_parallel: int = 8,
                     include_street_maps: bool = False) -> CaptionRun:
    """Keyword agent per image, then one aggregation agent and one caption agent.

    Any keyword failure aborts the run before aggregation, so a completed
    run always costs ``len(images) + 2`` calls.
    """
    images = list(images) if include_street_maps else captionable(images)
    if not images:
        raise DomainError("no images to caption")
    templates = templates or default_templates()
    ledger = TokenLedger()
    sys_kw = templates.get("keyword_system")

    def keyword_task(idx_image):
        idx, image = idx_image
        spec = AgentSpec(f"keyword-{idx}", config.keyword_model, sys_kw, config.sampling,
                         config.image_detail)
        return extract_keywords(new_agent(spec, provider_factory, prices, ledger), image, templates)

    # check the keyword model up front so a capability error is not a per-image failure
    if prices.get(config.keyword_model).image_processing != "analysis":
        raise CapabilityError(f"model {config.keyword_model} cannot analyze images")

    with ThreadPoolExecutor(max_workers=max(1, min(max_parallel, len(images)))) as pool:
        futures = [pool.submit(keyword_task, item) for item in enumerate(images)]
        done, pending = wait(futures, return_when=FIRST_EXCEPTION)
        for f in pending:
            f.cancel()
        wait(futures)
    sets: list[KeywordSet] = []
    for image, fut in zip(images, futures):
        if fut.cancelled():
            continue
        exc = fut.exception()
        if exc is not None:
            raise PipelineError(f"keyword extraction failed for {image.asset_id}: {exc}",
                                image.asset_id) from exc
        sets.append(fut.result())
    if len(sets) != len(images):
        raise PipelineError("keyword extraction did not complete", None)

    agg_agent = new_agent(AgentSpec("aggregate", config.aggregate_model,
                                    templates.get("aggregate_system"), config.sampling),
                          provider_factory, prices, ledger)
    agg = aggregate_keywords(agg_agent, sets, templates)
    cap_agent = new_agent(AgentSpec("caption", config.caption_model,
                                    templates.get("caption_system"), config.sampling),
                          provider_factory, prices, ledger)
    caption = compose_caption(cap_agent, agg, iteration, templates)
    return CaptionRun(caption, sets, ledger)
