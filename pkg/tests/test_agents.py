import random
import threading
from decimal import Decimal

import pytest

from buildscope.agents import (AGGREGATE_SOURCE, AgentSpec, ChatMessage, Conversation,
                               EchoProvider, FailingProvider, ImagePart, KeywordSet,
                               MockChatProvider, ModelConfig, PriceTable, PromptTemplates,
                               ScriptedProvider, TokenLedger, aggregate_keywords,
                               caption_building, compose_caption, derive_system_prompt,
                               estimate_cost, extract_keywords, new_agent, parse_keywords)
from buildscope.agents.providers import (OpenAICompatibleProvider, completion_document,
                                         parse_completion)
from buildscope.errors import (CapabilityError, ConfigError, DomainError, ParseError,
                               PipelineError, TransportError)
from buildscope.transport import HttpClient, HttpResponse, RetryPolicy


@pytest.fixture(scope="module")
def prices():
    return PriceTable.load()


def factory_of(cls, journal=None, **kw):
    made = []

    def make(model_id):
        p = cls(journal=journal, **kw)
        made.append(p)
        return p

    make.made = made
    return make


# --- messages and conversations ---------------------------------------------

def test_image_parts_rejected_outside_user_role():
    with pytest.raises(DomainError):
        ChatMessage("assistant", (ImagePart("abc"),))
    with pytest.raises(DomainError):
        ChatMessage("user", ())


def test_message_wire_round_trip():
    m = ChatMessage.user("look", ImagePart("f00", "low"))
    wire = m.to_wire()
    assert wire["content"][1]["image_url"] == {"url": "asset://f00", "detail": "low"}
    assert ChatMessage.from_wire(wire) == m
    assert ChatMessage.text("system", "hi").to_wire() == {"role": "system", "content": "hi"}


def test_conversation_alternation_enforced():
    s = ChatMessage.text("system", "s")
    u = ChatMessage.text("user", "u")
    a = ChatMessage.text("assistant", "a")
    Conversation("x", [s, u, a, u, a])
    Conversation("x", [u, a])
    with pytest.raises(DomainError):
        Conversation("x", [s, a])
    with pytest.raises(DomainError):
        Conversation("x", [s, s, u])
    with pytest.raises(DomainError):
        Conversation("x", [u, u])


# --- agents ------------------------------------------------------------------

def test_new_agent_holds_only_system_prompt(prices):
    agent = new_agent(AgentSpec("a", "gpt-4o-mini", "S"), factory_of(EchoProvider), prices)
    assert [m.role for m in agent.conversation.messages] == ["system"]
    assert agent.conversation.system_prompt == "S"


def test_new_agent_unknown_model(prices):
    with pytest.raises(ConfigError):
        new_agent(AgentSpec("a", "gpt-9"), factory_of(EchoProvider), prices)


def test_each_agent_gets_its_own_provider(prices):
    f = factory_of(EchoProvider)
    a = new_agent(AgentSpec("a", "gpt-4o-mini", "S"), f, prices)
    b = new_agent(AgentSpec("a", "gpt-4o-mini", "S"), f, prices)
    assert a.provider is not b.provider
    a.ask("only a")
    assert len(a.conversation) == 3 and len(b.conversation) == 1


def test_first_send_is_system_plus_user(prices):
    f = factory_of(EchoProvider)
    agent = new_agent(AgentSpec("a", "gpt-4o-mini", "S"), f, prices)
    agent.ask("hello")
    req = f.made[0].requests[0]
    assert req["model"] == "gpt-4o-mini"
    assert req["messages"] == [{"role": "system", "content": "S"},
                               {"role": "user", "content": "hello"}]


def test_request_after_three_exchanges_replays_history(prices):
    f = factory_of(EchoProvider)
    agent = new_agent(AgentSpec("a", "gpt-4o-mini", "S"), f, prices)
    for k in range(4):
        agent.ask(f"m{k}")
    last = f.made[0].requests[-1]["messages"]
    assert [m["role"] for m in last] == ["system"] + ["user", "assistant"] * 3 + ["user"]
    assert [m["content"] for m in last[1::2]] == ["m0", "m1", "m2", "m3"]


def test_alias_is_resolved_on_the_wire(prices):
    f = factory_of(EchoProvider)
    new_agent(AgentSpec("a", "chatgpt4o-latest"), f, prices).ask("x")
    assert f.made[0].requests[0]["model"] == "chatgpt-4o-latest"


def test_sampling_is_passed_through(prices):
    f = factory_of(EchoProvider)
    new_agent(AgentSpec("a", "gpt-4o-mini", sampling={"temperature": 0.2}), f, prices).ask("x")
    assert f.made[0].requests[0]["temperature"] == 0.2
    with pytest.raises(ConfigError):
        AgentSpec("a", "gpt-4o-mini", sampling={"messages": []})


def test_ledger_takes_usage_verbatim(prices):
    ledger = TokenLedger()
    f = factory_of(ScriptedProvider, script=["ok"], usage=(120, 45))
    agent = new_agent(AgentSpec("a", "gpt-4o-mini"), f, prices, ledger)
    agent.ask("x")
    c = ledger.counts("gpt-4o-mini")
    assert (c.input_tokens, c.output_tokens, c.requests) == (120, 45, 1)
    assert agent.conversation.messages[-1].token_count == 45


def test_send_rejects_non_user(prices):
    agent = new_agent(AgentSpec("a", "gpt-4o-mini"), factory_of(EchoProvider), prices)
    with pytest.raises(DomainError):
        agent.send(ChatMessage.text("assistant", "x"))


def test_failed_send_leaves_memory_untouched(prices):
    f = factory_of(FailingProvider, inner=EchoProvider(), should_fail=lambda r: True)
    agent = new_agent(AgentSpec("a", "gpt-4o-mini", "S"), f, prices)
    with pytest.raises(TransportError):
        agent.ask("x")
    assert len(agent.conversation) == 1


def test_malformed_completion_is_a_parse_error(prices):
    class Broken:
        def complete(self, request):
            return {"choices": []}

    agent = new_agent(AgentSpec("a", "gpt-4o-mini"), lambda m: Broken(), prices)
    with pytest.raises(ParseError):
        agent.ask("x")


def test_parse_completion_cached_tokens():
    doc = completion_document("m", "hi", 1000, 10, cached_tokens=600)
    assert parse_completion(doc)[1] == {"input_tokens": 400, "cached_input_tokens": 600,
                                        "output_tokens": 10}
    ds = {"choices": [{"message": {"content": "x"}}],
          "usage": {"prompt_tokens": 50, "completion_tokens": 5, "prompt_cache_hit_tokens": 20}}
    assert parse_completion(ds)[1]["cached_input_tokens"] == 20


def _replay_check(seed, prices):
    """Random interleaved sends across agents; compare captured requests to an oracle."""
    rng = random.Random(seed)
    n_agents = rng.randint(1, 4)
    agents, providers, expected = [], [], []
    for k in range(n_agents):
        replies = [f"r{seed}-{k}-{j}-" + "w " * rng.randint(0, 3) for j in range(12)]
        f = factory_of(ScriptedProvider, script=replies)
        system = f"sys{k}" if rng.random() < 0.7 else ""
        agents.append(new_agent(AgentSpec(f"a{k}", "gpt-4o-mini", system), f, prices))
        providers.append(f.made[0])
        expected.append([{"role": "system", "content": system}] if system else [])
    for step in range(rng.randint(1, 10)):
        k = rng.randrange(n_agents)
        if rng.random() < 0.3:
            msg = ChatMessage.user(f"u{step}", ImagePart(f"img{step}", rng.choice(["low", "high"])))
        else:
            msg = ChatMessage.user(f"u{step} " + "x" * rng.randint(0, 5))
        reply = agents[k].send(msg)
        wire = msg.to_wire()
        assert providers[k].requests[-1]["messages"] == expected[k] + [wire]
        expected[k] += [wire, {"role": "assistant", "content": reply.content_text}]
        agents[k].conversation.check()
    for k in range(n_agents):
        assert agents[k].conversation.to_wire() == expected[k]
        assert len(providers[k].requests) == agents[k].calls


def test_memory_replay_property(prices):
    for seed in range(500):
        _replay_check(seed, prices)


def test_concurrent_agents_stay_isolated(prices):
    f = factory_of(EchoProvider)
    agents = [new_agent(AgentSpec(f"a{k}", "gpt-4o-mini", f"S{k}"), f, prices) for k in range(6)]

    def drive(k):
        for j in range(20):
            agents[k].ask(f"{k}:{j}")

    threads = [threading.Thread(target=drive, args=(k,)) for k in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k, a in enumerate(agents):
        texts = [m.content_text for m in a.conversation.messages[1:]]
        assert texts == [f"{k}:{j}" for j in range(20) for _ in range(2)]


def test_derive_system_prompt(prices):
    f = factory_of(EchoProvider)
    author = new_agent(AgentSpec("author", "gpt-4o-mini", "S"), f, prices)
    templates = PromptTemplates.load()
    prompt = derive_system_prompt(author, "a keyword merger", templates)
    assert prompt == templates.render("system_prompt_request", role="a keyword merger")
    assert [m.role for m in author.conversation.messages] == ["system", "user", "assistant"]
    g = factory_of(EchoProvider)
    child = new_agent(AgentSpec("child", "gpt-4o-mini", prompt), g, prices)
    child.ask("go")
    assert g.made[0].requests[0]["messages"][0] == {"role": "system", "content": prompt}


# --- templates and keyword parsing -------------------------------------------

def test_templates_are_strict(tmp_path):
    (tmp_path / "t.txt").write_text("A {keywords} B\n")
    t = PromptTemplates.load(tmp_path)
    assert t.render("t", keywords="k") == "A k B"
    with pytest.raises(ConfigError):
        t.render("t")
    with pytest.raises(ConfigError):
        t.render("t", keywords="k", extra=1)
    with pytest.raises(ConfigError):
        t.render("missing")


def test_shipped_templates_placeholders():
    t = PromptTemplates.load()
    assert t.fields("aggregate") == {"image_count", "keywords"}
    assert t.fields("caption") == {"keywords"}
    assert t.fields("keyword_extraction") == set()


def test_parse_keywords_normalizes():
    assert parse_keywords("Glass, steel, GLASS; atrium") == ("glass", "steel", "atrium")
    assert parse_keywords("- Brick\n* flat roof.\n1. Trees\n\n,") == ("brick", "flat roof", "trees")
    assert parse_keywords("") == ()


def test_keyword_set_invariants():
    with pytest.raises(DomainError):
        KeywordSet("a", ("x", "x"))
    with pytest.raises(DomainError):
        KeywordSet("a", ("X",))
    with pytest.raises(DomainError):
        KeywordSet("a", ("",))


# --- pipeline stages -----------------------------------------------------------

def test_extract_keywords_scripted(prices, make_images):
    image = make_images(1)[0]
    f = factory_of(ScriptedProvider, script=["Glass, steel, GLASS; atrium"])
    agent = new_agent(AgentSpec("k", "gpt-4o"), f, prices)
    ks = extract_keywords(agent, image)
    assert ks == KeywordSet(image.asset_id, ("glass", "steel", "atrium"))
    assert len(f.made[0].requests) == 1
    sent = f.made[0].requests[0]["messages"][-1]["content"]
    assert sent[1]["image_url"]["url"] == "asset://" + image.asset_id
    assert sent[1]["image_url"]["detail"] == "high"


@pytest.mark.parametrize("model", ["deepseek-chat", "deepseek-reasoner", "gpt-o1"])
def test_extract_keywords_needs_image_analysis(prices, make_images, model):
    f = factory_of(EchoProvider)
    agent = new_agent(AgentSpec("k", model), f, prices)
    with pytest.raises(CapabilityError):
        extract_keywords(agent, make_images(1)[0])
    assert f.made[0].requests == []


def test_extract_keywords_unparseable(prices, make_images):
    agent = new_agent(AgentSpec("k", "gpt-4o"), factory_of(ScriptedProvider, script=[" ,;\n"]),
                      prices)
    with pytest.raises(ParseError) as err:
        extract_keywords(agent, make_images(1)[0])
    assert err.value.excerpt == " ,;\n"


def test_aggregate_with_echoing_mock_is_union(prices):
    sets = [KeywordSet("a", ("glass", "steel")), KeywordSet("b", ("steel", "atrium"))]
    agent = new_agent(AgentSpec("g", "deepseek-chat"), factory_of(MockChatProvider), prices)
    agg = aggregate_keywords(agent, sets)
    assert agg.source_asset == AGGREGATE_SOURCE
    assert agg.keywords == ("glass", "steel", "atrium")


def test_aggregate_prompt_lists_every_keyword(prices):
    rng = random.Random(3)
    vocab = [f"kw{n}" for n in range(200)]
    sets = [KeywordSet(f"s{k}", tuple(rng.sample(vocab, 10))) for k in range(8)]
    f = factory_of(EchoProvider)
    aggregate_keywords(new_agent(AgentSpec("g", "gpt-4o-mini"), f, prices), sets)
    body = f.made[0].requests[0]["messages"][-1]["content"]
    tokens = set(body.replace(",", " ").split())
    for s in sets:
        for kw in s.keywords:
            assert kw in tokens


def test_aggregate_single_set_and_empty(prices):
    f = factory_of(EchoProvider)
    agent = new_agent(AgentSpec("g", "gpt-4o-mini"), f, prices)
    aggregate_keywords(agent, [KeywordSet("a", ("brick", "tower"))])
    assert "brick, tower" in f.made[0].requests[0]["messages"][-1]["content"]
    with pytest.raises(DomainError):
        aggregate_keywords(agent, [])


def test_compose_caption(prices):
    ledger = TokenLedger()
    f = factory_of(ScriptedProvider, script=["A tall glass tower."])
    agent = new_agent(AgentSpec("c", "gpt-4o-mini"), f, prices, ledger)
    agg = KeywordSet(AGGREGATE_SOURCE, ("glass", "tower"))
    cap = compose_caption(agent, agg, iteration=2)
    assert cap.text == "A tall glass tower."
    assert cap.contributing_keywords is agg and cap.iteration == 2
    assert ledger.total_requests == 1
    with pytest.raises(DomainError):
        compose_caption(agent, KeywordSet(AGGREGATE_SOURCE, ()))
    assert ledger.total_requests == 1


@pytest.mark.parametrize("n", [1, 3, 8])
def test_caption_building_call_count(prices, make_images, n):
    journal = []
    f = factory_of(MockChatProvider, journal=journal)
    run = caption_building(make_images(n), ModelConfig.single("deepseek-chat"), f, prices)
    assert len(journal) == n + 2
    assert run.ledger.total_requests == n + 2
    assert len(run.keyword_sets) == n
    assert run.caption.model_id == "deepseek-chat"
    assert run.ledger.counts("gpt-4o").requests == n
    assert len(f.made) == n + 2


def test_caption_building_fails_fast(prices, make_images):
    images = make_images(8)
    bad = images[4].asset_id
    journal = []

    def failing(model_id):
        return FailingProvider(MockChatProvider(), lambda r: bad in str(r["messages"][-1]),
                               journal=journal)

    with pytest.raises(PipelineError) as err:
        caption_building(images, ModelConfig.single("gpt-4o-mini"), failing, prices)
    assert err.value.asset_id == bad
    assert all(isinstance(r["messages"][-1]["content"], list) for r in journal)


def test_caption_building_rejects_ocr_keyword_model(prices, make_images):
    cfg = ModelConfig("x", "deepseek-chat", "deepseek-chat", "deepseek-chat")
    with pytest.raises(CapabilityError):
        caption_building(make_images(2), cfg, factory_of(MockChatProvider), prices)


def test_caption_building_skips_street_maps(prices, store, make_png, make_images):
    from buildscope.geo import GeoPoint
    from buildscope.maps import StaticMapRequest

    street = store.put(make_png(4, 4, (1, 1, 1)), "street_map",
                       StaticMapRequest(GeoPoint(43.4, -80.5), 18, "roadmap"))
    journal = []
    run = caption_building(make_images(2) + [street], ModelConfig.single("gpt-4o-mini"),
                           factory_of(MockChatProvider, journal=journal), prices)
    assert len(journal) == 4 and street.asset_id not in {k.source_asset for k in run.keyword_sets}
    with pytest.raises(DomainError):
        caption_building([street], ModelConfig.single("gpt-4o-mini"),
                         factory_of(MockChatProvider), prices)


def test_mock_caption_is_a_sentence(prices, make_images):
    run = caption_building(make_images(3), ModelConfig.single("deepseek-reasoner"),
                           factory_of(MockChatProvider), prices)
    assert run.caption.text.startswith("A ") and run.caption.text.endswith(".")
    union = {k for s in run.keyword_sets for k in s.keywords}
    assert set(run.caption.contributing_keywords.keywords) == union


def test_model_config_from_dict():
    assert ModelConfig.from_dict("deepseek-chat") == ModelConfig.single("deepseek-chat")
    cfg = ModelConfig.from_dict({"model": "gpt-4o-mini", "keyword_model": "gpt-4o-mini"})
    assert (cfg.label, cfg.keyword_model, cfg.caption_model) == ("gpt-4o-mini",) * 3
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"model": "x", "temprature": 1})


# --- HTTP provider --------------------------------------------------------------

class _CaptureTransport:
    def __init__(self, response):
        self.response = response
        self.requests = []

    def __call__(self, request):
        self.requests.append(request)
        return self.response


def test_http_provider_inlines_images_and_auth():
    body = completion_document("gpt-4o", "hi", 3, 1)
    import json
    t = _CaptureTransport(HttpResponse(200, json.dumps(body).encode(), "application/json"))
    http = HttpClient(t, retry=RetryPolicy(), sleep=lambda s: None)
    p = OpenAICompatibleProvider("https://llm.example/v1/", "sk-secret", http,
                                 lambda aid: (b"\x89PNG", "image/png"))
    req = {"model": "gpt-4o", "messages": [ChatMessage.user("x", ImagePart("abc")).to_wire()]}
    assert p.complete(req) == body
    sent = t.requests[0]
    assert sent.url == "https://llm.example/v1/chat/completions"
    assert dict(sent.headers)["Authorization"] == "Bearer sk-secret"
    payload = json.loads(sent.body)
    assert payload["messages"][0]["content"][1]["image_url"]["url"] == "data:image/png;base64,iVBORw=="
    assert req["messages"][0]["content"][1]["image_url"]["url"] == "asset://abc"
    assert "sk-secret" not in repr(p) and "sk-secret" not in sent.canonical()


def test_http_provider_needs_key():
    with pytest.raises(ConfigError):
        OpenAICompatibleProvider("https://x", "", None)


# --- pricing ------------------------------------------------------------------------

@pytest.mark.parametrize("model,usd", [("chatgpt4o-latest", "12.50"), ("gpt-4o-mini", "0.75"),
                                       ("deepseek-chat", "1.24"), ("deepseek-reasoner", "2.33"),
                                       ("gpt-o1", "75")])
def test_million_in_million_out(prices, model, usd):
    ledger = TokenLedger()
    ledger.add(model, 1_000_000, 0, 1_000_000)
    assert estimate_cost(ledger, prices) == Decimal(usd)


def test_cached_input_discount(prices):
    ledger = TokenLedger()
    ledger.add("deepseek-chat", 0, 1_000_000, 0)
    assert estimate_cost(ledger, prices) == Decimal("0.014")
    ledger = TokenLedger()
    ledger.add("gpt-4o-mini", 0, 1_000_000, 0)
    assert estimate_cost(ledger, prices) == Decimal("0.15")


def test_cost_empty_and_unpriced(prices):
    assert estimate_cost(TokenLedger(), prices) == 0
    ledger = TokenLedger()
    ledger.add("mystery", 1, 0, 1)
    with pytest.raises(ConfigError):
        estimate_cost(ledger, prices)


def test_cost_is_linear(prices):
    rng = random.Random(11)
    models = ["gpt-4o-mini", "chatgpt-4o-latest", "deepseek-chat", "deepseek-reasoner", "gpt-4o"]
    for _ in range(200):
        a, b = TokenLedger(), TokenLedger()
        for led in (a, b):
            for _ in range(rng.randint(0, 4)):
                led.add(rng.choice(models), rng.randint(0, 10**7), rng.randint(0, 10**7),
                        rng.randint(0, 10**7))
        assert estimate_cost(a + b, prices) == estimate_cost(a, prices) + estimate_cost(b, prices)


def test_ledger_round_trip_and_guards():
    ledger = TokenLedger()
    ledger.add("m", 1, 2, 3)
    assert TokenLedger.from_dict(ledger.to_dict()) == ledger
    with pytest.raises(ValueError):
        ledger.add("m", -1)


def test_price_table_guards():
    with pytest.raises(ConfigError):
        PriceTable.from_document({"models": {"x": {"input_usd_per_1m": "1", "output_usd_per_1m": "1",
                                                   "cached_input_multiplier": "1.5"}}})
    with pytest.raises(ConfigError):
        PriceTable.from_document({"models": {"x": {"input_usd_per_1m": "-1",
                                                   "output_usd_per_1m": "1"}}})
    t = PriceTable.load()
    assert t.compiled == "2025-01-31"
    assert t.get("deepseek-chat").cached_input_multiplier == Decimal("0.1")
