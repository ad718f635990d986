from .engine import (AGGREGATE_SOURCE, Agent, AgentSpec, Caption, CaptionRun, KeywordSet,
                     ModelConfig, PromptTemplates, aggregate_keywords, caption_building,
                     compose_caption, derive_system_prompt, extract_keywords, new_agent,
                     study_model_configs, parse_keywords)
from .messages import ChatMessage, Conversation, ImagePart, TextPart
from .pricing import ModelPrice, PriceTable, TokenLedger, estimate_cost
from .providers import (EchoProvider, FailingProvider, MockChatProvider, OpenAICompatibleProvider,
                        ScriptedProvider, live_provider_factory, mock_provider_factory)
