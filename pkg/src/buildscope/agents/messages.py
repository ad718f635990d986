"""Chat messages and replayable conversation memory."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..errors import DomainError

ROLES = ("system", "user", "assistant")
DETAILS = ("low", "high")
ASSET_SCHEME = "asset://"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    asset_id: str
    detail: str = "high"

    def __post_init__(self):
        if self.detail not in DETAILS:
            raise DomainError(f"image detail must be one of {DETAILS}")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[TextPart | ImagePart, ...]
    token_count: int | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise DomainError(f"unknown role {self.role!r}")
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise DomainError("a chat message needs at least one part")
        if self.role != "user" and any(isinstance(p, ImagePart) for p in self.parts):
            raise DomainError("image parts are only allowed in user messages")

    @classmethod
    def text(cls, role: str, text: str) -> "ChatMessage":
        return cls(role, (TextPart(text),))

    @classmethod
    def user(cls, *parts) -> "ChatMessage":
        return cls("user", tuple(TextPart(p) if isinstance(p, str) else p for p in parts))

    @property
    def content_text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))

    @property
    def image_ids(self) -> list[str]:
        return [p.asset_id for p in self.parts if isinstance(p, ImagePart)]

    def with_tokens(self, n: int | None) -> "ChatMessage":
        return replace(self, token_count=n)

    def to_wire(self) -> dict:
        """Chat-completions message document; images are ``asset://`` references."""
        if all(isinstance(p, TextPart) for p in self.parts):
            return {"role": self.role, "content": self.content_text}
        content = []
        for p in self.parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            else:
                content.append({"type": "image_url",
                                "image_url": {"url": ASSET_SCHEME + p.asset_id, "detail": p.detail}})
        return {"role": self.role, "content": content}

    @classmethod
    def from_wire(cls, doc: dict) -> "ChatMessage":
        content = doc["content"]
        if isinstance(content, str):
            return cls.text(doc["role"], content)
        parts = []
        for c in content:
            if c["type"] == "text":
                parts.append(TextPart(c["text"]))
            else:
                url = c["image_url"]["url"]
                parts.append(ImagePart(url[len(ASSET_SCHEME):] if url.startswith(ASSET_SCHEME) else url,
                                       c["image_url"].get("detail", "high")))
        return cls(doc["role"], tuple(parts))


@dataclass
class Conversation:
    """Ordered memory of one agent.

    At most one leading system message, then user/assistant alternation.
    """

    agent_id: str
    messages: list[ChatMessage] = field(default_factory=list)

    def __post_init__(self):
        self.check()

    def check(self):
        msgs = self.messages
        body = msgs[1:] if msgs and msgs[0].role == "system" else msgs
        for k, m in enumerate(body):
            want = "user" if k % 2 == 0 else "assistant"
            if m.role != want:
                raise DomainError(
                    f"conversation {self.agent_id}: message {k} has role {m.role}, expected {want}")

    @property
    def system_prompt(self) -> str | None:
        if self.messages and self.messages[0].role == "system":
            return self.messages[0].content_text
        return None

    @property
    def complete(self) -> bool:
        """True when the last exchange ended on an assistant reply."""
        return not self.messages or self.messages[-1].role != "user"

    def append_exchange(self, user: ChatMessage, assistant: ChatMessage):
        if user.role != "user" or assistant.role != "assistant":
            raise DomainError("an exchange is a user message followed by an assistant reply")
        self.messages.extend((user, assistant))

    def to_wire(self) -> list[dict]:
        return [m.to_wire() for m in self.messages]

    def __len__(self):
        return len(self.messages)
