"""Runtime configuration: a YAML file, environment overrides, then flags."""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .errors import ConfigError
from .transport import RetryPolicy

CONFIG_ENV = "DBA_CONFIG"
SECRET_ENV = ("MAPS_API_KEY", "OPENAI_API_KEY", "DEEPSEEK_API_KEY")

_SECRET_NAME = re.compile(r"(api_?key|secret|password)$", re.IGNORECASE)
_FILE_KEYS = {"cache_root", "asset_root", "runs_root", "price_table", "prompt_dir",
              "max_parallel", "retry", "maps_base_url", "keyword_model", "embeddings"}


def read_yaml(path) -> dict:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return doc


@dataclass(frozen=True)
class CliConfig:
    cache_root: Path = Path(".buildscope/cache")
    asset_root: Path = Path(".buildscope/assets")
    runs_root: Path = Path("runs")
    price_table: Path | None = None
    prompt_dir: Path | None = None
    max_parallel: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    maps_base_url: str | None = None
    keyword_model: str = "gpt-4o"
    embeddings: dict = field(default_factory=dict)
    secrets: dict = field(default_factory=dict, repr=False)

    def __repr__(self):
        shown = {k: v for k, v in vars(self).items() if k != "secrets"}
        return f"CliConfig({shown}, secrets={sorted(k for k, v in self.secrets.items() if v)})"

    def secret(self, name: str) -> str:
        return self.secrets.get(name) or ""

    @classmethod
    def load(cls, path=None, environ=None) -> "CliConfig":
        """Defaults, then the file at ``path`` (or ``$DBA_CONFIG``), then env."""
        environ = os.environ if environ is None else environ
        path = path or environ.get(CONFIG_ENV)
        cfg = cls()
        if path:
            cfg = cfg.merged(read_yaml(path), base_dir=Path(path).parent)
        secrets = {k: environ.get(k, "") for k in SECRET_ENV}
        if environ.get("MAPS_BASE_URL"):
            cfg = replace(cfg, maps_base_url=environ["MAPS_BASE_URL"])
        return replace(cfg, secrets=secrets)

    def merged(self, doc: dict, base_dir: Path = Path(".")) -> "CliConfig":
        if any(_SECRET_NAME.search(str(k)) for k in _walk_keys(doc)):
            raise ConfigError("API keys belong in environment variables, not the config file")
        unknown = set(doc) - _FILE_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        updates = {}
        for name in ("cache_root", "asset_root", "runs_root", "price_table", "prompt_dir"):
            if doc.get(name) is not None:
                updates[name] = _resolve(base_dir, doc[name])
        if "max_parallel" in doc:
            mp = doc["max_parallel"]
            if not isinstance(mp, int) or mp < 1:
                raise ConfigError("max_parallel must be a positive integer")
            updates["max_parallel"] = mp
        if "retry" in doc:
            try:
                updates["retry"] = RetryPolicy(**doc["retry"])
            except TypeError as exc:
                raise ConfigError(f"bad retry settings: {exc}") from exc
        for name in ("maps_base_url", "keyword_model"):
            if name in doc:
                updates[name] = str(doc[name])
        if "embeddings" in doc:
            updates["embeddings"] = _embedding_section(doc["embeddings"], base_dir)
        return replace(self, **updates)

    def with_overrides(self, **flags) -> "CliConfig":
        return replace(self, **{k: v for k, v in flags.items() if v is not None})


def _walk_keys(doc):
    if isinstance(doc, dict):
        for k, v in doc.items():
            yield k
            yield from _walk_keys(v)
    elif isinstance(doc, list):
        for v in doc:
            yield from _walk_keys(v)


def _resolve(base_dir: Path, value) -> Path:
    p = Path(os.path.expanduser(str(value)))
    return p if p.is_absolute() else base_dir / p


def _embedding_section(doc, base_dir: Path) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError("embeddings must map space names to provider settings")
    out = {}
    for space, spec in doc.items():
        if not isinstance(spec, dict) or "kind" not in spec:
            raise ConfigError(f"embeddings.{space} needs a 'kind'")
        spec = dict(spec)
        if spec["kind"] == "fixture" and "path" in spec:
            spec["path"] = _resolve(base_dir, spec["path"])
        out[space] = spec
    return out


def build_embedding_providers(section: dict, http_factory=None, resolve_asset=None,
                              environ=None) -> dict:
    """Providers per space from an ``embeddings`` config section.

    kinds: ``hash`` (dim, shared), ``fixture`` (path), ``remote`` (endpoint,
    model, token_env naming the variable that holds the bearer token).
    """
    from .scoring import (SPACES, FixtureEmbeddingProvider, HashEmbeddingProvider,
                          RemoteEmbeddingProvider)

    environ = os.environ if environ is None else environ
    missing = [s for s in SPACES if s not in section]
    if missing:
        raise ConfigError(f"no embedding provider configured for {missing}")
    out = {}
    for space in SPACES:
        spec = section[space]
        kind = spec["kind"]
        if kind == "hash":
            out[space] = HashEmbeddingProvider(space, int(spec.get("dim", 512)),
                                               float(spec.get("shared", 0.55)))
        elif kind == "fixture":
            out[space] = FixtureEmbeddingProvider(spec["path"], space)
        elif kind == "remote":
            if http_factory is None:
                raise ConfigError("remote embeddings need network access")
            token = environ.get(spec["token_env"], "") if spec.get("token_env") else ""
            out[space] = RemoteEmbeddingProvider(http_factory(), spec["endpoint"], space,
                                                 spec.get("model", ""), token, resolve_asset)
        else:
            raise ConfigError(f"embeddings.{space}: unknown kind {kind!r}")
    return out


_GRID_KEYS = {"iterations", "models", "scenes", "keyword_model", "pac_scale", "max_parallel",
              "oblique_step_deg", "embeddings"}


def load_grid(path, store, *, mock: bool = False, keyword_model: str = "gpt-4o",
              max_parallel: int = 4):
    """Parse a grid document into ``(ExperimentGrid, embeddings section or None)``.

    Scenes without an ``images`` directory get synthetic placeholder images
    in mock mode and are an error otherwise.
    """
    from .agents import ModelConfig
    from .errors import DomainError
    from .experiment.grid import (OBLIQUE_STEP_DEG, ExperimentGrid, Scene, stage_scene_images,
                                  synthetic_scene)
    from .maps import BuildingQuery

    path = Path(path)
    doc = read_yaml(path)
    unknown = set(doc) - _GRID_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown grid keys {sorted(unknown)}")
    kw_model = doc.get("keyword_model", keyword_model)
    step = doc.get("oblique_step_deg", OBLIQUE_STEP_DEG)
    try:
        models = []
        for m in doc.get("models") or []:
            if isinstance(m, str):
                models.append(ModelConfig.single(m, keyword_model=kw_model))
            else:
                models.append(ModelConfig.from_dict({"keyword_model": kw_model, **m}))
        scenes = []
        for entry in doc.get("scenes") or []:
            if isinstance(entry, str):
                entry = {"name": entry}
            name = str(entry["name"])
            query = BuildingQuery.from_dict(entry["query"]) if entry.get("query") else None
            if entry.get("images"):
                images = stage_scene_images(path.parent / entry["images"], store, step)
                if not images:
                    raise ConfigError(f"scene {name}: no images in {entry['images']}")
                scenes.append(Scene(name, tuple(images), query))
            elif mock:
                scenes.append(synthetic_scene(store, name, query=query))
            else:
                raise ConfigError(f"scene {name} has no staged images directory")
        grid = ExperimentGrid(tuple(scenes), doc.get("iterations", 1), tuple(models),
                              float(doc.get("pac_scale", 1.0)), int(doc.get("max_parallel", max_parallel)))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed grid entry ({exc})") from exc
    except DomainError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    emb = _embedding_section(doc["embeddings"], path.parent) if "embeddings" in doc else None
    return grid, emb
