"""Scenes x iterations x models grid runs and their manifests."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal
from pathlib import Path
from typing import Callable, Sequence

from PIL import Image

from ..agents import (Caption, KeywordSet, ModelConfig, PriceTable, PromptTemplates, TokenLedger,
                      caption_building, estimate_cost)
from ..agents.engine import ProviderFactory, default_templates
from ..assets import AssetStore, ImageAsset
from ..errors import BuildscopeError, ConfigError, DomainError, IntakeError
from ..geo import GeoPoint
from ..maps import BuildingQuery, StaticMapRequest
from ..orbit import (_FRAME_RE, OrbitSpec, generate_orbit, intake_images, parse_orbit_document,
                     subsample_by_heading)
from ..scoring import ScoreTriplet, score_caption

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "buildscope-run"
MANIFEST_VERSION = 1
OBLIQUE_STEP_DEG = 70.0


@dataclass(frozen=True)
class Scene:
    name: str
    images: tuple[ImageAsset, ...]
    query: BuildingQuery | None = None

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        if not self.name:
            raise DomainError("scene needs a name")


@dataclass(frozen=True)
class ExperimentGrid:
    scenes: tuple[Scene, ...]
    iterations: int
    models: tuple[ModelConfig, ...]
    pac_scale: float = 1.0
    max_parallel: int = 4

    def __post_init__(self):
        object.__setattr__(self, "scenes", tuple(self.scenes))
        object.__setattr__(self, "models", tuple(self.models))
        if not self.scenes or not self.models:
            raise DomainError("a grid needs at least one scene and one model")
        if not isinstance(self.iterations, int) or self.iterations < 1:
            raise DomainError("iterations must be an integer >= 1")
        for what, names in (("scene", [s.name for s in self.scenes]),
                            ("model", [m.label for m in self.models])):
            if len(set(names)) != len(names):
                raise DomainError(f"duplicate {what} names in grid")
        if not self.pac_scale > 0:
            raise DomainError("pac_scale must be positive")

    @property
    def cell_count(self) -> int:
        return len(self.scenes) * self.iterations * len(self.models)

    def cells(self):
        """(scene, iteration, model) in manifest order; iterations count from 1."""
        for scene in self.scenes:
            for it in range(1, self.iterations + 1):
                for model in self.models:
                    yield scene, it, model

    def echo(self) -> dict:
        return {
            "scenes": [{"name": s.name, "query": s.query.to_dict() if s.query else None,
                        "assets": [a.asset_id for a in s.images]} for s in self.scenes],
            "iterations": self.iterations,
            "models": [m.to_dict() for m in self.models],
            "pac_scale": self.pac_scale,
        }


@dataclass
class CellRecord:
    scene: str
    model: str
    iteration: int
    status: str = "ok"
    reason: str | None = None
    caption: Caption | None = None
    keyword_sets: list[KeywordSet] = field(default_factory=list)
    triplets: list[ScoreTriplet] = field(default_factory=list)
    ledger: TokenLedger = field(default_factory=TokenLedger)
    calls: int = 0
    wall_clock_s: float = 0.0

    @property
    def scored(self) -> list[ScoreTriplet]:
        return [t for t in self.triplets if t.ok]

    def to_dict(self) -> dict:
        return {
            "scene": self.scene, "model": self.model, "iteration": self.iteration,
            "status": self.status, "reason": self.reason,
            "caption": self.caption.to_dict() if self.caption else None,
            "keyword_sets": [k.to_dict() for k in self.keyword_sets],
            "triplets": [t.to_dict() for t in self.triplets],
            "ledger": self.ledger.to_dict(), "calls": self.calls,
            "wall_clock_s": self.wall_clock_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellRecord":
        return cls(d["scene"], d["model"], d["iteration"], d["status"], d.get("reason"),
                   Caption.from_dict(d["caption"]) if d.get("caption") else None,
                   [KeywordSet.from_dict(k) for k in d["keyword_sets"]],
                   [ScoreTriplet.from_dict(t) for t in d["triplets"]],
                   TokenLedger.from_dict(d["ledger"]), d["calls"], d["wall_clock_s"])


class ManifestError(BuildscopeError):
    pass


@dataclass
class RunManifest:
    grid: dict
    cells: list[CellRecord]
    totals: dict
    inputs: dict = field(default_factory=dict)
    created: str = ""

    @property
    def scene_names(self) -> list[str]:
        return [s["name"] for s in self.grid.get("scenes", [])]

    @property
    def model_labels(self) -> list[str]:
        return [m["label"] for m in self.grid.get("models", [])]

    @property
    def complete(self) -> bool:
        return all(c.status == "ok" for c in self.cells)

    @property
    def failed_cells(self) -> list[CellRecord]:
        return [c for c in self.cells if c.status != "ok"]

    def triplets_per_model(self) -> dict[str, int]:
        out = {m: 0 for m in self.model_labels}
        for c in self.cells:
            out[c.model] = out.get(c.model, 0) + len(c.scored)
        return out

    @staticmethod
    def compute_totals(cells: Sequence[CellRecord], prices: PriceTable | None = None) -> dict:
        ledger = TokenLedger()
        for c in cells:
            ledger.merge(c.ledger)
        totals = {
            "cells": len(cells),
            "failed_cells": sum(c.status != "ok" for c in cells),
            "calls": sum(c.calls for c in cells),
            "triplets": sum(len(c.scored) for c in cells),
            "ledger": ledger.to_dict(),
        }
        if prices is not None:
            totals["cost_usd"] = str(estimate_cost(ledger, prices))
        return totals

    def check(self, prices: PriceTable | None = None):
        """Raise ManifestError unless the totals equal the sums over cells."""
        expect = self.compute_totals(self.cells, prices)
        for key, value in expect.items():
            if key == "cost_usd" and "cost_usd" not in self.totals:
                continue
            if self.totals.get(key) != value:
                raise ManifestError(f"manifest total {key} = {self.totals.get(key)!r}, "
                                    f"cells sum to {value!r}")

    @property
    def cost(self) -> Decimal | None:
        c = self.totals.get("cost_usd")
        return Decimal(c) if c is not None else None

    def to_dict(self) -> dict:
        return {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "created": self.created,
                "grid": self.grid, "inputs": self.inputs, "totals": self.totals,
                "cells": [c.to_dict() for c in self.cells]}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        if doc.get("format") != MANIFEST_FORMAT or doc.get("version") != MANIFEST_VERSION:
            raise ManifestError("not a run manifest of a supported version")
        return cls(doc["grid"], [CellRecord.from_dict(c) for c in doc["cells"]], doc["totals"],
                   doc.get("inputs", {}), doc.get("created", ""))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, runs_root) -> Path:
        """Write ``<runs_root>/<timestamp>/manifest.json`` and return its path."""
        stamp = (self.created or _utc_now()).replace(":", "").replace("-", "").replace("+0000", "Z")
        run_dir = Path(runs_root) / stamp
        n = 1
        while (run_dir / "manifest.json").exists():
            n += 1
            run_dir = Path(runs_root) / f"{stamp}-{n}"
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / "manifest.json"
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except OSError as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest {path}: {exc}") from exc

    @classmethod
    def empty(cls) -> "RunManifest":
        return cls({"scenes": [], "models": [], "iterations": 0}, [], cls.compute_totals([]))


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256_json(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def input_hashes(grid: ExperimentGrid, prices: PriceTable, templates: PromptTemplates) -> dict:
    price_doc = {m: [str(p.input_usd_per_1m), str(p.output_usd_per_1m),
                     str(p.cached_input_multiplier), p.image_processing]
                 for m, p in sorted(prices.prices.items())}
    return {
        "assets": {s.name: [a.asset_id for a in s.images] for s in grid.scenes},
        "prices_sha256": _sha256_json(price_doc),
        "templates_sha256": _sha256_json(templates.templates),
        "grid_sha256": _sha256_json(grid.echo()),
    }


class _CallCounter:
    def __init__(self):
        self.n = 0
        self._lock = threading.Lock()

    def wrap(self, factory: ProviderFactory) -> ProviderFactory:
        counter = self

        class Counted:
            def __init__(self, inner):
                self.inner = inner

            def complete(self, request):
                with counter._lock:
                    counter.n += 1
                return self.inner.complete(request)

        return lambda model_id: Counted(factory(model_id))


def run_cell(scene: Scene, iteration: int, model: ModelConfig, provider_factory: ProviderFactory,
             embedding_providers: dict | None, prices: PriceTable, templates: PromptTemplates,
             pac_scale: float = 1.0, clock: Callable[[], float] = time.perf_counter) -> CellRecord:
    cell = CellRecord(scene.name, model.label, iteration)
    counter = _CallCounter()
    started = clock()
    try:
        run = caption_building(scene.images, model, counter.wrap(provider_factory), prices,
                               templates=templates, iteration=iteration)
        cell.caption, cell.keyword_sets, cell.ledger = run.caption, run.keyword_sets, run.ledger
        if embedding_providers is not None:
            used = [im for im in scene.images if im.kind != "street_map"]
            cell.triplets = score_caption(run.caption, used, embedding_providers, pac_scale)
    except BuildscopeError as exc:
        cell.status, cell.reason = "failed", f"{type(exc).__name__}: {exc}"
    cell.calls = counter.n
    cell.wall_clock_s = round(clock() - started, 6)
    return cell


def run_grid(grid: ExperimentGrid, provider_factory: ProviderFactory,
             embedding_providers: dict | None, prices: PriceTable,
             templates: PromptTemplates | None = None,
             progress: Callable[[CellRecord], None] | None = None) -> RunManifest:
    """Caption and score every (scene, iteration, model) cell.

    Failed cells are kept with their reason and the run goes on. With no
    embedding providers the captions are produced but not scored.
    """
    templates = templates or default_templates()
    specs = list(grid.cells())

    def job(spec):
        scene, it, model = spec
        cell = run_cell(scene, it, model, provider_factory, embedding_providers, prices,
                        templates, grid.pac_scale)
        if progress is not None:
            progress(cell)
        return cell

    with ThreadPoolExecutor(max_workers=max(1, grid.max_parallel)) as pool:
        cells = list(pool.map(job, specs))
    return RunManifest(grid.echo(), cells, RunManifest.compute_totals(cells, prices),
                       input_hashes(grid, prices, templates), _utc_now())


# ---------------------------------------------------------------------------
# scene staging


def _image_order(a: ImageAsset):
    rank = {"oblique_orbit": 0, "satellite": 1, "street_map": 2}[a.kind]
    if a.kind == "oblique_orbit":
        return rank, a.acquisition.heading_deg, a.asset_id
    return rank, int(a.acquisition.zoom), a.asset_id


def stage_scene_images(directory, store: AssetStore,
                       oblique_step_deg: float | None = OBLIQUE_STEP_DEG) -> list[ImageAsset]:
    """Collect the captioning inputs staged in ``directory``.

    Recognized content: an asset store (``manifest.json``, at the top or in
    ``assets/``) and rendered orbit frames ``frame_NNN.*`` next to a
    ``*.orbit`` document (at the top or in ``frames/``). Orbit frames are
    thinned to one every ``oblique_step_deg`` degrees.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"image directory {directory} does not exist")
    out: dict[tuple[str, str], ImageAsset] = {}
    for root in (directory, directory / "assets"):
        if (root / "manifest.json").is_file() and root.resolve() != store.root.resolve():
            src = AssetStore(root)
            for a in src.assets():
                if a.kind == "oblique_orbit":
                    continue
                staged = store.put(src.read(a.asset_id), a.kind, a.acquisition)
                out[(staged.asset_id, staged.kind)] = staged
    orbits = sorted(directory.glob("*.orbit"))
    if len(orbits) > 1:
        raise ConfigError(f"more than one orbit document in {directory}")
    if orbits:
        poses = parse_orbit_document(orbits[0].read_text())
        frames = directory / "frames" if (directory / "frames").is_dir() else directory
        if not any(_FRAME_RE.match(f.stem) for f in frames.iterdir()):
            # an orbit plan whose frames have not been rendered yet
            log.warning("orbit %s has no rendered frames in %s", orbits[0].name, frames)
            return sorted(out.values(), key=_image_order)
        result = intake_images(frames, poses, store)
        if result.failures:
            raise IntakeError(f"unreadable frames: {sorted(result.failures.values())}",
                              sorted(result.failures))
        keep = set(subsample_by_heading(poses, oblique_step_deg)) if oblique_step_deg else set(poses)
        for a in result.assets:
            if a.acquisition in keep:
                out[(a.asset_id, a.kind)] = a
    return sorted(out.values(), key=_image_order)


def _placeholder_png(label: str, size: int = 16) -> bytes:
    digest = hashlib.sha256(label.encode()).digest()
    img = Image.new("RGB", (size, size), tuple(digest[:3]))
    img.putpixel((0, 0), tuple(digest[3:6]))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def synthetic_scene(store: AssetStore, name: str, target: GeoPoint | None = None,
                    orbit_count: int = 31, oblique_step_deg: float = OBLIQUE_STEP_DEG,
                    zooms: Sequence[int] = (18, 19), query: BuildingQuery | None = None) -> Scene:
    """Offline stand-in: placeholder frames on a real orbit plus satellite tiles."""
    if target is None:
        h = hashlib.sha256(name.encode()).digest()
        target = GeoPoint(-60 + 120 * h[0] / 255, -180 + 359 * h[1] / 255)
    poses = subsample_by_heading(generate_orbit(OrbitSpec(target, orbit_count)), oblique_step_deg)
    images = [store.put(_placeholder_png(f"{name}|oblique|{p.heading_deg!r}"), "oblique_orbit", p)
              for p in poses]
    images += [store.put(_placeholder_png(f"{name}|satellite|{z}"), "satellite",
                         StaticMapRequest(target, z, "satellite")) for z in zooms]
    return Scene(name, tuple(images), query)
