"""``buildscope`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Human-readable progress goes to stderr; records and paths go to stdout.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import signal
import sys
from pathlib import Path

from . import __version__
from .agents import (ModelConfig, PriceTable, PromptTemplates, estimate_cost,
                     live_provider_factory, mock_provider_factory)
from .assets import AssetStore
from .config import CliConfig, build_embedding_providers, load_grid, read_yaml
from .errors import BuildscopeError, ConfigError, DomainError
from .geo import GeoPoint, ring_centroid
from .maps import BuildingQuery, MapsClient, MockMapsTransport
from .orbit import OrbitSpec, generate_orbit, write_orbit_document
from .transport import (CassetteRecorder, CassetteReplayer, HttpClient, ResponseCache,
                        RequestsTransport)

log = logging.getLogger("buildscope")


class UsageError(Exception):
    pass


def say(*parts):
    print(*parts, file=sys.stderr)


def emit(line: str):
    print(line, file=sys.stdout)


class _Redact(logging.Filter):
    def __init__(self, secrets):
        super().__init__()
        self.secrets = [s for s in secrets if s]

    def filter(self, record):
        msg = record.getMessage()
        for s in self.secrets:
            msg = msg.replace(s, "[redacted]")
        record.msg, record.args = msg, ()
        return True


def _setup_logging(verbosity: int, secrets):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler.addFilter(_Redact(secrets))
    root = logging.getLogger("buildscope")
    root.handlers[:] = [handler]
    root.propagate = False
    root.setLevel([logging.WARNING, logging.INFO, logging.DEBUG][min(verbosity, 2)])


# ---------------------------------------------------------------------------
# argument parsing


def latlng(text: str) -> GeoPoint:
    try:
        lat, lng = (float(v) for v in text.split(","))
        return GeoPoint(lat, lng)
    except (ValueError, DomainError) as exc:
        raise argparse.ArgumentTypeError(
            f"expected the form lat,lng (e.g. 43.4686,-80.5284), got {text!r}") from exc


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        value = 0
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _query_flags(p: argparse.ArgumentParser):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--address", help="street address")
    g.add_argument("--place", help="proper name of the building or place")
    g.add_argument("--postal", help="postal code")
    g.add_argument("--latlng", type=latlng, help="coordinates as lat,lng")


def _query(args) -> BuildingQuery:
    try:
        return BuildingQuery(args.address, args.place, args.postal, args.latlng)
    except DomainError as exc:
        raise UsageError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--mock", action="store_true", default=argparse.SUPPRESS,
                        help="use deterministic offline providers everywhere")

    p = argparse.ArgumentParser(prog="buildscope", parents=[common],
                                description="Building data retrieval, captioning and evaluation.")
    p.add_argument("--version", action="version", version=f"buildscope {__version__}")
    p.add_argument("--config", type=Path, help="YAML config file (default: $DBA_CONFIG)")
    p.add_argument("--cassette", type=Path, help="replay maps traffic from this cassette")
    p.add_argument("--record", action="store_true", help="record maps traffic into --cassette")
    p.add_argument("--cache-dir", type=Path, help="HTTP response cache directory")
    p.add_argument("--asset-dir", type=Path, help="content-addressed asset store directory")
    p.add_argument("--parallel", type=positive_int, help="parallelism bound")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("geocode", parents=[common], help="resolve a building query")
    _query_flags(g)

    f = sub.add_parser("fetch", parents=[common], help="fetch the map bundle and plan the orbit")
    _query_flags(f)
    f.add_argument("--zooms", type=int, nargs="+", default=[18, 19])
    f.add_argument("--roadmap-zoom", type=int, help="also fetch a street map at this zoom")
    f.add_argument("--overlay", action="store_true", help="draw the footprint on static maps")
    f.add_argument("--orbit-count", type=positive_int, default=31)
    f.add_argument("--orbit-radius", type=float, default=250.0, help="metres")
    f.add_argument("--altitude", type=float, default=150.0, help="metres above ground")
    f.add_argument("--tilt", type=float, default=45.0, help="degrees off nadir")
    f.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("caption", parents=[common], help="caption one staged building")
    c.add_argument("--images", type=Path, required=True, help="staged image directory")
    c.add_argument("--models", default="gpt-4o-mini",
                   help="comma-separated model ids, or a YAML file with a 'models' list")
    c.add_argument("--keyword-model", help="model for per-image keywords")
    c.add_argument("--oblique-step", type=float, default=70.0,
                   help="keep one orbit frame per this many degrees (0 keeps all)")
    c.add_argument("--out", type=Path, help="runs directory for the manifest")

    e = sub.add_parser("experiment", parents=[common], help="run a scenes x iterations x models grid")
    e.add_argument("--grid", type=Path, required=True)
    e.add_argument("--out", type=Path, help="runs directory for the manifest")
    e.add_argument("--report", action="store_true", help="emit reports next to the manifest")

    r = sub.add_parser("report", parents=[common], help="emit CSV and SVG reports for a run")
    r.add_argument("--run", type=Path, required=True, help="run directory or manifest.json")
    r.add_argument("--out", type=Path, help="output directory (default: <run>/report)")
    r.add_argument("--no-plots", action="store_true")
    return p


# ---------------------------------------------------------------------------
# wiring


class Context:
    def __init__(self, args, cfg: CliConfig):
        self.args = args
        self.cfg = cfg
        self.mock = getattr(args, "mock", False)
        self._prices = None
        self.recorder: CassetteRecorder | None = None

    @property
    def prices(self) -> PriceTable:
        if self._prices is None:
            self._prices = PriceTable.load(self.cfg.price_table)
        return self._prices

    def templates(self) -> PromptTemplates:
        return PromptTemplates.load(self.cfg.prompt_dir)

    def store(self, root=None) -> AssetStore:
        return AssetStore(root or self.cfg.asset_root)

    def maps_client(self, store: AssetStore) -> MapsClient:
        a = self.args
        if a.record and not a.cassette:
            raise UsageError("--record needs --cassette")
        replay = a.cassette is not None and not a.record
        cache = None
        if replay:
            transport = CassetteReplayer(a.cassette)
        else:
            transport = MockMapsTransport() if self.mock else RequestsTransport()
            if a.record:
                self.recorder = transport = CassetteRecorder(transport, a.cassette)
            elif not self.mock:
                cache = ResponseCache(self.cfg.cache_root / "http")
        http = HttpClient(transport, retry=self.cfg.retry, cache=cache)
        live = not replay and not self.mock
        return MapsClient(http, store, api_key=self.cfg.secret("MAPS_API_KEY") or None,
                          base_url=self.cfg.maps_base_url, require_key=live,
                          max_parallel=self.cfg.max_parallel)

    def provider_factory(self, store: AssetStore):
        if self.mock:
            return mock_provider_factory()

        def resolve(asset_id):
            return store.read(asset_id), store.metadata(asset_id)["media_type"]

        for name in ("OPENAI_API_KEY", "DEEPSEEK_API_KEY"):
            if not self.cfg.secret(name):
                log.info("%s is not set", name)
        return live_provider_factory(resolve, retry=self.cfg.retry)

    def embedding_providers(self, store: AssetStore, section=None, required=False):
        if self.mock:
            from .scoring import mock_embedding_providers

            return mock_embedding_providers()
        section = section or self.cfg.embeddings
        if not section:
            if required:
                raise ConfigError("no embeddings configured; add an 'embeddings' section or use --mock")
            return None

        def resolve(asset_id):
            return store.read(asset_id), store.metadata(asset_id)["media_type"]

        def http():
            return HttpClient(RequestsTransport(), retry=self.cfg.retry,
                              cache=ResponseCache(self.cfg.cache_root / "embeddings"))

        return build_embedding_providers(section, http, resolve)

    def finish(self):
        if self.recorder is not None:
            self.recorder.save()
            say(f"recorded {len(self.recorder.cassette.entries)} exchanges into {self.args.cassette}")


# ---------------------------------------------------------------------------
# commands


def cmd_geocode(ctx: Context) -> int:
    client = ctx.maps_client(ctx.store())
    try:
        record = client.geocode(_query(ctx.args))
    finally:
        ctx.finish()
    emit(record.to_json())
    say(f"{record.formatted_address} ({record.location.lat:.7f}, {record.location.lng:.7f})")
    return 0


def cmd_fetch(ctx: Context) -> int:
    a = ctx.args
    out = a.out
    store = ctx.store(out / "assets")
    client = ctx.maps_client(store)
    try:
        bundle = client.retrieve_building_bundle(_query(a), a.zooms, roadmap_zoom=a.roadmap_zoom,
                                                 overlay=a.overlay)
    finally:
        ctx.finish()
    record = bundle.record
    target = record.location
    if record.footprint is not None:
        c = ring_centroid(record.footprint)
        if not c.degenerate:
            target = c.point
    poses = generate_orbit(OrbitSpec(target, a.orbit_count, a.orbit_radius, a.altitude, a.tilt))
    doc = {"record": record.to_dict(), "extras": bundle.extras, "errors": bundle.errors,
           "assets": [x.to_dict() for x in bundle.assets]}
    record_path = out / "record.json"
    record_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    orbit_path = write_orbit_document(poses, out / "orbit.orbit")
    emit(str(record_path))
    emit(str(orbit_path))
    for x in bundle.assets:
        emit(str(store.root / x.storage_path))
    say(f"{record.formatted_address}: {len(bundle.calls)} requests, {len(bundle.assets)} images, "
        f"{len(poses)} orbit poses")
    for label, msg in sorted(bundle.errors.items()):
        say(f"warning: {label} failed: {msg}")
    return 0


def _model_configs(spec: str, keyword_model: str) -> list[ModelConfig]:
    path = Path(spec)
    if path.suffix in (".yaml", ".yml", ".json") or path.is_file():
        doc = read_yaml(path)
        entries = doc.get("models")
        if not entries:
            raise ConfigError(f"{path} has no 'models' list")
    else:
        entries = [m.strip() for m in spec.split(",") if m.strip()]
    try:
        return [ModelConfig.single(m, keyword_model) if isinstance(m, str)
                else ModelConfig.from_dict({"keyword_model": keyword_model, **m}) for m in entries]
    except TypeError as exc:
        raise ConfigError(f"bad model entry: {exc}") from exc


def cmd_caption(ctx: Context) -> int:
    from .experiment import ExperimentGrid, Scene, run_grid, stage_scene_images

    a = ctx.args
    models = _model_configs(a.models, a.keyword_model or ctx.cfg.keyword_model)
    for m in models:
        for model_id in (m.keyword_model, m.aggregate_model, m.caption_model):
            ctx.prices.get(model_id)
    if not a.images.is_dir():
        say(f"error: no images: {a.images} is not a directory")
        return 1
    store = ctx.store()
    images = stage_scene_images(a.images, store, a.oblique_step or None)
    if not images:
        say(f"error: no images staged in {a.images} "
            "(expected an asset store and/or frame_NNN images with an .orbit document)")
        return 1
    try:
        grid = ExperimentGrid((Scene(a.images.resolve().name or "scene", tuple(images)),), 1,
                              tuple(models), max_parallel=ctx.cfg.max_parallel)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    embeddings = ctx.embedding_providers(store)
    manifest = run_grid(grid, ctx.provider_factory(store), embeddings, ctx.prices, ctx.templates())
    path = manifest.save(a.out or ctx.cfg.runs_root)
    status = 0
    for cell in manifest.cells:
        cost = estimate_cost(cell.ledger, ctx.prices)
        say(f"[{cell.model}] {len(images)} images, {cell.calls} calls, cost: {cost} USD")
        if cell.status != "ok":
            say(f"[{cell.model}] caption failed: {cell.reason}")
            status = 1
            continue
        say(f"[{cell.model}] keywords: {', '.join(cell.caption.contributing_keywords.keywords)}")
        say(f"[{cell.model}] caption: {cell.caption.text}")
        emit(json.dumps({"model": cell.model, "caption": cell.caption.text,
                         "keywords": list(cell.caption.contributing_keywords.keywords),
                         "calls": cell.calls, "cost_usd": str(cost),
                         "scores": [t.to_dict() for t in cell.triplets]}, sort_keys=True))
    if embeddings is None:
        say("note: no embeddings configured, captions were not scored")
    emit(str(path))
    return status


def _interrupted_manifest(grid, done, prices, templates):
    from .experiment.grid import CellRecord, RunManifest, _utc_now, input_hashes

    have = {(c.scene, c.iteration, c.model): c for c in done}
    cells = []
    for scene, it, model in grid.cells():
        cell = have.get((scene.name, it, model.label))
        if cell is None:
            cell = CellRecord(scene.name, model.label, it, "failed", "interrupted before completion")
        cells.append(cell)
    return RunManifest(grid.echo(), cells, RunManifest.compute_totals(cells, prices),
                       input_hashes(grid, prices, templates), _utc_now())


def cmd_experiment(ctx: Context) -> int:
    import threading

    from .experiment import emit_reports, run_grid

    a = ctx.args
    store = ctx.store()
    grid, emb_section = load_grid(a.grid, store, mock=ctx.mock,
                                  keyword_model=ctx.cfg.keyword_model,
                                  max_parallel=ctx.cfg.max_parallel)
    if a.parallel:
        grid = dataclasses.replace(grid, max_parallel=a.parallel)
    embeddings = ctx.embedding_providers(store, emb_section, required=True)
    factory = ctx.provider_factory(store)
    templates = ctx.templates()
    total = grid.cell_count
    done: list = []
    lock = threading.Lock()

    def progress(cell):
        with lock:
            done.append(cell)
            n = len(done)
        state = "ok" if cell.status == "ok" else f"FAILED ({cell.reason})"
        log.info("[%d/%d] %s | %s | iteration %d: %s", n, total, cell.scene, cell.model,
                 cell.iteration, state)

    say(f"running {total} cells ({len(grid.scenes)} scenes x {grid.iterations} iterations x "
        f"{len(grid.models)} models)")
    try:
        manifest = run_grid(grid, factory, embeddings, ctx.prices, templates, progress)
    except KeyboardInterrupt:
        with lock:
            partial = list(done)
        manifest = _interrupted_manifest(grid, partial, ctx.prices, templates)
        path = manifest.save(a.out or ctx.cfg.runs_root)
        say(f"interrupted: partial manifest with {len(partial)} of {total} cells written")
        emit(str(path))
        return 1
    path = manifest.save(a.out or ctx.cfg.runs_root)
    t = manifest.totals
    per_model = ", ".join(f"{m} {n}" for m, n in manifest.triplets_per_model().items())
    say(f"calls: {t['calls']}")
    say(f"triplets: {t['triplets']} ({per_model})")
    say(f"cost: {t['cost_usd']} USD")
    emit(str(path))
    if a.report:
        for f in emit_reports(manifest, path.parent / "report"):
            emit(str(f))
    for cell in manifest.failed_cells:
        say(f"failed: {cell.scene} | {cell.model} | iteration {cell.iteration}: {cell.reason}")
    return 0 if manifest.complete else 1


def cmd_report(ctx: Context) -> int:
    from .experiment import RunManifest, emit_reports

    a = ctx.args
    manifest = RunManifest.load(a.run)
    run_dir = a.run if a.run.is_dir() else a.run.parent
    files = emit_reports(manifest, a.out or run_dir / "report", plots=not a.no_plots)
    for f in files:
        emit(str(f))
    say(f"{len(files)} report files, {manifest.totals['triplets']} score rows")
    return 0


COMMANDS = {"geocode": cmd_geocode, "fetch": cmd_fetch, "caption": cmd_caption,
            "experiment": cmd_experiment, "report": cmd_report}


def _sigterm(signum, frame):
    raise KeyboardInterrupt


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = CliConfig.load(args.config)
        cfg = cfg.with_overrides(cache_root=args.cache_dir, asset_root=args.asset_dir,
                                 max_parallel=args.parallel)
    except ConfigError as exc:
        say(f"config error: {exc}")
        return 2
    _setup_logging(args.verbose, cfg.secrets.values())
    if threading_is_main():
        signal.signal(signal.SIGTERM, _sigterm)
    ctx = Context(args, cfg)
    try:
        return COMMANDS[args.command](ctx)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        say(f"usage error: {exc}")
        return 2
    except ConfigError as exc:
        say(f"config error: {exc}")
        return 2
    except BuildscopeError as exc:
        say(f"error: {exc}")
        return 1
    except KeyboardInterrupt:
        say("interrupted")
        return 1


def threading_is_main() -> bool:
    import threading

    return threading.current_thread() is threading.main_thread()


if __name__ == "__main__":
    sys.exit(main())
