import csv
import io
import math
import random
from decimal import Decimal, localcontext

import pytest

from buildscope.agents import (FailingProvider, MockChatProvider, ModelConfig, PriceTable,
                               estimate_cost, mock_provider_factory)
from buildscope.errors import ConfigError, DomainError, IntakeError
from buildscope.experiment import (ExperimentGrid, ManifestError, RunManifest, box_stats,
                                   emit_reports, exact_mean, per_scene_model_means, run_grid,
                                   stage_scene_images, synthetic_scene)
from buildscope.experiment.stats import TUKEY_K
from buildscope.geo import GeoPoint
from buildscope.orbit import OrbitSpec, generate_orbit, write_orbit_document
from buildscope.scoring import ScoreTriplet, mock_embedding_providers


@pytest.fixture(scope="module")
def prices():
    return PriceTable.load()


# --- oracles -------------------------------------------------------------------

def oracle_quantile(xs, p):
    """Closest-rank linear interpolation written from the definition."""
    s = sorted(xs)
    pos = p * (len(s) - 1)
    j = int(pos)
    if j + 1 >= len(s):
        return s[-1]
    frac = pos - j
    v = s[j] + frac * (s[j + 1] - s[j])
    return min(max(v, s[j]), s[j + 1])


def oracle_mean(xs):
    with localcontext() as ctx:
        ctx.prec = 2000
        total = sum((Decimal(x) for x in xs), Decimal(0))
        return float(total / len(xs))


def check_box_against_oracle(xs):
    b = box_stats(xs)
    s = sorted(xs)
    q1, med, q3 = (oracle_quantile(xs, p) for p in (0.25, 0.5, 0.75))
    assert (b.n, b.min, b.max) == (len(s), s[0], s[-1])
    assert (b.q1, b.median, b.q3) == (q1, med, q3)
    assert b.mean == oracle_mean(xs)
    assert b.iqr == q3 - q1
    lo, hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
    assert list(b.outliers) == [x for x in s if x < lo or x > hi]
    inside = [x for x in s if lo <= x <= hi]
    assert (b.lower_whisker, b.upper_whisker) == (inside[0], inside[-1])
    assert b.min <= b.q1 <= b.median <= b.q3 <= b.max
    assert b.q1 - TUKEY_K * b.iqr <= b.lower_whisker <= b.upper_whisker <= b.q3 + TUKEY_K * b.iqr
    assert all(x < b.lower_fence or x > b.upper_fence for x in b.outliers)


# --- box statistics -------------------------------------------------------------------

def test_box_small_symmetric():
    b = box_stats([1, 2, 3, 4, 5])
    assert (b.q1, b.median, b.q3, b.mean, b.outliers) == (2, 3, 4, 3, ())


def test_box_hand_outlier():
    b = box_stats([1, 2, 3, 4, 100])
    assert (b.q3, b.iqr, b.upper_fence, b.outliers) == (4, 2, 7, (100,))
    assert b.upper_whisker == 4 and b.lower_whisker == 1


def test_box_constant_and_single():
    b = box_stats([5, 5, 5])
    assert (b.min, b.q1, b.median, b.q3, b.max, b.iqr, b.outliers) == (5, 5, 5, 5, 5, 0, ())
    one = box_stats([7.5])
    assert (one.q1, one.median, one.q3, one.lower_whisker) == (7.5, 7.5, 7.5, 7.5)


def test_box_even_count_interpolates():
    b = box_stats([4, 1, 3, 2])
    assert (b.q1, b.median, b.q3) == (1.75, 2.5, 3.25)


def test_box_matches_numpy_linear():
    import numpy as np
    rng = random.Random(4)
    for _ in range(300):
        xs = [rng.gauss(30, 10) for _ in range(rng.randint(1, 300))]
        b = box_stats(xs)
        ref = np.percentile(xs, [25, 50, 75], method="linear")
        for got, want in zip((b.q1, b.median, b.q3), ref):
            assert math.isclose(got, want, rel_tol=1e-12, abs_tol=1e-12)


def test_box_matches_oracle_random():
    rng = random.Random(2)
    for _ in range(1500):
        n = rng.randint(1, 200)
        kind = rng.random()
        if kind < 0.3:
            xs = [float(rng.randint(0, 5)) for _ in range(n)]
        elif kind < 0.6:
            xs = [rng.uniform(-100, 100) for _ in range(n)]
        else:
            xs = [rng.lognormvariate(0, 2) for _ in range(n)]
        check_box_against_oracle(xs)


def test_box_rejects_bad_input():
    with pytest.raises(DomainError):
        box_stats([])
    with pytest.raises(DomainError):
        box_stats([1.0, float("inf")])


def test_exact_mean_is_correctly_rounded():
    xs = [1e16, 1.0, -1e16, 1.0]
    assert exact_mean(xs) == 0.5
    rng = random.Random(8)
    for _ in range(500):
        xs = [rng.uniform(-100, 100) for _ in range(rng.randint(1, 50))]
        assert exact_mean(xs) == oracle_mean(xs)


# --- grids and manifests ----------------------------------------------------------------

def small_grid(store, scenes=1, iterations=1, models=("gpt-4o-mini",)):
    return ExperimentGrid(tuple(synthetic_scene(store, f"scene-{k}") for k in range(scenes)),
                          iterations, tuple(ModelConfig.single(m) for m in models))


def test_grid_guards(store):
    s = synthetic_scene(store, "a")
    m = (ModelConfig.single("gpt-4o-mini"),)
    with pytest.raises(DomainError):
        ExperimentGrid((s,), 0, m)
    with pytest.raises(DomainError):
        ExperimentGrid((), 1, m)
    with pytest.raises(DomainError):
        ExperimentGrid((s, s), 1, m)
    with pytest.raises(DomainError):
        ExperimentGrid((s,), 1, ())


def test_synthetic_scene_matches_experiment_layout(store):
    s = synthetic_scene(store, "Perimeter Institute")
    kinds = [a.kind for a in s.images]
    assert kinds == ["oblique_orbit"] * 6 + ["satellite"] * 2
    headings = [a.acquisition.heading_deg for a in s.images[:6]]
    assert headings == sorted(headings)
    assert synthetic_scene(store, "Perimeter Institute") == s


def test_single_cell_counts(store, prices):
    m = run_grid(small_grid(store), mock_provider_factory(), mock_embedding_providers(), prices)
    assert (m.totals["calls"], m.totals["triplets"], m.totals["cells"]) == (10, 8, 1)
    assert m.complete
    m.check(prices)
    assert m.cost == estimate_cost(m.cells[0].ledger, prices)


def test_random_small_grids_follow_call_formula(store, prices):
    rng = random.Random(12)
    models = ["gpt-4o-mini", "chatgpt-4o-latest", "deepseek-chat", "deepseek-reasoner"]
    for trial in range(6):
        n_scenes, its = rng.randint(1, 3), rng.randint(1, 3)
        ms = rng.sample(models, rng.randint(1, 4))
        grid = ExperimentGrid(tuple(synthetic_scene(store, f"t{trial}-{k}") for k in range(n_scenes)),
                              its, tuple(ModelConfig.single(x) for x in ms), max_parallel=3)
        m = run_grid(grid, mock_provider_factory(), mock_embedding_providers(), prices)
        assert m.totals["calls"] == n_scenes * its * len(ms) * (8 + 2)
        assert m.totals["triplets"] == n_scenes * its * len(ms) * 8
        assert [(c.scene, c.iteration, c.model) for c in m.cells] == [
            (s.name, i, x.label) for s, i, x in grid.cells()]


def test_failed_cells_recorded_and_run_continues(store, prices):
    grid = small_grid(store, scenes=2, iterations=1, models=("gpt-4o-mini", "deepseek-chat"))
    bad = grid.scenes[1].images[2].asset_id

    def factory(model_id):
        return FailingProvider(MockChatProvider(), lambda r: bad in str(r["messages"][-1]))

    m = run_grid(grid, factory, mock_embedding_providers(), prices)
    assert not m.complete
    assert [c.scene for c in m.failed_cells] == ["scene-1", "scene-1"]
    assert all(bad in c.reason for c in m.failed_cells)
    assert m.totals["triplets"] == 16 and m.totals["failed_cells"] == 2
    m.check(prices)
    means = per_scene_model_means(m)
    assert means.get("scene-1", "deepseek-chat") is None
    assert means.get("scene-0", "deepseek-chat") is not None


def test_manifest_round_trip_and_conservation(store, prices, tmp_path):
    m = run_grid(small_grid(store, iterations=2), mock_provider_factory(),
                 mock_embedding_providers(), prices)
    path = m.save(tmp_path / "runs")
    assert path.name == "manifest.json" and path.parent.parent == tmp_path / "runs"
    back = RunManifest.load(path.parent)
    assert back.to_dict() == m.to_dict()
    assert m.save(tmp_path / "runs") != path
    back.totals["calls"] += 1
    with pytest.raises(ManifestError):
        back.check()
    with pytest.raises(ManifestError):
        RunManifest.load(tmp_path / "nowhere")


def test_manifest_records_inputs(store, prices):
    grid = small_grid(store)
    m = run_grid(grid, mock_provider_factory(), mock_embedding_providers(), prices)
    assert m.inputs["assets"]["scene-0"] == [a.asset_id for a in grid.scenes[0].images]
    assert len(m.inputs["prices_sha256"]) == 64


# --- per-scene means ----------------------------------------------------------------

def fake_manifest(rng, scenes, models, iterations=2, images=3, clip=None):
    from buildscope.experiment.grid import CellRecord

    cells = []
    for s in scenes:
        for it in range(1, iterations + 1):
            for m in models:
                c = CellRecord(s, m, it)
                c.triplets = [ScoreTriplet("cap", f"{s}-{k}",
                                           clip if clip is not None else rng.uniform(-20, 60),
                                           rng.uniform(-30, 70), rng.uniform(0, 60))
                              for k in range(images)]
                cells.append(c)
    grid = {"scenes": [{"name": s} for s in scenes], "models": [{"label": m} for m in models],
            "iterations": iterations}
    return RunManifest(grid, cells, RunManifest.compute_totals(cells))


def test_means_constant_field():
    m = fake_manifest(random.Random(1), ["a", "b"], ["x", "y"], clip=30.0)
    t = per_scene_model_means(m)
    assert all(v == 30.0 for v in t.values.values())


def test_means_match_group_by_oracle():
    rng = random.Random(21)
    for _ in range(20):
        scenes = [f"s{k}" for k in range(rng.randint(1, 4))]
        models = [f"m{k}" for k in range(rng.randint(1, 4))]
        m = fake_manifest(rng, scenes, models, rng.randint(1, 3), rng.randint(1, 5))
        table = per_scene_model_means(m)
        groups = {}
        for c in m.cells:
            for t in c.triplets:
                groups.setdefault((c.scene, c.model), []).append(t.clip_pct)
        for key, xs in groups.items():
            assert table.values[key] == oracle_mean(xs)
        assert table.scenes == tuple(scenes) and table.models == tuple(models)


def test_means_single_cell_equals_box_mean(store, prices):
    m = run_grid(small_grid(store), mock_provider_factory(), mock_embedding_providers(), prices)
    table = per_scene_model_means(m)
    xs = [t.clip_pct for t in m.cells[0].triplets]
    assert table.get("scene-0", "gpt-4o-mini") == box_stats(xs).mean


# --- reports -----------------------------------------------------------------------------

def test_reports_deterministic_and_complete(store, prices, tmp_path):
    grid = small_grid(store, scenes=2, iterations=2, models=("gpt-4o-mini", "deepseek-chat"))
    m = run_grid(grid, mock_provider_factory(), mock_embedding_providers(), prices)
    a = emit_reports(m, tmp_path / "a")
    b = emit_reports(RunManifest.load(m.save(tmp_path / "runs")), tmp_path / "b")
    assert [p.name for p in a] == ["scores.csv", "summary.csv", "means.csv", "clip.svg",
                                   "blip.svg", "pac.svg", "means.svg"]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes(), pa.name
    rows = list(csv.reader(io.StringIO((tmp_path / "a" / "scores.csv").read_text())))
    assert rows[0] == ["scene", "model", "iteration", "asset_id", "clip_pct", "blip_pct", "pac_pct"]
    assert len(rows) - 1 == m.totals["triplets"] == 2 * 2 * 2 * 8
    summary = list(csv.DictReader(io.StringIO((tmp_path / "a" / "summary.csv").read_text())))
    assert {r["quartile_method"] for r in summary} == {"type7-linear"}
    svg = (tmp_path / "a" / "clip.svg").read_text()
    assert svg.startswith("<?xml") and "<dc:date>" not in svg
    assert "#008000" in svg  # mean markers


def test_reports_summary_values_round_trip(store, prices, tmp_path):
    m = run_grid(small_grid(store, iterations=3), mock_provider_factory(),
                 mock_embedding_providers(), prices)
    emit_reports(m, tmp_path)
    rows = list(csv.DictReader(io.StringIO((tmp_path / "summary.csv").read_text())))
    clip = next(r for r in rows if r["metric"] == "clip")
    xs = [t.clip_pct for c in m.cells for t in c.triplets]
    assert float(clip["mean"]) == box_stats(xs).mean and int(clip["n"]) == 24


def test_reports_for_empty_manifest(tmp_path):
    files = emit_reports(RunManifest.empty(), tmp_path)
    assert sorted(p.name for p in files) == ["means.csv", "scores.csv", "summary.csv"]
    assert (tmp_path / "scores.csv").read_text().count("\n") == 1


def test_reports_refuse_inconsistent_manifest(tmp_path):
    m = RunManifest.empty()
    m.totals["triplets"] = 3
    with pytest.raises(ManifestError):
        emit_reports(m, tmp_path)


# --- staging -----------------------------------------------------------------------------

def test_stage_frames_and_store(store, tmp_path, make_png):
    from buildscope.assets import AssetStore
    from buildscope.maps import StaticMapRequest

    d = tmp_path / "scene"
    poses = generate_orbit(OrbitSpec(GeoPoint(43.4686, -80.5284), 31))
    d.mkdir()
    write_orbit_document(poses, d / "orbit.orbit")
    (d / "frames").mkdir()
    for k in range(31):
        (d / "frames" / f"frame_{k:03d}.png").write_bytes(make_png(4, 4, (k, 3, 3)))
    src = AssetStore(d / "assets")
    for z in (18, 19):
        src.put(make_png(5, 5, (z, 0, 0)), "satellite", StaticMapRequest(poses[0].target, z))
    src.put(make_png(5, 5, (1, 2, 3)), "street_map", StaticMapRequest(poses[0].target, 17, "roadmap"))
    images = stage_scene_images(d, store)
    assert [a.kind for a in images] == ["oblique_orbit"] * 6 + ["satellite"] * 2 + ["street_map"]
    assert [a.acquisition.zoom for a in images[6:8]] == [18, 19]
    assert len(stage_scene_images(d, store, oblique_step_deg=None)) == 31 + 3
    (d / "frames" / "frame_005.png").unlink()
    with pytest.raises(IntakeError):
        stage_scene_images(d, store)
    with pytest.raises(ConfigError):
        stage_scene_images(tmp_path / "missing", store)
