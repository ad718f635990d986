import io
from pathlib import Path

import pytest
from PIL import Image

from buildscope.assets import AssetStore

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def store(tmp_path):
    return AssetStore(tmp_path / "assets")


def png_bytes(w=8, h=8, rgb=(10, 20, 30)):
    buf = io.BytesIO()
    Image.new("RGB", (w, h), rgb).save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture
def make_png():
    return png_bytes


@pytest.fixture
def make_images(store):
    """Build ``n`` distinct oblique-orbit assets around a fixed target."""
    from buildscope.geo import GeoPoint
    from buildscope.orbit import OrbitSpec, generate_orbit

    def build(n=8, shade=0):
        poses = generate_orbit(OrbitSpec(GeoPoint(43.4686, -80.5284), count=n))
        return [store.put(png_bytes(8, 8, (shade % 256, k, 7)), "oblique_orbit", p)
                for k, p in enumerate(poses)]

    return build


# --- acceptance summary -------------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    tag = getattr(getattr(item, "function", None), "criterion", None)
    if tag is not None:
        report.user_properties.append(("criterion", tag))


def pytest_terminal_summary(terminalreporter):
    results = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            tag = dict(getattr(rep, "user_properties", ())).get("criterion")
            if tag is None:
                continue
            ok = rep.outcome == "passed" and results.get(tag, True)
            results[tag] = ok if rep.when == "call" or not ok else results.get(tag, ok)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), ok in sorted(results.items()):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}")
