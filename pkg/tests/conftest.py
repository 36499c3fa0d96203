import numpy as np
import pytest

from scotkit.geometry import box
from scotkit.ingest import AoiMetadata, Footprint, FootprintSeries

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when not in ("setup", "call"):
        return
    n = dict(report.user_properties).get("criterion")
    if n is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    status, prior = _CRITERIA.get(n, ("PASS", ""))
    if report.failed:
        status = "FAIL"
    elif report.when != "call":
        return
    if detail and detail not in prior:
        prior = f"{prior}; {detail}" if prior else detail
    _CRITERIA[n] = (status, prior)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")


@pytest.fixture
def criterion(request, record_property):
    """Tag a test with its acceptance criterion; call ``criterion(n, detail)``."""

    def tag(n: int, detail: str = "") -> None:
        record_property("criterion", n)
        if detail:
            request.node.user_properties[:] = [p for p in request.node.user_properties if p[0] != "detail"]
            record_property("detail", detail)

    return tag


def series_from(spec, frames, aoi_id="aoi", metadata=None):
    """Build a series from ``{building_id: (polygon, [frames...])}``."""
    fps = [Footprint(t, bid, poly) for bid, (poly, ts) in spec.items() for t in ts]
    return FootprintSeries(aoi_id, frames, fps, metadata or AoiMetadata(gsd=1.0, width=64, height=64))


def square(x, y, s=1.0):
    return box(x, y, x + s, y + s)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
