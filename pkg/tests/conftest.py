import time
import numpy as np
import pytest

from roadpriv.roadnet import GeoPoint, build_graph, grid_graph, haversine

ROME = GeoPoint(41.9028, 12.4964)


@pytest.fixture
def line3():
    nodes = [(0, (41.90, 12.49)), (1, (41.91, 12.49)), (2, (41.92, 12.49))]
    return build_graph(nodes, [(0, 1, 2.0), (1, 2, 3.0)])


@pytest.fixture
def grid3():
    return grid_graph(3, 3, cell_km=0.1)


@pytest.fixture
def grid5():
    return grid_graph(5, 5, cell_km=0.1)


def random_geo_graph(rng, n, extent_km=2.0, p_edge=0.15, speed_range=(10.0, 120.0)):
    """Random directed graph whose edge times never beat ``speed_range[1]``."""
    dlat = extent_km / 111.19
    lat = ROME.lat + rng.uniform(0, dlat, n)
    lon = ROME.lon + rng.uniform(0, dlat / np.cos(np.radians(ROME.lat)), n)
    nodes = [(i, GeoPoint(float(lat[i]), float(lon[i]))) for i in range(n)]
    edges = []
    for u in range(n):
        for v in range(n):
            if u != v and rng.random() < p_edge:
                d = haversine(nodes[u][1], nodes[v][1])
                s = rng.uniform(*speed_range)
                edges.append((u, v, max(d, 1e-3) / s * 3600.0))
    return build_graph(nodes, edges)


# ------------------------------------------------------------ acceptance

ACCEPTANCE: dict = {}
SESSION: dict = {"start": time.time()}


def pytest_sessionstart(session):
    SESSION["start"] = time.time()


def pytest_collection_modifyitems(session, config, items):
    # acceptance checks run last so the suite-time criterion sees the whole session
    items.sort(key=lambda it: "test_acceptance" in it.nodeid)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
