import numpy as np
import pytest
from hypothesis import settings

from bivarcar.graph import build_graph
from bivarcar.simulate import Scenario, generate

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_graph(rng, n_max=60, g_max=4):
    """Random graph with 1..g_max connected components of size >= 2."""
    G = int(rng.integers(1, g_max + 1))
    sizes = rng.integers(2, max(3, n_max // G) + 1, size=G)
    edges, start = [], 0
    for s in sizes:
        nodes = np.arange(start, start + s)
        # random spanning tree plus a few chords
        for i in range(1, s):
            edges.append((int(nodes[i]), int(nodes[rng.integers(0, i)])))
        for _ in range(int(rng.integers(0, s))):
            a, b = rng.choice(nodes, 2, replace=False)
            edges.append((int(a), int(b)))
        start += s
    return build_graph(int(start), edges), G


@pytest.fixture(scope="session")
def twenty_graphs():
    rng = np.random.default_rng(20240607)
    return [random_graph(rng) for _ in range(20)]


@pytest.fixture(scope="session")
def small_sim():
    """Two outcomes on a 3x4 lattice, small enough for quick engine fits."""
    return generate(Scenario(seed=11, graph="lattice:3x4", n_per_area=6))


@pytest.fixture(scope="session")
def small_data(small_sim):
    return small_sim.dataset()


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        store[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        terminalreporter.write_line(store[n])
