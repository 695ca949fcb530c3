import numpy as np
import pytest

from anchorpc import _backend
from anchorpc.cloud import PointCloud

BACKENDS = ["numba", "numpy"] if _backend.HAS_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = _backend.BACKEND
    _backend.set_backend(request.param)
    yield request.param
    _backend.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_cloud(rng, n=256, scale=1.0):
    return PointCloud(rng.uniform(0.0, scale, size=(n, 3)))


def sphere_cloud(rng, n=1000):
    v = rng.normal(size=(n, 3))
    return PointCloud(v / np.linalg.norm(v, axis=1, keepdims=True))


def cube_surface(rng, n=3000):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1, 1, (n, 2))
    P = np.zeros((n, 3))
    for f in range(6):
        m = face == f
        ax, s = f // 2, (1 if f % 2 else -1)
        other = [a for a in range(3) if a != ax]
        P[m, ax] = s
        P[m, other[0]] = uv[m, 0]
        P[m, other[1]] = uv[m, 1]
    return PointCloud(P)


def grid_plane(n_side=12, spacing=0.1):
    g = np.arange(n_side) * spacing
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return PointCloud(np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)]))


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion."""
    state = {"detail": ""}
    yield state
    failed = getattr(request.node, "rep_call", None) is not None and request.node.rep_call.failed
    verdict = "FAIL" if failed else "PASS"
    ACCEPTANCE_LINES.append(f"{request.node.name}: {verdict} {state['detail']}".rstrip())


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
