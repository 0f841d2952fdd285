import numpy as np
import pytest

from splatdiff.geometry import Camera, OptimizationConfig, PointCloud


def front_camera(size=32, focal=32.0, distance=3.0):
    """Camera on +z looking at the origin (world axes aligned with camera axes)."""
    return Camera(np.eye(3), [0.0, 0.0, -distance], focal, size, size)


def facing_cloud(positions, sigma=0.05, albedo=None):
    """Points whose normals face a +z camera."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    normals = np.tile([0.0, 0.0, 1.0], (len(positions), 1))
    return PointCloud(positions, normals, albedo, splat_sigma=sigma)


def random_scene(rng, n=5, spread=0.3, sigma=(0.03, 0.06), tilt=0.4):
    pos = rng.uniform(-spread, spread, size=(n, 3))
    nrm = np.array([0.0, 0.0, 1.0]) + rng.uniform(-tilt, tilt, size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    albedo = rng.uniform(0.3, 1.0, size=(n, 3))
    return PointCloud(pos, nrm, albedo, splat_sigma=rng.uniform(*sigma, size=n))


@pytest.fixture
def cfg():
    return OptimizationConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


class CriterionReport:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self, capsys):
        self.capsys = capsys
        self.number = None
        self.title = None
        self.done = False

    def begin(self, number, title):
        self.number, self.title = number, title

    def check(self, ok, detail):
        line = f"criterion {self.number} {'PASS' if ok else 'FAIL'}: {self.title} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        self.done = True
        with self.capsys.disabled():
            print("\n" + line)
        assert ok, line


@pytest.fixture
def criterion(capsys):
    report = CriterionReport(capsys)
    yield report
    if report.number is not None and not report.done:
        ACCEPTANCE_LINES.append(f"criterion {report.number} FAIL: {report.title} -- "
                                "raised before completing")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
