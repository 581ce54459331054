import math

import numpy as np
import pytest

from surfseg.cloud import SemanticClass, make_cloud
from surfseg.scene import LidarSpec, SceneSpec, ShapeSpec, SENSOR_HEIGHT, simulate_scan


def grid_cloud(rows=4, cols=6, r=5.0, valid=None, gt=True):
    theta = np.linspace(0.1, -0.3, rows)
    phi = np.arange(cols) * (2 * math.pi / cols)
    rr = np.full((rows, cols), r, dtype=float)
    if valid is None:
        valid = np.ones((rows, cols), dtype=bool)
    rr = np.where(valid, rr, 0.0)
    cls = np.zeros((rows, cols), dtype=np.int8) if gt else None
    inst = np.where(valid, 1, 0).astype(np.int32) if gt else None
    return make_cloud(theta, phi, rr, valid, cls, inst)


def coarse_lidar(noise=0.0, step_deg=1.0, beams=32):
    return LidarSpec(n_beams=beams, horizontal_step=math.radians(step_deg), noise_sigma=noise)


def ground():
    return ShapeSpec(SemanticClass.GROUND_PLANE, 1, (0.0, 0.0, -SENSOR_HEIGHT))


def scan(shapes, noise=0.0, step_deg=1.0, seed=0, beams=32):
    return simulate_scan(SceneSpec(tuple(shapes), coarse_lidar(noise, step_deg, beams), seed))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
