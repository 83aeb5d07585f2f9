import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from polarsfp.scene import MaterialSpec, SceneSpec, Sphere, camera_ring, render_views

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

GLOSSY = MaterialSpec(n_true=1.5, diffuse_albedo=0.5, specular_strength=0.6, specular_exponent=3.0)
LIGHT = (0.2, 0.3, 1.0)


def glossy_sphere(size=64, views=3, increment_deg=10.0, **kw):
    kw.setdefault("material", GLOSSY)
    kw.setdefault("light_direction", LIGHT)
    return SceneSpec(Sphere((0.0, 0.0, 0.0), 1.0), views=camera_ring(views, math.radians(increment_deg)),
                     image_size=(size, size), **kw)


@pytest.fixture(scope="session")
def small_render():
    scene = glossy_sphere(64)
    stacks, truth, corr = render_views(scene, 0)
    return scene, stacks, truth, corr


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
