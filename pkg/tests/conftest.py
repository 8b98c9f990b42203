import json

import numpy as np
import pytest

from wflow.measures import ParticleCloud, make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_cloud(rng):
    return ParticleCloud(rng.standard_normal((6, 2)))


@pytest.fixture
def write_config(tmp_path):
    """Write a JSON experiment config into tmp_path and return its path."""
    def _write(data, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data, indent=2))
        return path
    return _write


@pytest.fixture
def ring_points():
    angles = np.linspace(0.0, 2 * np.pi, 24, endpoint=False)
    return ParticleCloud(2.0 * np.column_stack([np.cos(angles), np.sin(angles)]))
