import numpy as np
import pytest

from ppdelab.paths import Path, TimeGrid


@pytest.fixture
def rs():
    return np.random.default_rng(12345)


def walk(rs, grid: TimeGrid, dim: int = 1, scale: float = 1.0) -> Path:
    v = np.zeros((grid.m + 1, dim))
    v[1:] = np.cumsum(rs.normal(0.0, scale * np.sqrt(grid.dt), (grid.m, dim)), axis=0)
    return Path(grid, v)
