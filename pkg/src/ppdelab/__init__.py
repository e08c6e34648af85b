"""Monte Carlo and lattice laboratory for non-Markovian FBSDEs and path-dependent PDEs."""

__version__ = "0.1.0"

from ppdelab.errors import (
    BudgetError,
    ConfigError,
    GridError,
    RegressionError,
    SolverError,
)
from ppdelab.paths import Path, PathPoint, TimeGrid

__all__ = [
    "BudgetError",
    "ConfigError",
    "GridError",
    "Path",
    "PathPoint",
    "RegressionError",
    "SolverError",
    "TimeGrid",
    "__version__",
]
