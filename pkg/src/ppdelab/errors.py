class GridError(ValueError):
    """A time or path does not sit on the expected grid."""


class BudgetError(RuntimeError):
    """A computation was rejected before execution because it exceeds its cost budget."""


class RegressionError(RuntimeError):
    """Least-squares projection failed (ill-conditioned design at some node)."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class SolverError(RuntimeError):
    """Non-finite values or invalid state encountered by a solver."""


class ConfigError(ValueError):
    """Experiment configuration failed validation."""

    def __init__(self, message: str, diagnostics: list[str] | None = None):
        diagnostics = list(diagnostics or [])
        super().__init__(f"{message}: " + "; ".join(diagnostics) if diagnostics else message)
        self.diagnostics = diagnostics
