"""Exception hierarchy shared across the package.

ConfigError maps to CLI exit code 2, NumericError to 3 and
UnreliableScoreError to 4.
"""

from __future__ import annotations


class FracmleError(Exception):
    """Base class for all package errors."""


class ConfigError(FracmleError):
    """Invalid configuration, arguments or input files."""


class NumericError(FracmleError):
    """A numerical procedure failed (divergence, bad embedding, singularity)."""


class EmbeddingError(NumericError):
    """Circulant embedding produced eigenvalues below tolerance."""

    def __init__(self, min_eigenvalue: float, tolerance: float):
        self.min_eigenvalue = float(min_eigenvalue)
        self.tolerance = float(tolerance)
        super().__init__(
            f"circulant embedding has negative eigenvalue {min_eigenvalue:.6e} "
            f"beyond tolerance {tolerance:.1e}"
        )


class DivergenceError(NumericError):
    """A discretized path left the admissible range."""

    def __init__(self, step: int, context: str = ""):
        self.step = int(step)
        self.context = context
        msg = f"state diverged at step {step}"
        if context:
            msg += f" ({context})"
        super().__init__(msg)


class NearSingularityError(NumericError):
    """A Malliavin matrix is numerically singular."""

    def __init__(self, node: int, condition: float):
        self.node = int(node)
        self.condition = float(condition)
        super().__init__(
            f"Malliavin matrix near-singular at grid node {node} "
            f"(condition number {condition:.3e})"
        )


class CapabilityError(FracmleError):
    """The requested computation exceeds the supported model class."""


class DegenerateSeriesError(ConfigError):
    """Input series is degenerate (e.g. constant) for the requested statistic."""


class UnreliableScoreError(FracmleError):
    """A density denominator is indistinguishable from zero."""

    def __init__(self, observation: int, value: float, threshold: float):
        self.observation = int(observation)
        self.value = float(value)
        self.threshold = float(threshold)
        super().__init__(
            f"density estimate for observation {observation} is unreliable: "
            f"{value:.3e} below threshold {threshold:.3e}"
        )
