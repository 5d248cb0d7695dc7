"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries the category it
belongs to rather than a code of its own.
"""


class SononLabError(Exception):
    """Base class for all package errors."""


class ConfigError(SononLabError, ValueError):
    """Invalid run configuration. ``key`` names the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class NumericalError(SononLabError, ArithmeticError):
    """Runtime failure of a numerical method."""


class SingularGeometryError(NumericalError):
    pass


class NodeProximityError(NumericalError):
    """Guidance velocity requested where the wavefunction vanishes."""


class PropagationError(NumericalError):
    pass


class TrajectoryAbortError(NumericalError):
    """Step halving hit the minimum step. ``trajectory`` holds the partial path."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class StepSizeError(NumericalError):
    pass


class AnalysisError(SononLabError):
    """Result-quality failure (too few samples, too many aborted runs, ...)."""


class EnsembleQualityError(AnalysisError):
    pass


class EstimatorError(AnalysisError):
    pass


class ContractError(SononLabError):
    """A model was asked to do something the framework forbids."""
