"""Exception types shared across the package."""


class BasinlabError(Exception):
    """Base class for all package errors."""


class DomainError(BasinlabError, ValueError):
    """Input outside the mathematical domain (non-finite vectors, bad shapes)."""


class ParameterError(BasinlabError, ValueError):
    """Invalid numeric parameter (negative radius, q < 2, beta out of range, ...)."""


class RegionError(BasinlabError):
    """Point lies outside a landscape's declared validity region."""


class KindError(BasinlabError, ValueError):
    """Condition kind not applicable to the given minima set."""


class PremiseError(BasinlabError, ValueError):
    """Premise of a bound does not hold (e.g. the start point lies outside N_r)."""


class TrajectoryAbort(BasinlabError):
    """SGD produced a non-finite gradient; carries the step and trajectory index."""

    def __init__(self, message, *, index=None, step=None):
        super().__init__(message)
        self.index = index
        self.step = step


class RefusedError(BasinlabError):
    """An estimator declined to produce a result (e.g. too few stable paths)."""


class ConfigError(BasinlabError):
    """Experiment file failed parsing or schema validation."""
