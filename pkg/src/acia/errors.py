"""Exception hierarchy shared across the package."""


class AciaError(Exception):
    """Base class for every error raised by acia."""


class NormalizationError(AciaError):
    pass


class ShapeError(AciaError):
    pass


class EmptyConditioningSet(AciaError):
    pass


class UnknownOutcome(AciaError):
    pass


class DuplicateEnvironmentId(AciaError):
    pass


class EmptyCell(AciaError):
    """Raised when a kernel cell has no supporting samples."""


class SupportMismatch(AciaError):
    pass


class AlphaOutOfRange(AciaError):
    pass


class FamilyMismatch(AciaError):
    pass


class ConfigMismatch(AciaError):
    pass


class RejectionBudgetExceeded(AciaError):
    pass


class BadDims(AciaError):
    pass


class DimMismatch(AciaError):
    pass


class NonFiniteObjective(AciaError):
    pass


class EmptyBatch(AciaError):
    pass


class EmptyDataset(AciaError):
    pass


class SingleEnvironment(AciaError):
    pass


class DivergenceDetected(AciaError):
    pass


class ConfigError(AciaError):
    pass


class ValidationError(ConfigError):
    """Config validation failure, carrying the dotted path of the bad field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class ParseError(ConfigError):
    """Config file is missing or is not valid JSON."""
