"""Exception taxonomy shared across the package."""


class GraphGroundError(Exception):
    """Base class for all domain errors raised by this package."""


class ContractError(GraphGroundError):
    """A caller violated a documented precondition (shape, range, source tag)."""


class ComputationError(GraphGroundError):
    """A numeric computation produced non-finite values or diverged."""


class DataError(GraphGroundError):
    """A data file or record failed validation."""


class ConfigError(GraphGroundError):
    """A configuration value is unknown, malformed, or unsatisfiable."""
