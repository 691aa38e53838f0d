"""Error taxonomy shared across the library."""


class GradlabError(Exception):
    """Base class for all library errors."""


class ShapeError(GradlabError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(GradlabError, ValueError):
    """A configuration value violates its declared invariants."""


class InputError(GradlabError, ValueError):
    """Runtime input (ids, labels, files) is out of contract."""


class UsageError(GradlabError, RuntimeError):
    """An API was called outside its preconditions."""


class OracleError(GradlabError, RuntimeError):
    """A numerical test oracle could not be evaluated."""


class DegenerateTargetError(GradlabError, RuntimeError):
    """Every selected target gradient block has zero norm."""
