"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """Numeric input violates a precondition (e.g. NaN/Inf entries)."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class InvalidConfig(ValueError):
    """A configuration value or call argument is out of range."""


class InsufficientData(ValueError):
    """A dataset is too small to satisfy a memory quota."""


class EmptyMemory(ValueError):
    """Sampling was requested from an empty memory buffer."""


class IncompleteRecord(ValueError):
    """A run record is missing entries required by a metric."""


class InsufficientPairs(ValueError):
    """Too few nonzero differences for a signed-rank test."""


class DataAccessError(RuntimeError):
    """An adaptation step tried to read data outside its task and memory."""


class ReportError(RuntimeError):
    """Report generation failed; the message lists the offending files."""
