"""Exception hierarchy shared across the toolkit."""


class SegalignError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(SegalignError):
    """Operands do not conform for an operation."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        msg = f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class DomainError(SegalignError):
    """Input outside the mathematical domain of an operation."""


class ValidationError(SegalignError):
    """Archive or artifact contents violate their declared structure."""


class ConfigError(SegalignError):
    """Configuration value is missing, unknown, or out of range."""
