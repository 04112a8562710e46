"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, NumericalError -> 3,
MissingInputError -> 4.
"""


class SpikeSlabError(Exception):
    """Base class for all package errors."""


class ConfigError(SpikeSlabError):
    """Invalid configuration or precondition violation (bad dimensions,
    out-of-range truncation parameters, capacity guards)."""


class CapacityError(ConfigError):
    """Operation requires enumerating more binary states than the configured
    guard allows."""


class NumericalError(SpikeSlabError):
    """A linear-algebra operation failed even after jitter escalation.

    Carries enough context (matrix label, condition estimate, binary state
    if applicable) to diagnose the failing solve.
    """

    def __init__(self, message, *, context=None, cond=None, state=None):
        super().__init__(message)
        self.context = context
        self.cond = cond
        self.state = state

    def __str__(self):
        base = super().__str__()
        extra = []
        if self.context is not None:
            extra.append(f"context={self.context}")
        if self.cond is not None:
            extra.append(f"cond~{self.cond:.3e}")
        if self.state is not None:
            extra.append(f"state={self.state}")
        if extra:
            return f"{base} ({', '.join(extra)})"
        return base


class MissingInputError(SpikeSlabError):
    """A required input file (image, source benchmark) does not exist."""
