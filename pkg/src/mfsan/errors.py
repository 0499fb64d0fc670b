"""Exception types raised across the package.

Every error the library raises deliberately derives from MfsanError so
callers (and the CLI exit-code mapping) can distinguish our failures from
genuine bugs.
"""


class MfsanError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MfsanError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(MfsanError):
    """An API contract was violated (e.g. backward on a non-scalar)."""


class MathDomainError(MfsanError):
    """An input lies outside an operation's mathematical domain."""


class LabelError(MfsanError):
    """A class label is outside the valid range [0, num_classes)."""


class DegenerateDataError(MfsanError):
    """Data admits no meaningful statistic (e.g. all pairwise distances zero)."""


class InsufficientSamplesError(MfsanError):
    """Too few samples for the requested estimator."""


class ValidationError(MfsanError):
    """A config or spec failed validation.  Carries the list of violations."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ParseError(MfsanError):
    """A file could not be parsed.  Message names the file and line."""


class DivergenceError(MfsanError):
    """Training produced a non-finite value.  Message names the component."""


class CheckpointError(MfsanError):
    """A checkpoint file is missing, corrupt, or version-incompatible."""


class OutputConflictError(MfsanError):
    """An output location already exists and overwrite was not forced."""
