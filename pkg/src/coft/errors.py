"""Exception types shared across the package."""


class CoftError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CoftError, ValueError):
    """Dimension or shape mismatch between operands."""


class DomainError(CoftError, ValueError):
    """Input outside the mathematical domain of an operation (zero vector, tau <= 0, ...)."""


class ContractError(CoftError, RuntimeError):
    """A caller violated a documented precondition (empty batch, nondeterministic loss, ...)."""


class ConfigError(CoftError, ValueError):
    """Invalid or inconsistent configuration."""


class TrainingError(CoftError, RuntimeError):
    """Training failed: divergence or a non-finite gradient.

    ``param_name`` identifies the offending parameter when known.
    """

    def __init__(self, message, param_name=None):
        super().__init__(message)
        self.param_name = param_name


class PipelineError(CoftError, RuntimeError):
    """A pipeline stage cannot proceed (e.g. the filtered clean set is empty)."""


class IntegrityError(CoftError, RuntimeError):
    """Stored data does not match its recorded checksum."""


class FormatError(CoftError, ValueError):
    """A file does not conform to its documented format.

    ``line`` carries the 1-based offending line number when applicable.
    """

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line
