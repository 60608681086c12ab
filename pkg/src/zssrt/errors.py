"""Exception types shared across the package.

Everything user-facing derives from ValueError / RuntimeError / OSError so
callers that don't care about the fine distinctions can still catch the
familiar builtins.
"""


class ConfigurationError(ValueError):
    """A parameter or config value is outside its documented domain."""


class ValidationError(ValueError):
    """A data object violates one of its structural invariants."""


class ShapeError(ValueError):
    """Array arguments have inconsistent or unsupported shapes."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage needs an artifact that a previous stage did not write."""
